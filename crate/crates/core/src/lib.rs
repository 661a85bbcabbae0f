//! Class-conditional self-rewarding (CCSR) curation of text-to-image
//! fine-tuning data.
//!
//! The pipeline runs seven stages over a single run directory:
//!
//! 1. [`promptgen`]: class-conditioned diffusion prompts from a chat model.
//! 2. [`generation`]: N unseeded candidate images per prompt.
//! 3. [`judge`]: a polarity-scored visual-question battery per image.
//! 4. [`detectfilter`]: open-vocabulary detection over the best-scoring images.
//! 5. [`dataset`]: export of the optimal prompt/image pairs.
//! 6. [`finetune`]: LoRA trainer invocation and scaled inference backends.
//! 7. [`eval`]: CLIP-score win-rate comparison and LoRA-scale sweeps.
//!
//! Every model capability sits behind the traits in [`adapters`], which ship
//! deterministic mocks and a transcript replayer so the whole loop runs
//! without GPUs.

pub mod adapters;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod detectfilter;
pub mod digest;
pub mod eval;
pub mod finetune;
pub mod generation;
pub mod judge;
pub mod pipeline;
pub mod promptgen;

pub use adapters::{
    BackendDescriptor, BackendError, BackendKind, Backends, Detection, ImageRef, ImageStore,
    SamplingParams,
};

pub use config::RunConfig;
