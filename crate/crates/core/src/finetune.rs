//! LoRA fine-tuning: training configuration, the external trainer
//! invocation contract, and scale-weighted inference backends.
//!
//! The repository never trains anything itself. It writes a flat
//! `key = value` config, runs the configured trainer command with
//! `{dataset_path}`, `{config_path}` and `{output_path}` substituted, and
//! checks that the config the trainer saw is the one it was given.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use crate::adapters::{AdapterSpec, BackendResult, ImageRequest, TextToImageBackend};
use crate::dataset::DatasetBundle;
use crate::digest::{sha256_file, sha256_hex};

/// Trainer command that runs the built-in stub instead of a process.
pub const MOCK_TRAINER: &str = "mock";
pub const DEFAULT_WEIGHTS_FILE: &str = "adapter_model.safetensors";
/// Scales probed by the evaluation sweep besides the endpoints.
pub const EVAL_SCALES: [f64; 3] = [0.2, 0.4, 0.7];

#[derive(Debug, thiserror::Error)]
pub enum FinetuneError {
    #[error("invalid training config: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("trainer not found: {0}")]
    TrainerMissing(String),
    #[error("training failed ({status}): {excerpt}")]
    TrainingFailed { status: String, excerpt: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> FinetuneError + '_ {
    move |e| FinetuneError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    #[serde(rename = "mixed-16")]
    Mixed16,
    #[serde(rename = "full-32")]
    Full32,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Mixed16 => "mixed-16",
            Precision::Full32 => "full-32",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mixed-16" => Some(Precision::Mixed16),
            "full-32" => Some(Precision::Full32),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset_path: PathBuf,
    pub resolution: u32,
    pub epochs: u32,
    pub batch_size: u32,
    /// Held constant for the whole run.
    pub learning_rate: f64,
    pub horizontal_flip: bool,
    pub precision: Precision,
    pub lora_rank: u32,
    pub base_model_id: String,
    pub output_path: PathBuf,
}

/// Explicit settings that win over the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub resolution: Option<u32>,
    pub epochs: Option<u32>,
    pub batch_size: Option<u32>,
    pub learning_rate: Option<f64>,
    pub horizontal_flip: Option<bool>,
    pub precision: Option<Precision>,
    pub lora_rank: Option<u32>,
}

impl TrainOverrides {
    /// Violations of the config invariants among the set fields.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.resolution == Some(0) {
            v.push("train.resolution must be > 0".into());
        }
        if self.epochs == Some(0) {
            v.push("train.epochs must be >= 1".into());
        }
        if self.batch_size == Some(0) {
            v.push("train.batch_size must be >= 1".into());
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                v.push(format!("train.learning_rate must be > 0, got {lr}"));
            }
        }
        if self.lora_rank == Some(0) {
            v.push("train.lora_rank must be >= 1".into());
        }
        v
    }
}

impl TrainConfig {
    pub const DEFAULT_RESOLUTION: u32 = 512;
    pub const DEFAULT_EPOCHS: u32 = 100;
    pub const DEFAULT_BATCH_SIZE: u32 = 18;
    pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
    pub const DEFAULT_LORA_RANK: u32 = 4;

    pub fn validate(&self) -> Result<(), FinetuneError> {
        let mut v = TrainOverrides {
            resolution: Some(self.resolution),
            epochs: Some(self.epochs),
            batch_size: Some(self.batch_size),
            learning_rate: Some(self.learning_rate),
            horizontal_flip: None,
            precision: None,
            lora_rank: Some(self.lora_rank),
        }
        .violations();
        if self.base_model_id.trim().is_empty() {
            v.push("base_model_id must not be empty".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(FinetuneError::Validation(v))
        }
    }

    /// The flat `key = value` file handed to the trainer. Field order is
    /// fixed so equal configs serialize to equal bytes.
    pub fn to_flat(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            writeln!(s, "{k} = {v}").expect("write to String");
        };
        kv("dataset_path", &self.dataset_path.display());
        kv("resolution", &self.resolution);
        kv("epochs", &self.epochs);
        kv("batch_size", &self.batch_size);
        kv("learning_rate", &self.learning_rate);
        kv("horizontal_flip", &self.horizontal_flip);
        kv("precision", &self.precision.as_str());
        kv("lora_rank", &self.lora_rank);
        kv("base_model_id", &self.base_model_id);
        kv("output_path", &self.output_path.display());
        s
    }

    pub fn from_flat(text: &str) -> Result<Self, FinetuneError> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| FinetuneError::Validation(vec![format!("malformed line {line:?}")]))?;
            map.insert(k.trim(), v.to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| FinetuneError::Validation(vec![format!("missing key {k}")]))
        };
        fn num<T: std::str::FromStr>(k: &str, v: String) -> Result<T, FinetuneError> {
            v.parse()
                .map_err(|_| FinetuneError::Validation(vec![format!("{k}: cannot parse {v:?}")]))
        }
        let precision = get("precision")?;
        Ok(Self {
            dataset_path: get("dataset_path")?.into(),
            resolution: num("resolution", get("resolution")?)?,
            epochs: num("epochs", get("epochs")?)?,
            batch_size: num("batch_size", get("batch_size")?)?,
            learning_rate: num("learning_rate", get("learning_rate")?)?,
            horizontal_flip: num("horizontal_flip", get("horizontal_flip")?)?,
            precision: Precision::parse(&precision).ok_or_else(|| {
                FinetuneError::Validation(vec![format!("precision: unknown value {precision:?}")])
            })?,
            lora_rank: num("lora_rank", get("lora_rank")?)?,
            base_model_id: get("base_model_id")?,
            output_path: get("output_path")?.into(),
        })
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_flat().as_bytes())
    }

    /// Digest of the hyperparameters alone, leaving out the run-local
    /// dataset and output paths.
    pub fn hyperparameter_digest(&self) -> String {
        sha256_hex(
            self.to_flat()
                .lines()
                .filter(|l| !l.starts_with("dataset_path ") && !l.starts_with("output_path "))
                .collect::<Vec<_>>()
                .join("\n")
                .as_bytes(),
        )
    }
}

/// Defaults, then overrides. Pure: equal inputs give byte-equal configs.
pub fn build_train_config(
    bundle: &DatasetBundle,
    base_model_id: &str,
    output_path: &Path,
    overrides: &TrainOverrides,
) -> Result<TrainConfig, FinetuneError> {
    let violations = overrides.violations();
    if !violations.is_empty() {
        return Err(FinetuneError::Validation(violations));
    }
    let cfg = TrainConfig {
        dataset_path: bundle.root.clone(),
        resolution: overrides.resolution.unwrap_or(TrainConfig::DEFAULT_RESOLUTION),
        epochs: overrides.epochs.unwrap_or(TrainConfig::DEFAULT_EPOCHS),
        batch_size: overrides.batch_size.unwrap_or(TrainConfig::DEFAULT_BATCH_SIZE),
        learning_rate: overrides.learning_rate.unwrap_or(TrainConfig::DEFAULT_LEARNING_RATE),
        horizontal_flip: overrides.horizontal_flip.unwrap_or(true),
        precision: overrides.precision.unwrap_or_default(),
        lora_rank: overrides.lora_rank.unwrap_or(TrainConfig::DEFAULT_LORA_RANK),
        base_model_id: base_model_id.to_string(),
        output_path: output_path.to_path_buf(),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterWeightsRef {
    pub weights_path: PathBuf,
    pub base_model_id: String,
    /// Digest of the flat config the weights were trained from.
    pub config_digest: String,
    pub weights_digest: String,
}

impl AdapterWeightsRef {
    pub fn verify(&self, config: &TrainConfig) -> Result<(), FinetuneError> {
        if self.config_digest != config.digest() {
            return Err(FinetuneError::Integrity(format!(
                "weights {} were trained from config {}, not {}",
                self.weights_path.display(),
                self.config_digest,
                config.digest()
            )));
        }
        let actual = sha256_file(&self.weights_path).map_err(io_err(&self.weights_path))?;
        if actual != self.weights_digest {
            return Err(FinetuneError::Integrity(format!(
                "{} changed since training",
                self.weights_path.display()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainerSpec {
    /// `"mock"` or a command template, split shell-style.
    pub command: String,
    pub weights_file: String,
    /// Receives the trainer's stdout and stderr.
    pub log_path: PathBuf,
}

fn substitute(arg: &str, config: &TrainConfig, config_path: &Path) -> String {
    arg.replace("{dataset_path}", &config.dataset_path.display().to_string())
        .replace("{config_path}", &config_path.display().to_string())
        .replace("{output_path}", &config.output_path.display().to_string())
}

fn excerpt(log: &str, lines: usize) -> String {
    let all: Vec<&str> = log.lines().collect();
    all[all.len().saturating_sub(lines)..].join("\n")
}

/// Stands in for a real trainer: records what it was asked to do. Output
/// depends only on the hyperparameters and dataset contents.
fn mock_train(config: &TrainConfig, weights: &Path) -> Result<String, FinetuneError> {
    let bundle = DatasetBundle::open(&config.dataset_path)
        .map_err(|e| FinetuneError::TrainingFailed {
            status: "mock trainer".into(),
            excerpt: e.to_string(),
        })?;
    let body = serde_json::json!({
        "trainer": MOCK_TRAINER,
        "hyperparameters": config.hyperparameter_digest(),
        "base_model_id": config.base_model_id,
        "pairs": bundle.pair_count,
        "dataset_digest": bundle.digest().map_err(|e| FinetuneError::TrainingFailed {
            status: "mock trainer".into(),
            excerpt: e.to_string(),
        })?,
    });
    std::fs::write(weights, serde_json::to_vec_pretty(&body).expect("json")).map_err(io_err(weights))?;
    Ok(format!(
        "mock trainer: {} pairs, {} epochs, wrote {}\n",
        bundle.pair_count,
        config.epochs,
        weights.display()
    ))
}

/// Write `config` to `config_path`, run the trainer to completion and return
/// the produced weights. Fails if the config file changed while the trainer
/// ran.
pub fn launch_training(
    config: &TrainConfig,
    config_path: &Path,
    trainer: &TrainerSpec,
) -> Result<AdapterWeightsRef, FinetuneError> {
    config.validate()?;
    let flat = config.to_flat();
    let expected = sha256_hex(flat.as_bytes());
    if let Some(parent) = config_path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(config_path, &flat).map_err(io_err(config_path))?;
    std::fs::create_dir_all(&config.output_path).map_err(io_err(&config.output_path))?;
    let weights_path = config.output_path.join(&trainer.weights_file);

    let log = if trainer.command.trim() == MOCK_TRAINER {
        mock_train(config, &weights_path)?
    } else {
        let argv = shlex::split(&trainer.command)
            .filter(|a| !a.is_empty())
            .ok_or_else(|| FinetuneError::TrainerMissing(format!("cannot parse {:?}", trainer.command)))?;
        let argv: Vec<String> = argv.iter().map(|a| substitute(a, config, config_path)).collect();
        log::info!("launching trainer: {}", argv.join(" "));
        let out = Command::new(&argv[0]).args(&argv[1..]).output().map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                FinetuneError::TrainerMissing(argv[0].clone())
            } else {
                FinetuneError::Io {
                    path: argv[0].clone(),
                    message: e.to_string(),
                }
            }
        })?;
        let log = format!(
            "{}{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        std::fs::write(&trainer.log_path, &log).map_err(io_err(&trainer.log_path))?;
        if !out.status.success() {
            return Err(FinetuneError::TrainingFailed {
                status: out.status.to_string(),
                excerpt: excerpt(&log, 20),
            });
        }
        log
    };
    if trainer.command.trim() == MOCK_TRAINER {
        std::fs::write(&trainer.log_path, &log).map_err(io_err(&trainer.log_path))?;
    }

    let on_disk = sha256_file(config_path).map_err(io_err(config_path))?;
    if on_disk != expected {
        return Err(FinetuneError::Integrity(format!(
            "{} was modified during training",
            config_path.display()
        )));
    }
    if !weights_path.is_file() {
        return Err(FinetuneError::TrainingFailed {
            status: "exit 0".into(),
            excerpt: format!("trainer produced no {}\n{}", weights_path.display(), excerpt(&log, 20)),
        });
    }
    Ok(AdapterWeightsRef {
        weights_digest: sha256_file(&weights_path).map_err(io_err(&weights_path))?,
        weights_path,
        base_model_id: config.base_model_id.clone(),
        config_digest: expected,
    })
}

/// Base backend with the adapter applied at a fixed scale.
pub struct ScaledTextToImage {
    base: Arc<dyn TextToImageBackend>,
    adapter: Option<AdapterSpec>,
    model_id: String,
}

impl ScaledTextToImage {
    pub fn scale(&self) -> f64 {
        self.adapter.as_ref().map_or(0.0, |a| a.scale)
    }
}

impl TextToImageBackend for ScaledTextToImage {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn prepare(&self, req: ImageRequest) -> ImageRequest {
        let req = ImageRequest {
            adapter: self.adapter.clone(),
            ..req
        };
        self.base.prepare(req)
    }

    fn generate(&self, req: &ImageRequest) -> BackendResult<RgbImage> {
        self.base.generate(req)
    }
}

/// At scale 0 no adapter is attached, so requests and outputs are exactly
/// the base backend's.
pub fn scaled_backend(
    base: Arc<dyn TextToImageBackend>,
    weights: &AdapterWeightsRef,
    scale: f64,
) -> Result<ScaledTextToImage, FinetuneError> {
    if !(0.0..=1.0).contains(&scale) {
        return Err(FinetuneError::Argument(format!("scale {scale} outside [0, 1]")));
    }
    let (adapter, model_id) = if scale > 0.0 {
        (
            Some(AdapterSpec {
                weights_path: weights.weights_path.display().to_string(),
                adapter_digest: weights.weights_digest.clone(),
                scale,
            }),
            format!(
                "{}+lora-{}@{scale}",
                base.model_id(),
                &weights.weights_digest[..12.min(weights.weights_digest.len())]
            ),
        )
    } else {
        (None, base.model_id().to_string())
    };
    Ok(ScaledTextToImage {
        base,
        adapter,
        model_id,
    })
}
