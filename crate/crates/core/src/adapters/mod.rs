//! Contracts for the five external model capabilities.
//!
//! Pipeline code never talks to a backend directly; it goes through
//! [`Backends`], which adds bounded exponential-backoff retries, boundary
//! validation, and an append-only [`CallLog`] of every attempt.

mod http;
pub mod mock;
mod store;
mod transcript;
mod types;

pub use http::HttpBackend;
pub use store::{content_id, encode_png, write_if_changed, ImageStore};
pub use transcript::{
    error_response, read_transcript, CallLog, ReplayBackend, Transcript, TranscriptRecord,
};
pub use types::*;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> BackendResult<String>;
}

pub trait TextToImageBackend: Send + Sync {
    fn model_id(&self) -> &str;

    /// Hook for wrappers that rewrite requests (e.g. attaching LoRA weights)
    /// before they are digested and sent.
    fn prepare(&self, req: ImageRequest) -> ImageRequest {
        req
    }

    fn generate(&self, req: &ImageRequest) -> BackendResult<RgbImage>;
}

pub trait VqaBackend: Send + Sync {
    fn answer(&self, req: &VqaRequest) -> BackendResult<String>;
}

pub trait DetectorBackend: Send + Sync {
    fn detect(&self, req: &DetectRequest) -> BackendResult<Vec<Detection>>;
}

pub trait ScorerBackend: Send + Sync {
    fn score(&self, req: &ScoreRequest) -> BackendResult<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub retry_limit: u32,
    pub base_delay: Duration,
}

impl RetryPolicy {
    pub const fn immediate(retry_limit: u32) -> Self {
        Self {
            retry_limit,
            base_delay: Duration::ZERO,
        }
    }

    pub fn from_descriptor(d: &BackendDescriptor) -> Self {
        Self {
            retry_limit: d.retry_limit,
            base_delay: Duration::from_millis(d.retry_base_delay_ms),
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        self.base_delay
            .saturating_mul(1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX))
    }
}

/// The five descriptors a run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSet {
    pub chat: BackendDescriptor,
    pub text2image: BackendDescriptor,
    pub vqa: BackendDescriptor,
    pub detector: BackendDescriptor,
    pub scorer: BackendDescriptor,
}

impl Default for BackendSet {
    fn default() -> Self {
        Self {
            chat: BackendDescriptor::mock(BackendKind::Chat, "mock-chat"),
            text2image: BackendDescriptor::mock(BackendKind::Text2image, "mock-t2i"),
            vqa: BackendDescriptor::mock(BackendKind::Vqa, "mock-vqa"),
            detector: BackendDescriptor::mock(BackendKind::Detector, "mock-detector"),
            scorer: BackendDescriptor::mock(BackendKind::Scorer, "mock-scorer"),
        }
    }
}

impl BackendSet {
    pub fn get(&self, kind: BackendKind) -> &BackendDescriptor {
        match kind {
            BackendKind::Chat => &self.chat,
            BackendKind::Text2image => &self.text2image,
            BackendKind::Vqa => &self.vqa,
            BackendKind::Detector => &self.detector,
            BackendKind::Scorer => &self.scorer,
        }
    }

    pub fn get_mut(&mut self, kind: BackendKind) -> &mut BackendDescriptor {
        match kind {
            BackendKind::Chat => &mut self.chat,
            BackendKind::Text2image => &mut self.text2image,
            BackendKind::Vqa => &mut self.vqa,
            BackendKind::Detector => &mut self.detector,
            BackendKind::Scorer => &mut self.scorer,
        }
    }

    /// All violations across the five slots, including kind mismatches.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for kind in BackendKind::ALL {
            let d = self.get(kind);
            if d.kind != kind {
                problems.push(format!(
                    "backends.{kind} declares kind \"{}\"; it must be \"{kind}\"",
                    d.kind
                ));
            }
            problems.extend(d.validate());
        }
        problems
    }
}

/// How [`Backends::from_descriptors`] resolves each slot.
#[derive(Clone)]
pub enum BackendMode {
    Live,
    /// Serve every call from a recorded transcript; `source_root` is the
    /// image-store root the recorded text-to-image responses point into.
    Replay {
        transcript: Arc<Transcript>,
        source_root: PathBuf,
    },
}

/// The pipeline's single gateway to model backends.
pub struct Backends {
    pub chat: Arc<dyn ChatBackend>,
    pub text2image: Arc<dyn TextToImageBackend>,
    pub vqa: Arc<dyn VqaBackend>,
    pub detector: Arc<dyn DetectorBackend>,
    pub scorer: Arc<dyn ScorerBackend>,
    retry: [RetryPolicy; 5],
    log: Arc<CallLog>,
    store: ImageStore,
}

fn slot(kind: BackendKind) -> usize {
    kind as usize
}

impl Backends {
    /// Mock backends with immediate retries; handy for tests.
    pub fn mock(store: ImageStore, log: Arc<CallLog>, seed: u64, salt: &str) -> Self {
        Self {
            chat: Arc::new(mock::MockChat::new("mock-chat", seed)),
            text2image: Arc::new(mock::MockTextToImage::new("mock-t2i", seed, salt)),
            vqa: Arc::new(mock::MockVqa::new(seed)),
            detector: Arc::new(mock::MockDetector::new(seed)),
            scorer: Arc::new(mock::MockScorer::new(seed)),
            retry: [RetryPolicy::immediate(2); 5],
            log,
            store,
        }
    }

    /// Build every slot from its descriptor. Mock slots load their script
    /// file (if any); `salt` feeds unseeded mock image generation.
    pub fn from_descriptors(
        set: &BackendSet,
        store: ImageStore,
        log: Arc<CallLog>,
        salt: &str,
        mode: &BackendMode,
    ) -> Result<Self, String> {
        let problems = set.validate();
        if !problems.is_empty() {
            return Err(problems.join("; "));
        }
        let mut retry = [RetryPolicy::immediate(0); 5];
        for kind in BackendKind::ALL {
            retry[slot(kind)] = RetryPolicy::from_descriptor(set.get(kind));
        }
        match mode {
            BackendMode::Replay {
                transcript,
                source_root,
            } => {
                let replay = |d: &BackendDescriptor| {
                    Arc::new(ReplayBackend::new(
                        Arc::clone(transcript),
                        source_root.clone(),
                        d.model_id.clone(),
                    ))
                };
                for r in retry.iter_mut() {
                    r.base_delay = Duration::ZERO;
                }
                Ok(Self {
                    chat: replay(&set.chat),
                    text2image: replay(&set.text2image),
                    vqa: replay(&set.vqa),
                    detector: replay(&set.detector),
                    scorer: replay(&set.scorer),
                    retry,
                    log,
                    store,
                })
            }
            BackendMode::Live => {
                let script = |d: &BackendDescriptor| -> Result<mock::MockScript, String> {
                    match &d.script {
                        Some(p) => mock::MockScript::load(std::path::Path::new(p)),
                        None => Ok(mock::MockScript::default()),
                    }
                };
                let http = |d: &BackendDescriptor| Arc::new(HttpBackend::new(d.clone(), store.clone()));
                let chat: Arc<dyn ChatBackend> = if set.chat.is_mock() {
                    Arc::new(
                        mock::MockChat::new(&set.chat.model_id, set.chat.seed)
                            .with_script(script(&set.chat)?.chat),
                    )
                } else {
                    http(&set.chat)
                };
                let text2image: Arc<dyn TextToImageBackend> = if set.text2image.is_mock() {
                    Arc::new(mock::MockTextToImage::new(
                        &set.text2image.model_id,
                        set.text2image.seed,
                        salt,
                    ))
                } else {
                    http(&set.text2image)
                };
                let vqa: Arc<dyn VqaBackend> = if set.vqa.is_mock() {
                    Arc::new(mock::MockVqa::new(set.vqa.seed).with_script(script(&set.vqa)?.vqa))
                } else {
                    http(&set.vqa)
                };
                let detector: Arc<dyn DetectorBackend> = if set.detector.is_mock() {
                    Arc::new(
                        mock::MockDetector::new(set.detector.seed)
                            .with_script(script(&set.detector)?.detector),
                    )
                } else {
                    http(&set.detector)
                };
                let scorer: Arc<dyn ScorerBackend> = if set.scorer.is_mock() {
                    Arc::new(
                        mock::MockScorer::new(set.scorer.seed)
                            .with_script(script(&set.scorer)?.scorer),
                    )
                } else {
                    http(&set.scorer)
                };
                Ok(Self {
                    chat,
                    text2image,
                    vqa,
                    detector,
                    scorer,
                    retry,
                    log,
                    store,
                })
            }
        }
    }

    pub fn with_chat(mut self, b: Arc<dyn ChatBackend>) -> Self {
        self.chat = b;
        self
    }

    pub fn with_text2image(mut self, b: Arc<dyn TextToImageBackend>) -> Self {
        self.text2image = b;
        self
    }

    pub fn with_vqa(mut self, b: Arc<dyn VqaBackend>) -> Self {
        self.vqa = b;
        self
    }

    pub fn with_detector(mut self, b: Arc<dyn DetectorBackend>) -> Self {
        self.detector = b;
        self
    }

    pub fn with_scorer(mut self, b: Arc<dyn ScorerBackend>) -> Self {
        self.scorer = b;
        self
    }

    pub fn with_retry(mut self, kind: BackendKind, policy: RetryPolicy) -> Self {
        self.retry[slot(kind)] = policy;
        self
    }

    pub fn log(&self) -> &Arc<CallLog> {
        &self.log
    }

    pub fn store(&self) -> &ImageStore {
        &self.store
    }

    /// Run one logical call with retries, logging every attempt.
    fn call<T>(
        &self,
        kind: BackendKind,
        digest: &str,
        context: &str,
        attempt: impl Fn() -> BackendResult<T>,
        encode: impl Fn(&T) -> Value,
    ) -> BackendResult<T> {
        let policy = self.retry[slot(kind)];
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match attempt() {
                Ok(value) => {
                    self.log.append(kind, digest.to_string(), encode(&value));
                    return Ok(value);
                }
                Err(err) => {
                    self.log.append(kind, digest.to_string(), error_response(&err));
                    if !err.is_retriable() {
                        return Err(err);
                    }
                    if attempts > policy.retry_limit {
                        return Err(BackendError::Exhausted {
                            kind,
                            attempts,
                            context: context.to_string(),
                            last: Box::new(err),
                        });
                    }
                    log::warn!("{kind} attempt {attempts} failed [{context}]: {err}; retrying");
                    std::thread::sleep(policy.delay(attempts));
                }
            }
        }
    }

    pub fn chat_complete(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        params: SamplingParams,
    ) -> BackendResult<String> {
        params.validate().map_err(BackendError::Rejected)?;
        let req = ChatRequest {
            system: system_prompt.to_string(),
            user: user_prompt.to_string(),
            params,
        };
        let context = format!("prompt: {user_prompt}");
        self.call(
            BackendKind::Chat,
            &req.digest(),
            &context,
            || self.chat.complete(&req),
            |text| json!(text),
        )
    }

    /// Generate `n` images with the configured text-to-image backend and
    /// persist them as `<dest_dir>/<index>.png`.
    pub fn generate_images(
        &self,
        prompt: &str,
        n: u32,
        width: u32,
        height: u32,
        seed: Option<u64>,
        dest_dir: &str,
    ) -> BackendResult<Vec<ImageRef>> {
        self.generate_images_with(self.text2image.as_ref(), prompt, n, width, height, seed, dest_dir)
    }

    /// As [`generate_images`](Self::generate_images) but through an explicit
    /// backend, e.g. a LoRA-scaled wrapper.
    #[allow(clippy::too_many_arguments)]
    pub fn generate_images_with(
        &self,
        backend: &dyn TextToImageBackend,
        prompt: &str,
        n: u32,
        width: u32,
        height: u32,
        seed: Option<u64>,
        dest_dir: &str,
    ) -> BackendResult<Vec<ImageRef>> {
        if n == 0 {
            return Err(BackendError::Rejected("n must be >= 1".into()));
        }
        if width == 0 || height == 0 {
            return Err(BackendError::Rejected("resolution must be positive".into()));
        }
        let mut completed = Vec::with_capacity(n as usize);
        for index in 0..n {
            let req = backend.prepare(ImageRequest {
                prompt: prompt.to_string(),
                width,
                height,
                seed,
                index,
                adapter: None,
            });
            let rel = format!("{}/{index}.png", dest_dir.trim_end_matches('/'));
            let context = format!("prompt: {prompt}; image {index}");
            let result = self.call(
                BackendKind::Text2image,
                &req.digest(),
                &context,
                || {
                    let img = backend.generate(&req)?;
                    if img.dimensions() != (width, height) {
                        return Err(BackendError::Validation(format!(
                            "requested {width}x{height}, got {}x{}",
                            img.width(),
                            img.height()
                        )));
                    }
                    self.store.put(&rel, &img)
                },
                |r| serde_json::to_value(r).expect("ImageRef serializes"),
            );
            match result {
                Ok(r) => completed.push(r),
                Err(source) => {
                    return Err(BackendError::Partial {
                        completed,
                        requested: n,
                        source: Box::new(source),
                    })
                }
            }
        }
        Ok(completed)
    }

    pub fn vqa_answer(
        &self,
        image: &ImageRef,
        question_prompt: &str,
        hint: Option<QuestionHint>,
    ) -> BackendResult<String> {
        let req = VqaRequest {
            image: image.clone(),
            question: question_prompt.to_string(),
            hint,
        };
        let context = format!("image {}; question: {question_prompt}", image.content_id);
        self.call(
            BackendKind::Vqa,
            &req.digest(),
            &context,
            || self.vqa.answer(&req),
            |text| json!(text),
        )
    }

    /// Detections restricted to `class_names`. Out-of-range confidences or
    /// boxes are rejected here and never reach the caller.
    pub fn detect(&self, image: &ImageRef, class_names: &[String]) -> BackendResult<Vec<Detection>> {
        if class_names.is_empty() {
            return Err(BackendError::Rejected("class_names must not be empty".into()));
        }
        let req = DetectRequest {
            image: image.clone(),
            class_names: class_names.to_vec(),
        };
        let context = format!("image {}; classes {:?}", image.content_id, class_names);
        self.call(
            BackendKind::Detector,
            &req.digest(),
            &context,
            || {
                let raw = self.detector.detect(&req)?;
                let mut kept = Vec::with_capacity(raw.len());
                for d in raw {
                    d.validate(image.width, image.height)
                        .map_err(BackendError::Validation)?;
                    if class_names.iter().any(|c| c.eq_ignore_ascii_case(&d.class_label)) {
                        kept.push(d);
                    } else {
                        log::debug!("dropping out-of-vocabulary detection {:?}", d.class_label);
                    }
                }
                Ok(kept)
            },
            |d| serde_json::to_value(d).expect("detections serialize"),
        )
    }

    pub fn image_text_score(&self, image: &ImageRef, text: &str) -> BackendResult<f64> {
        let req = ScoreRequest {
            image: image.clone(),
            text: text.to_string(),
        };
        let context = format!("image {}; text: {text}", image.content_id);
        self.call(
            BackendKind::Scorer,
            &req.digest(),
            &context,
            || {
                let s = self.scorer.score(&req)?;
                if s.is_finite() {
                    Ok(s)
                } else {
                    Err(BackendError::Validation(format!("non-finite score {s}")))
                }
            },
            |s| json!(s),
        )
    }
}
