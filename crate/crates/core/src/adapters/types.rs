use serde::{Deserialize, Serialize};
use std::fmt;

use crate::digest::sha256_json;

/// Decoding controls passed to the chat backend.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.95,
            max_tokens: 1024,
        }
    }
}

impl SamplingParams {
    pub fn new(temperature: f64, top_p: f64, max_tokens: u32) -> Result<Self, String> {
        let params = Self {
            temperature,
            top_p,
            max_tokens,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            problems.push(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            problems.push(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.max_tokens == 0 {
            problems.push("max_tokens must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }
}

/// A persisted image, addressed by the hash of its pixel data.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub content_id: String,
    pub width: u32,
    pub height: u32,
    /// Path relative to the [`ImageStore`](super::ImageStore) root.
    pub storage_path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_label: String,
    pub confidence: f64,
    pub bbox: BBox,
}

const BBOX_SLACK: f64 = 1e-6;

impl Detection {
    /// Checks the confidence range and that the box lies inside the image.
    pub fn validate(&self, width: u32, height: u32) -> Result<(), String> {
        if !(self.confidence.is_finite() && (0.0..=1.0).contains(&self.confidence)) {
            return Err(format!(
                "confidence {} for '{}' outside [0, 1]",
                self.confidence, self.class_label
            ));
        }
        let b = &self.bbox;
        let finite = [b.x, b.y, b.w, b.h].iter().all(|v| v.is_finite());
        if !finite
            || b.x < -BBOX_SLACK
            || b.y < -BBOX_SLACK
            || b.w < 0.0
            || b.h < 0.0
            || b.x + b.w > width as f64 + BBOX_SLACK
            || b.y + b.h > height as f64 + BBOX_SLACK
        {
            return Err(format!(
                "bbox ({}, {}, {}, {}) for '{}' outside {}x{} image",
                b.x, b.y, b.w, b.h, self.class_label, width, height
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Chat,
    Text2image,
    Vqa,
    Detector,
    Scorer,
}

impl BackendKind {
    pub const ALL: [BackendKind; 5] = [
        BackendKind::Chat,
        BackendKind::Text2image,
        BackendKind::Vqa,
        BackendKind::Detector,
        BackendKind::Scorer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Chat => "chat",
            BackendKind::Text2image => "text2image",
            BackendKind::Vqa => "vqa",
            BackendKind::Detector => "detector",
            BackendKind::Scorer => "scorer",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_timeout() -> f64 {
    120.0
}

fn default_retry_limit() -> u32 {
    3
}

fn default_retry_delay_ms() -> u64 {
    250
}

/// Where and how to reach one model capability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    /// `"mock"` or an `http(s)://` URL.
    pub endpoint: String,
    pub model_id: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    /// First backoff delay; doubles on every retry.
    #[serde(default = "default_retry_delay_ms")]
    pub retry_base_delay_ms: u64,
    /// Mock backends only: seed mixed into every generated output.
    #[serde(default)]
    pub seed: u64,
    /// Mock backends only: JSON script with canned responses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<String>,
}

impl BackendDescriptor {
    pub fn mock(kind: BackendKind, model_id: impl Into<String>) -> Self {
        Self {
            kind,
            endpoint: "mock".to_string(),
            model_id: model_id.into(),
            timeout_secs: default_timeout(),
            retry_limit: default_retry_limit(),
            retry_base_delay_ms: default_retry_delay_ms(),
            seed: 0,
            script: None,
        }
    }

    pub fn is_mock(&self) -> bool {
        self.endpoint == "mock"
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let name = self.kind.as_str();
        if !(self.is_mock()
            || self.endpoint.starts_with("http://")
            || self.endpoint.starts_with("https://"))
        {
            problems.push(format!(
                "backends.{name}.endpoint must be \"mock\" or an http(s) URL, got {:?}",
                self.endpoint
            ));
        }
        if self.model_id.trim().is_empty() {
            problems.push(format!("backends.{name}.model_id must not be empty"));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            problems.push(format!("backends.{name}.timeout_secs must be > 0"));
        }
        if self.script.is_some() && !self.is_mock() {
            problems.push(format!(
                "backends.{name}.script is only meaningful for mock endpoints"
            ));
        }
        problems
    }
}

/// Failure reported by a backend or by the adapter boundary.
#[derive(Debug, Clone, thiserror::Error)]
pub enum BackendError {
    /// Network or service hiccup; retried with backoff.
    #[error("transport failure: {0}")]
    Transport(String),
    /// The backend answered but the request was refused.
    #[error("request rejected: {0}")]
    Rejected(String),
    /// The response violated an adapter contract (e.g. confidence > 1).
    #[error("invalid backend response: {0}")]
    Validation(String),
    #[error("replay: {0}")]
    Replay(String),
    #[error("image store: {0}")]
    Store(String),
    #[error("{kind} call failed after {attempts} attempt(s) [{context}]: {last}")]
    Exhausted {
        kind: BackendKind,
        attempts: u32,
        context: String,
        last: Box<BackendError>,
    },
    #[error("generation stopped after {} of {requested} image(s): {source}", completed.len())]
    Partial {
        completed: Vec<ImageRef>,
        requested: u32,
        source: Box<BackendError>,
    },
}

impl BackendError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

pub type BackendResult<T> = Result<T, BackendError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub params: SamplingParams,
}

impl ChatRequest {
    pub fn digest(&self) -> String {
        sha256_json(self)
    }
}

/// LoRA weights to apply during generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub weights_path: String,
    /// Content digest of the weights file.
    pub adapter_digest: String,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRequest {
    pub prompt: String,
    pub width: u32,
    pub height: u32,
    pub seed: Option<u64>,
    /// Position within the candidate batch.
    pub index: u32,
    pub adapter: Option<AdapterSpec>,
}

impl ImageRequest {
    pub fn digest(&self) -> String {
        // weights_path is run-local; the weights digest identifies the adapter.
        let adapter = self
            .adapter
            .as_ref()
            .map(|a| (a.adapter_digest.as_str(), a.scale));
        sha256_json(&(
            &self.prompt,
            self.width,
            self.height,
            self.seed,
            self.index,
            adapter,
        ))
    }
}

/// Judge-side metadata about a question. Real VQA models ignore it; the mock
/// uses it to answer polarity-aware defaults.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionHint {
    pub question_id: String,
    pub positive: bool,
    pub depends_on: Option<DependencyHint>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyHint {
    pub question_id: String,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaRequest {
    pub image: ImageRef,
    pub question: String,
    pub hint: Option<QuestionHint>,
}

impl VqaRequest {
    pub fn digest(&self) -> String {
        sha256_json(&(
            &self.image.content_id,
            &self.question,
            self.hint.as_ref().map(|h| &h.question_id),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    pub image: ImageRef,
    pub class_names: Vec<String>,
}

impl DetectRequest {
    pub fn digest(&self) -> String {
        sha256_json(&(&self.image.content_id, &self.class_names))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub image: ImageRef,
    pub text: String,
}

impl ScoreRequest {
    pub fn digest(&self) -> String {
        sha256_json(&(&self.image.content_id, &self.text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(conf: f64, bbox: (f64, f64, f64, f64)) -> Detection {
        Detection {
            class_label: "Elephant".into(),
            confidence: conf,
            bbox: BBox {
                x: bbox.0,
                y: bbox.1,
                w: bbox.2,
                h: bbox.3,
            },
        }
    }

    #[test]
    fn detection_bounds() {
        assert!(det(0.72, (10.0, 10.0, 100.0, 100.0)).validate(512, 512).is_ok());
        assert!(det(1.0, (0.0, 0.0, 512.0, 512.0)).validate(512, 512).is_ok());
        assert!(det(1.2, (0.0, 0.0, 1.0, 1.0)).validate(512, 512).is_err());
        assert!(det(-0.1, (0.0, 0.0, 1.0, 1.0)).validate(512, 512).is_err());
        assert!(det(f64::NAN, (0.0, 0.0, 1.0, 1.0)).validate(512, 512).is_err());
        assert!(det(0.5, (500.0, 0.0, 20.0, 1.0)).validate(512, 512).is_err());
    }

    #[test]
    fn sampling_params_invariants() {
        assert!(SamplingParams::new(0.7, 0.95, 64).is_ok());
        assert!(SamplingParams::new(0.0, 1.0, 1).is_ok());
        assert!(SamplingParams::new(-0.1, 0.95, 64).is_err());
        assert!(SamplingParams::new(0.7, 0.0, 64).is_err());
        assert!(SamplingParams::new(0.7, 1.01, 64).is_err());
        assert!(SamplingParams::new(0.7, 0.5, 0).is_err());
    }

    #[test]
    fn vqa_digest_ignores_storage_location() {
        let image = ImageRef {
            content_id: "abc".into(),
            width: 8,
            height: 8,
            storage_path: "runs/a/images/p/0.png".into(),
        };
        let mut moved = image.clone();
        moved.storage_path = "runs/b/images/p/0.png".into();
        let a = VqaRequest {
            image,
            question: "q".into(),
            hint: None,
        };
        let b = VqaRequest {
            image: moved,
            question: "q".into(),
            hint: None,
        };
        assert_eq!(a.digest(), b.digest());
    }
}
