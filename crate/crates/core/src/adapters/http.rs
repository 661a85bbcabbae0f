//! JSON-over-HTTP adapters.
//!
//! Chat and VQA speak the OpenAI-compatible `chat/completions` schema (images
//! travel as base64 PNG data URIs). The other three use small JSON bodies:
//!
//! | kind       | request body                                          | response            |
//! |------------|-------------------------------------------------------|---------------------|
//! | text2image | `{model, prompt, width, height, seed, index, adapter}` | `{image: <b64 png>}`|
//! | detector   | `{model, image: <b64 png>, classes}`                  | `{detections: [..]}`|
//! | scorer     | `{model, image: <b64 png>, text}`                     | `{score}`           |

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::RgbImage;
use serde::Deserialize;
use serde_json::{json, Value};
use std::time::Duration;

use super::store::ImageStore;
use super::types::*;
use super::{ChatBackend, DetectorBackend, ScorerBackend, TextToImageBackend, VqaBackend};

pub struct HttpBackend {
    descriptor: BackendDescriptor,
    agent: ureq::Agent,
    store: ImageStore,
}

impl HttpBackend {
    pub fn new(descriptor: BackendDescriptor, store: ImageStore) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(descriptor.timeout_secs)))
            .build()
            .into();
        Self {
            descriptor,
            agent,
            store,
        }
    }

    fn post(&self, body: &Value) -> BackendResult<Value> {
        let response = self
            .agent
            .post(&self.descriptor.endpoint)
            .send_json(body)
            .map_err(map_ureq)?;
        response
            .into_body()
            .read_json::<Value>()
            .map_err(|e| BackendError::Validation(format!("response body: {e}")))
    }

    fn image_b64(&self, image: &ImageRef) -> BackendResult<String> {
        Ok(B64.encode(self.store.read_bytes(image)?))
    }

    fn chat_body(&self, system: &str, user: Value, params: &SamplingParams) -> Value {
        json!({
            "model": self.descriptor.model_id,
            "messages": [
                { "role": "system", "content": system },
                { "role": "user", "content": user },
            ],
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
        })
    }
}

fn map_ureq(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
            BackendError::Transport(format!("HTTP {code}"))
        }
        ureq::Error::StatusCode(code) => BackendError::Rejected(format!("HTTP {code}")),
        ureq::Error::Io(_)
        | ureq::Error::Timeout(_)
        | ureq::Error::HostNotFound
        | ureq::Error::ConnectionFailed
        | ureq::Error::Protocol(_) => BackendError::Transport(err.to_string()),
        other => BackendError::Rejected(other.to_string()),
    }
}

fn completion_text(v: &Value) -> BackendResult<String> {
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::Validation("missing choices[0].message.content".into()))
}

impl ChatBackend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> BackendResult<String> {
        let body = self.chat_body(&req.system, Value::String(req.user.clone()), &req.params);
        completion_text(&self.post(&body)?)
    }
}

impl TextToImageBackend for HttpBackend {
    fn model_id(&self) -> &str {
        &self.descriptor.model_id
    }

    fn generate(&self, req: &ImageRequest) -> BackendResult<RgbImage> {
        let body = json!({
            "model": self.descriptor.model_id,
            "prompt": req.prompt,
            "width": req.width,
            "height": req.height,
            "seed": req.seed,
            "index": req.index,
            "adapter": req.adapter,
        });
        let v = self.post(&body)?;
        let encoded = v
            .get("image")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Validation("missing image field".into()))?;
        let bytes = B64
            .decode(encoded)
            .map_err(|e| BackendError::Validation(format!("image base64: {e}")))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| BackendError::Validation(format!("image decode: {e}")))?
            .into_rgb8();
        if img.dimensions() != (req.width, req.height) {
            return Err(BackendError::Validation(format!(
                "requested {}x{}, got {}x{}",
                req.width,
                req.height,
                img.width(),
                img.height()
            )));
        }
        Ok(img)
    }
}

impl VqaBackend for HttpBackend {
    fn answer(&self, req: &VqaRequest) -> BackendResult<String> {
        let data_uri = format!("data:image/png;base64,{}", self.image_b64(&req.image)?);
        let user = json!([
            { "type": "image_url", "image_url": { "url": data_uri } },
            { "type": "text", "text": req.question },
        ]);
        let params = SamplingParams {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 256,
        };
        let body = self.chat_body("You are a careful visual assistant.", user, &params);
        completion_text(&self.post(&body)?)
    }
}

impl DetectorBackend for HttpBackend {
    fn detect(&self, req: &DetectRequest) -> BackendResult<Vec<Detection>> {
        #[derive(Deserialize)]
        struct Reply {
            detections: Vec<Detection>,
        }
        let body = json!({
            "model": self.descriptor.model_id,
            "image": self.image_b64(&req.image)?,
            "classes": req.class_names,
        });
        let reply: Reply = serde_json::from_value(self.post(&body)?)
            .map_err(|e| BackendError::Validation(format!("detections: {e}")))?;
        Ok(reply.detections)
    }
}

impl ScorerBackend for HttpBackend {
    fn score(&self, req: &ScoreRequest) -> BackendResult<f64> {
        let body = json!({
            "model": self.descriptor.model_id,
            "image": self.image_b64(&req.image)?,
            "text": req.text,
        });
        self.post(&body)?
            .get("score")
            .and_then(Value::as_f64)
            .ok_or_else(|| BackendError::Validation("missing numeric score".into()))
    }
}
