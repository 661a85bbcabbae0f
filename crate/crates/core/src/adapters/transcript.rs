//! Append-only call log and transcript replay.
//!
//! Every adapter attempt, successful or not, becomes one JSON line
//! `{call_index, backend_kind, request_digest, response}`. Replay indexes the
//! lines by `(backend_kind, request_digest)` and hands responses back in the
//! order they were recorded, so retry sequences reproduce too.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::store::ImageStore;
use super::types::*;
use super::{ChatBackend, DetectorBackend, ScorerBackend, TextToImageBackend, VqaBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub call_index: u64,
    pub backend_kind: BackendKind,
    pub request_digest: String,
    pub response: Value,
}

pub fn error_response(err: &BackendError) -> Value {
    json!({ "error": { "retriable": err.is_retriable(), "message": err.to_string() } })
}

struct Sink {
    file: Option<File>,
    records: Vec<TranscriptRecord>,
}

/// Concurrent append-only sink. Call indices are unique and increase in the
/// order records are written.
pub struct CallLog {
    next_index: AtomicU64,
    appended: AtomicU64,
    keep_in_memory: bool,
    sink: Mutex<Sink>,
}

impl CallLog {
    pub fn in_memory() -> Self {
        Self {
            next_index: AtomicU64::new(0),
            appended: AtomicU64::new(0),
            keep_in_memory: true,
            sink: Mutex::new(Sink {
                file: None,
                records: Vec::new(),
            }),
        }
    }

    /// Open (or create) a transcript file; indexing continues after any
    /// records already present.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let existing = if path.exists() {
            BufReader::new(File::open(path)?)
                .lines()
                .filter(|l| l.as_ref().map(|l| !l.trim().is_empty()).unwrap_or(true))
                .count() as u64
        } else {
            0
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            next_index: AtomicU64::new(existing),
            appended: AtomicU64::new(0),
            keep_in_memory: false,
            sink: Mutex::new(Sink {
                file: Some(file),
                records: Vec::new(),
            }),
        })
    }

    pub fn append(&self, kind: BackendKind, request_digest: String, response: Value) -> u64 {
        let mut sink = self.sink.lock().expect("call log poisoned");
        // Index assigned under the lock so file order matches index order.
        let call_index = self.next_index.fetch_add(1, Ordering::SeqCst);
        let record = TranscriptRecord {
            call_index,
            backend_kind: kind,
            request_digest,
            response,
        };
        if let Some(file) = sink.file.as_mut() {
            let mut line = serde_json::to_vec(&record).expect("record serializes");
            line.push(b'\n');
            if let Err(e) = file.write_all(&line).and_then(|_| file.flush()) {
                log::error!("failed to append transcript record {call_index}: {e}");
            }
        }
        if self.keep_in_memory {
            sink.records.push(record);
        }
        self.appended.fetch_add(1, Ordering::SeqCst);
        call_index
    }

    /// Calls appended through this handle.
    pub fn len(&self) -> u64 {
        self.appended.load(Ordering::SeqCst)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_kind(&self, kind: BackendKind) -> usize {
        let sink = self.sink.lock().expect("call log poisoned");
        sink.records.iter().filter(|r| r.backend_kind == kind).count()
    }

    /// In-memory records (empty for file-backed logs).
    pub fn records(&self) -> Vec<TranscriptRecord> {
        self.sink.lock().expect("call log poisoned").records.clone()
    }
}

pub fn read_transcript(path: &Path) -> std::io::Result<Vec<TranscriptRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TranscriptRecord = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), n + 1),
            )
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Recorded responses queued per `(kind, request digest)`.
pub struct Transcript {
    queues: Mutex<HashMap<(BackendKind, String), VecDeque<Value>>>,
}

impl Transcript {
    pub fn from_records(mut records: Vec<TranscriptRecord>) -> Self {
        records.sort_by_key(|r| r.call_index);
        let mut queues: HashMap<(BackendKind, String), VecDeque<Value>> = HashMap::new();
        for r in records {
            queues
                .entry((r.backend_kind, r.request_digest))
                .or_default()
                .push_back(r.response);
        }
        Self {
            queues: Mutex::new(queues),
        }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(Self::from_records(read_transcript(path)?))
    }

    fn next(&self, kind: BackendKind, digest: &str) -> BackendResult<Value> {
        let mut queues = self.queues.lock().expect("transcript poisoned");
        let value = queues
            .get_mut(&(kind, digest.to_string()))
            .and_then(|q| q.pop_front())
            .ok_or_else(|| {
                BackendError::Replay(format!("no recorded {kind} response for request {digest}"))
            })?;
        if let Some(err) = value.get("error") {
            let message = err
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or("recorded failure")
                .to_string();
            let retriable = err.get("retriable").and_then(Value::as_bool).unwrap_or(false);
            return Err(if retriable {
                BackendError::Transport(message)
            } else {
                BackendError::Replay(format!("recorded failure: {message}"))
            });
        }
        Ok(value)
    }

    pub fn remaining(&self) -> usize {
        self.queues
            .lock()
            .expect("transcript poisoned")
            .values()
            .map(VecDeque::len)
            .sum()
    }
}

fn malformed(kind: BackendKind, v: &Value) -> BackendError {
    BackendError::Replay(format!("malformed recorded {kind} response: {v}"))
}

/// Serves every capability from one transcript. Text-to-image responses are
/// resolved against the image store of the recorded run.
pub struct ReplayBackend {
    transcript: Arc<Transcript>,
    source_store: ImageStore,
    model_id: String,
}

impl ReplayBackend {
    pub fn new(transcript: Arc<Transcript>, source_root: PathBuf, model_id: String) -> Self {
        Self {
            transcript,
            source_store: ImageStore::new(source_root),
            model_id,
        }
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, req: &ChatRequest) -> BackendResult<String> {
        let v = self.transcript.next(BackendKind::Chat, &req.digest())?;
        v.as_str()
            .map(str::to_string)
            .ok_or_else(|| malformed(BackendKind::Chat, &v))
    }
}

impl TextToImageBackend for ReplayBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn generate(&self, req: &ImageRequest) -> BackendResult<RgbImage> {
        let v = self.transcript.next(BackendKind::Text2image, &req.digest())?;
        let recorded: ImageRef =
            serde_json::from_value(v.clone()).map_err(|_| malformed(BackendKind::Text2image, &v))?;
        let image = self.source_store.load(&recorded)?;
        if super::store::content_id(&image) != recorded.content_id {
            return Err(BackendError::Replay(format!(
                "recorded image {} no longer matches its content id",
                recorded.storage_path
            )));
        }
        Ok(image)
    }
}

impl VqaBackend for ReplayBackend {
    fn answer(&self, req: &VqaRequest) -> BackendResult<String> {
        let v = self.transcript.next(BackendKind::Vqa, &req.digest())?;
        v.as_str()
            .map(str::to_string)
            .ok_or_else(|| malformed(BackendKind::Vqa, &v))
    }
}

impl DetectorBackend for ReplayBackend {
    fn detect(&self, req: &DetectRequest) -> BackendResult<Vec<Detection>> {
        let v = self.transcript.next(BackendKind::Detector, &req.digest())?;
        serde_json::from_value(v.clone()).map_err(|_| malformed(BackendKind::Detector, &v))
    }
}

impl ScorerBackend for ReplayBackend {
    fn score(&self, req: &ScoreRequest) -> BackendResult<f64> {
        let v = self.transcript.next(BackendKind::Scorer, &req.digest())?;
        v.as_f64().ok_or_else(|| malformed(BackendKind::Scorer, &v))
    }
}
