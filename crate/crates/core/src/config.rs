//! Run configuration.
//!
//! A run is driven by one TOML file. Top-level keys are flat; classes,
//! backends, training overrides and evaluation settings get their own
//! tables:
//!
//! ```toml
//! output_root = "out"          # relative paths resolve against this file
//! n_candidates = 10
//! confidence_threshold = 0.6
//!
//! [[classes]]
//! class_name = "Elephant"
//! prompt_count = 100
//!
//! [backends.vqa]
//! endpoint = "http://localhost:8000"
//! model_id = "llava-1.6"
//!
//! [train]
//! epochs = 100
//!
//! [eval]
//! validation_prompts = 50
//! ```
//!
//! Every omitted key takes its default. Only backend endpoints may be
//! overridden from the environment, via `CCSR_<KIND>_ENDPOINT`.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::adapters::{BackendDescriptor, BackendKind, BackendSet, SamplingParams};
use crate::detectfilter::{FilterPolicy, TieBreak, DEFAULT_CONFIDENCE_THRESHOLD};
use crate::digest::sha256_json;
use crate::eval::{DEFAULT_TIE_EPSILON, DEFAULT_VALIDATION_PROMPTS, SWEEP_SCALES};
use crate::finetune::{TrainOverrides, DEFAULT_WEIGHTS_FILE, MOCK_TRAINER};
use crate::generation::Resolution;
use crate::judge::{NegativeAnswerCredit, DEFAULT_BATTERY_ID, DEFAULT_JUDGE_TEMPLATE};
use crate::promptgen::{ClassSeed, DEFAULT_MAX_PROMPT_TOKENS, DEFAULT_TEMPLATE_ID};

pub const DEFAULT_N_CANDIDATES: u32 = 10;
pub const DEFAULT_RESOLUTION: u32 = 512;
pub const DEFAULT_GRID_ROWS: u32 = 2;
pub const DEFAULT_SEED_COUNT: u32 = 4;
pub const DEFAULT_SWEEP_PROMPTS: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{} configuration problem(s):\n  {}", .0.len(), .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBackend {
    endpoint: Option<String>,
    model_id: Option<String>,
    timeout_secs: Option<f64>,
    retry_limit: Option<u32>,
    retry_base_delay_ms: Option<u64>,
    seed: Option<u64>,
    script: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBackends {
    chat: Option<RawBackend>,
    text2image: Option<RawBackend>,
    vqa: Option<RawBackend>,
    detector: Option<RawBackend>,
    scorer: Option<RawBackend>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    validation_prompts: Option<usize>,
    seeds: Option<u32>,
    tie_epsilon: Option<f64>,
    sweep_scales: Option<Vec<f64>>,
    sweep_prompts: Option<usize>,
    resolution: Option<u32>,
    compare_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    run_id: Option<String>,
    output_root: Option<PathBuf>,
    #[serde(default)]
    classes: Vec<ClassSeed>,
    template_id: Option<String>,
    template_dir: Option<PathBuf>,
    max_prompt_tokens: Option<usize>,
    max_prompts_per_request: Option<usize>,
    temperature: Option<f64>,
    top_p: Option<f64>,
    max_tokens: Option<u32>,
    n_candidates: Option<u32>,
    width: Option<u32>,
    height: Option<u32>,
    grid_rows: Option<u32>,
    generation_cache: Option<bool>,
    battery_id: Option<String>,
    battery_dir: Option<PathBuf>,
    judge_template: Option<String>,
    negative_answer_credit: Option<NegativeAnswerCredit>,
    confidence_threshold: Option<f64>,
    tie_break: Option<TieBreak>,
    trainer_command: Option<String>,
    weights_file: Option<String>,
    stage_parallelism: Option<usize>,
    #[serde(default)]
    backends: RawBackends,
    #[serde(default)]
    train: TrainOverrides,
    #[serde(default)]
    eval: RawEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub validation_prompts: usize,
    /// Seeds used are `0..seeds`.
    pub seeds: u32,
    pub tie_epsilon: f64,
    pub sweep_scales: Vec<f64>,
    pub sweep_prompts: usize,
    /// Side of the square evaluation images.
    pub resolution: u32,
    /// Adapter scale of the fine-tuned side of the win-rate comparison.
    pub compare_scale: f64,
}

impl EvalSettings {
    pub fn seed_values(&self) -> Vec<u64> {
        (0..u64::from(self.seeds)).collect()
    }
}

/// A fully resolved configuration: every default applied, every path
/// absolute or relative to the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: Option<String>,
    pub output_root: PathBuf,
    pub classes: Vec<ClassSeed>,
    pub template_id: String,
    pub template_dir: Option<PathBuf>,
    pub max_prompt_tokens: usize,
    pub max_prompts_per_request: usize,
    pub sampling: SamplingParams,
    pub n_candidates: u32,
    pub resolution: Resolution,
    pub grid_rows: u32,
    pub generation_cache: bool,
    pub battery_id: String,
    pub battery_dir: Option<PathBuf>,
    pub judge_template: String,
    pub negative_answer_credit: NegativeAnswerCredit,
    pub filter: FilterPolicy,
    pub backends: BackendSet,
    pub train: TrainOverrides,
    pub trainer_command: String,
    pub weights_file: String,
    pub eval: EvalSettings,
    /// Worker threads for per-prompt work; `None` uses every core.
    pub stage_parallelism: Option<usize>,
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn descriptor(kind: BackendKind, raw: Option<RawBackend>, base: &Path) -> BackendDescriptor {
    let d = BackendDescriptor::mock(kind, format!("mock-{}", kind.as_str()));
    let Some(r) = raw else { return d };
    BackendDescriptor {
        kind,
        endpoint: r.endpoint.unwrap_or(d.endpoint),
        model_id: r.model_id.unwrap_or(d.model_id),
        timeout_secs: r.timeout_secs.unwrap_or(d.timeout_secs),
        retry_limit: r.retry_limit.unwrap_or(d.retry_limit),
        retry_base_delay_ms: r.retry_base_delay_ms.unwrap_or(d.retry_base_delay_ms),
        seed: r.seed.unwrap_or(d.seed),
        script: r
            .script
            .map(|s| resolve(base, PathBuf::from(s)).display().to_string()),
    }
}

impl RunConfig {
    /// Resolve a TOML document. `base` anchors relative paths.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(vec![e.to_string()]))?;
        let side = DEFAULT_RESOLUTION;
        let defaults = SamplingParams::default();
        let b = raw.backends;
        let cfg = RunConfig {
            run_id: raw.run_id,
            output_root: resolve(base, raw.output_root.unwrap_or_else(|| PathBuf::from("ccsr-out"))),
            classes: raw.classes,
            template_id: raw.template_id.unwrap_or_else(|| DEFAULT_TEMPLATE_ID.to_string()),
            template_dir: raw.template_dir.map(|p| resolve(base, p)),
            max_prompt_tokens: raw.max_prompt_tokens.unwrap_or(DEFAULT_MAX_PROMPT_TOKENS),
            max_prompts_per_request: raw.max_prompts_per_request.unwrap_or(25),
            sampling: SamplingParams {
                temperature: raw.temperature.unwrap_or(defaults.temperature),
                top_p: raw.top_p.unwrap_or(defaults.top_p),
                max_tokens: raw.max_tokens.unwrap_or(defaults.max_tokens),
            },
            n_candidates: raw.n_candidates.unwrap_or(DEFAULT_N_CANDIDATES),
            resolution: Resolution {
                width: raw.width.unwrap_or(side),
                height: raw.height.unwrap_or(side),
            },
            grid_rows: raw.grid_rows.unwrap_or(DEFAULT_GRID_ROWS),
            generation_cache: raw.generation_cache.unwrap_or(true),
            battery_id: raw.battery_id.unwrap_or_else(|| DEFAULT_BATTERY_ID.to_string()),
            battery_dir: raw.battery_dir.map(|p| resolve(base, p)),
            judge_template: raw
                .judge_template
                .unwrap_or_else(|| DEFAULT_JUDGE_TEMPLATE.to_string()),
            negative_answer_credit: raw.negative_answer_credit.unwrap_or_default(),
            filter: FilterPolicy {
                confidence_threshold: raw.confidence_threshold.unwrap_or(DEFAULT_CONFIDENCE_THRESHOLD),
                tie_break: raw.tie_break.unwrap_or_default(),
            },
            backends: BackendSet {
                chat: descriptor(BackendKind::Chat, b.chat, base),
                text2image: descriptor(BackendKind::Text2image, b.text2image, base),
                vqa: descriptor(BackendKind::Vqa, b.vqa, base),
                detector: descriptor(BackendKind::Detector, b.detector, base),
                scorer: descriptor(BackendKind::Scorer, b.scorer, base),
            },
            train: raw.train,
            trainer_command: raw.trainer_command.unwrap_or_else(|| MOCK_TRAINER.to_string()),
            weights_file: raw.weights_file.unwrap_or_else(|| DEFAULT_WEIGHTS_FILE.to_string()),
            eval: EvalSettings {
                validation_prompts: raw.eval.validation_prompts.unwrap_or(DEFAULT_VALIDATION_PROMPTS),
                seeds: raw.eval.seeds.unwrap_or(DEFAULT_SEED_COUNT),
                tie_epsilon: raw.eval.tie_epsilon.unwrap_or(DEFAULT_TIE_EPSILON),
                sweep_scales: raw.eval.sweep_scales.unwrap_or_else(|| SWEEP_SCALES.to_vec()),
                sweep_prompts: raw.eval.sweep_prompts.unwrap_or(DEFAULT_SWEEP_PROMPTS),
                resolution: raw.eval.resolution.unwrap_or(raw.width.unwrap_or(side)),
                compare_scale: raw.eval.compare_scale.unwrap_or(1.0),
            },
            stage_parallelism: raw.stage_parallelism,
        };
        Ok(cfg)
    }

    /// Read, resolve, apply endpoint overrides and validate.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut cfg = Self::from_toml(&text, &base)?;
        cfg.apply_env_overrides(|k| std::env::var(k).ok());
        let problems = cfg.violations();
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    /// `CCSR_<KIND>_ENDPOINT` replaces that backend's endpoint.
    pub fn apply_env_overrides(&mut self, env: impl Fn(&str) -> Option<String>) {
        for kind in BackendKind::ALL {
            let key = format!("CCSR_{}_ENDPOINT", kind.as_str().to_uppercase());
            if let Some(v) = env(&key) {
                log::info!("{key} overrides backends.{kind}.endpoint");
                self.backends.get_mut(kind).endpoint = v;
            }
        }
    }

    /// Every violated constraint, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.classes.is_empty() {
            v.push("classes: at least one class is required".into());
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.classes {
            if let Err(e) = c.validate() {
                v.push(format!("classes: {e}"));
            }
            if !seen.insert(c.class_name.to_lowercase()) {
                v.push(format!("classes: duplicate class {:?}", c.class_name));
            }
        }
        if let Err(e) = self.sampling.validate() {
            v.push(format!("sampling: {e}"));
        }
        if self.max_prompt_tokens == 0 {
            v.push("max_prompt_tokens must be >= 1".into());
        }
        if self.max_prompts_per_request == 0 {
            v.push("max_prompts_per_request must be >= 1".into());
        }
        if self.n_candidates == 0 {
            v.push("n_candidates must be >= 1".into());
        }
        if self.resolution.width == 0 || self.resolution.height == 0 {
            v.push("width and height must be > 0".into());
        }
        if let Err(e) = self.filter.validate() {
            v.push(e);
        }
        v.extend(self.backends.validate());
        v.extend(self.train.violations());
        if self.trainer_command.trim().is_empty() {
            v.push("trainer_command must not be empty".into());
        } else if shlex::split(&self.trainer_command).is_none() {
            v.push(format!("trainer_command cannot be parsed: {:?}", self.trainer_command));
        }
        if self.weights_file.trim().is_empty() || self.weights_file.contains('/') {
            v.push("weights_file must be a plain file name".into());
        }
        let e = &self.eval;
        if e.validation_prompts == 0 {
            v.push("eval.validation_prompts must be >= 1".into());
        }
        if e.seeds == 0 {
            v.push("eval.seeds must be >= 1".into());
        }
        if !(e.tie_epsilon >= 0.0 && e.tie_epsilon.is_finite()) {
            v.push(format!("eval.tie_epsilon must be >= 0, got {}", e.tie_epsilon));
        }
        if e.sweep_scales.iter().any(|s| !(0.0..=1.0).contains(s)) {
            v.push("eval.sweep_scales must lie in [0, 1]".into());
        }
        if e.sweep_scales.windows(2).any(|w| w[0] >= w[1]) {
            v.push("eval.sweep_scales must be strictly ascending".into());
        }
        if !(0.0..=1.0).contains(&e.compare_scale) {
            v.push(format!("eval.compare_scale must lie in [0, 1], got {}", e.compare_scale));
        }
        if e.resolution == 0 {
            v.push("eval.resolution must be > 0".into());
        }
        if self.stage_parallelism == Some(0) {
            v.push("stage_parallelism must be >= 1".into());
        }
        if let Some(id) = &self.run_id {
            if let Err(m) = check_run_id(id) {
                v.push(m);
            }
        }
        v
    }

    pub fn digest(&self) -> String {
        sha256_json(self)
    }
}

/// Run ids become directory names.
pub fn check_run_id(id: &str) -> Result<(), String> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(format!("run id {id:?} must be non-empty [A-Za-z0-9._-] not starting with '.'"))
    }
}

/// Load and validate; on failure the error lists every violation.
pub fn validate_config(path: &Path) -> Result<RunConfig, ConfigError> {
    RunConfig::load(path)
}
