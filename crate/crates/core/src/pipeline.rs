//! Stage orchestration over one run directory.
//!
//! Layout under `output_root`:
//!
//! ```text
//! runs/<run_id>/run.json              manifest
//! runs/<run_id>/config.json           resolved config snapshot
//! runs/<run_id>/transcript.jsonl      every backend call
//! runs/<run_id>/prompts.jsonl
//! runs/<run_id>/images/<prompt_id>/<i>.png
//! runs/<run_id>/grids/<prompt_id>.png
//! runs/<run_id>/candidates.jsonl
//! runs/<run_id>/scorecards.jsonl, judgments.jsonl
//! runs/<run_id>/pairs.jsonl, rejections.jsonl
//! runs/<run_id>/train/{config.txt, trainer.log, adapter.json, output/}
//! runs/<run_id>/eval/{validation_prompts.jsonl, samples.jsonl, winrate.json, curves.csv}
//! dataset/<run_id>/{images/, metadata.jsonl}
//! cache/generation/
//! ```
//!
//! Image refs store paths relative to `output_root`.

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::adapters::{
    BackendError, BackendMode, Backends, CallLog, ImageStore, TextToImageBackend, Transcript,
};
use crate::config::RunConfig;
use crate::dataset::{
    export_pairs, DatasetBundle, ExportError, RunManifest, Stage, StageDigests, StageStatus,
};
use crate::detectfilter::{extract_pairs, OptimalPair, PromptEvidence, Rejection};
use crate::digest::sha256_json;
use crate::eval::{compare, render_report, score_model, sweep_scales, ScoreJob, SweepJob};
use crate::finetune::{
    build_train_config, launch_training, scaled_backend, AdapterWeightsRef, FinetuneError,
    TrainerSpec,
};
use crate::generation::{
    attach_grid, generate_candidates, grid_shape, CandidateSet, GenerationCache, GenerationError,
    GenerationRequest, Resolution,
};
use crate::judge::{judge_candidate_set, BatteryRegistry, JudgeOptions, JudgedSet, JudgmentRecord};
use crate::promptgen::{
    generate_prompts, spread_counts, PromptGenError, PromptGenOptions, PromptPurpose, PromptRecord,
    TemplateRegistry,
};

pub const BASELINE: &str = "base";

/// Failure classes, each with its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dependency error: {0}")]
    Dependency(String),
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("stage failure: {0}")]
    Stage(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Dependency(_) => 3,
            PipelineError::Backend(_) => 4,
            PipelineError::Stage(_) => 5,
        }
    }
}

impl From<PromptGenError> for PipelineError {
    fn from(e: PromptGenError) -> Self {
        match e {
            PromptGenError::Backend { .. } => PipelineError::Backend(e.to_string()),
            _ => PipelineError::Config(e.to_string()),
        }
    }
}

impl From<GenerationError> for PipelineError {
    fn from(e: GenerationError) -> Self {
        match e {
            GenerationError::Backend(_) => PipelineError::Backend(e.to_string()),
            _ => PipelineError::Stage(e.to_string()),
        }
    }
}

impl From<FinetuneError> for PipelineError {
    fn from(e: FinetuneError) -> Self {
        match e {
            FinetuneError::Validation(_) | FinetuneError::TrainerMissing(_) => {
                PipelineError::Config(e.to_string())
            }
            _ => PipelineError::Stage(e.to_string()),
        }
    }
}

fn stage_io(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage(format!("{}: {e}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(|e| stage_io(path, e))?;
        buf.push(b'\n');
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| stage_io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| stage_io(path, e))?;
    f.write_all(&buf).map_err(|e| stage_io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let f = std::fs::File::open(path).map_err(|e| stage_io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| stage_io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| stage_io(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `stage_parallelism` from the config.
    pub parallelism: Option<usize>,
    /// Serve every backend call from this run's transcript.
    pub replay_from: Option<String>,
    /// Baseline for the eval stage: `base` or another run id.
    pub against: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub stage: Stage,
    /// Complete with unchanged inputs, so nothing ran.
    pub skipped: bool,
    pub summary: String,
}

struct StageOutput {
    digest: String,
    summary: String,
}

pub fn run_dir(output_root: &Path, run_id: &str) -> PathBuf {
    output_root.join("runs").join(run_id)
}

/// Resolved config stored with a run.
pub fn load_snapshot(output_root: &Path, run_id: &str) -> Result<RunConfig, PipelineError> {
    let path = run_dir(output_root, run_id).join("config.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

/// An opened run: config, backends and the run directory.
pub struct Run {
    pub config: RunConfig,
    pub run_id: String,
    pub run_dir: PathBuf,
    pub backends: Backends,
    pool: rayon::ThreadPool,
    replaying: bool,
    against: String,
}

impl Run {
    pub fn open(config: RunConfig, run_id: &str, opts: &RunOptions) -> Result<Self, PipelineError> {
        crate::config::check_run_id(run_id).map_err(PipelineError::Config)?;
        let problems = config.violations();
        if !problems.is_empty() {
            return Err(PipelineError::Config(problems.join("; ")));
        }
        let root = config.output_root.clone();
        let dir = run_dir(&root, run_id);
        std::fs::create_dir_all(&dir).map_err(|e| PipelineError::Config(format!("{}: {e}", dir.display())))?;
        let snapshot = serde_json::to_vec_pretty(&config).expect("config serializes");
        crate::adapters::write_if_changed(&dir.join("config.json"), &snapshot)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", dir.display())))?;

        let log = Arc::new(
            CallLog::open(&dir.join("transcript.jsonl"))
                .map_err(|e| PipelineError::Config(format!("transcript: {e}")))?,
        );
        let mode = match &opts.replay_from {
            None => BackendMode::Live,
            Some(src) => {
                if src == run_id {
                    return Err(PipelineError::Config("a run cannot replay itself".into()));
                }
                let path = run_dir(&root, src).join("transcript.jsonl");
                let transcript = Transcript::load(&path)
                    .map_err(|e| PipelineError::Config(format!("replay source {}: {e}", path.display())))?;
                BackendMode::Replay {
                    transcript: Arc::new(transcript),
                    source_root: root.clone(),
                }
            }
        };
        let backends = Backends::from_descriptors(
            &config.backends,
            ImageStore::new(&root),
            log,
            run_id,
            &mode,
        )
        .map_err(PipelineError::Config)?;
        let threads = opts.parallelism.or(config.stage_parallelism).unwrap_or(0);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
        Ok(Self {
            run_id: run_id.to_string(),
            run_dir: dir,
            backends,
            pool,
            replaying: opts.replay_from.is_some(),
            against: opts.against.clone().unwrap_or_else(|| BASELINE.to_string()),
            config,
        })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.run_dir.join("run.json")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.config.output_root.join("dataset").join(&self.run_id)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    /// Store-relative path inside this run.
    fn rel(&self, name: &str) -> String {
        format!("runs/{}/{name}", self.run_id)
    }

    pub fn manifest(&self) -> Result<RunManifest, PipelineError> {
        let path = self.manifest_path();
        if path.exists() {
            RunManifest::load(&path).map_err(|e| PipelineError::Stage(e.to_string()))
        } else {
            Ok(RunManifest::new(&self.run_id, &self.config.digest()))
        }
    }

    /// Config subset each stage depends on.
    fn stage_inputs(&self, stage: Stage) -> serde_json::Value {
        let c = &self.config;
        let b = &c.backends;
        match stage {
            Stage::Promptgen => json!({
                "classes": c.classes, "template_id": c.template_id, "template_dir": c.template_dir,
                "max_prompt_tokens": c.max_prompt_tokens, "per_request": c.max_prompts_per_request,
                "sampling": c.sampling, "chat": b.chat,
            }),
            Stage::Generation => json!({
                "n": c.n_candidates, "resolution": c.resolution, "grid_rows": c.grid_rows,
                "text2image": b.text2image,
            }),
            Stage::Judge => json!({
                "battery_id": c.battery_id, "battery_dir": c.battery_dir,
                "judge_template": c.judge_template, "credit": c.negative_answer_credit, "vqa": b.vqa,
            }),
            Stage::Filter => json!({ "filter": c.filter, "detector": b.detector }),
            Stage::Export => json!({}),
            Stage::Train => json!({
                "train": c.train, "trainer_command": c.trainer_command,
                "weights_file": c.weights_file, "base_model": b.text2image.model_id,
            }),
            Stage::Eval => json!({
                "eval": c.eval, "classes": c.classes, "template_id": c.template_id,
                "sampling": c.sampling, "max_prompt_tokens": c.max_prompt_tokens,
                "chat": b.chat, "text2image": b.text2image, "scorer": b.scorer,
                "against": self.against,
            }),
        }
    }

    fn fingerprint(&self, stage: Stage, manifest: &RunManifest) -> String {
        let upstream = stage
            .upstream()
            .and_then(|u| manifest.record(u).artifact_digest.clone());
        sha256_json(&(stage, self.stage_inputs(stage), upstream))
    }

    /// Cardinalities of the artifacts of complete stages.
    fn counters(&self, m: &mut RunManifest) {
        let count = |name: &str| -> u64 {
            std::fs::File::open(self.path(name))
                .map(|f| BufReader::new(f).lines().filter(|l| l.as_ref().is_ok_and(|l| !l.trim().is_empty())).count() as u64)
                .unwrap_or(0)
        };
        let (prompts_done, generated, filtered) = (
            m.is_complete(Stage::Promptgen),
            m.is_complete(Stage::Generation),
            m.is_complete(Stage::Filter),
        );
        let images = if generated {
            read_jsonl::<CandidateSet>(&self.path("candidates.jsonl"))
                .map(|v| v.iter().map(|s| s.images.len() as u64).sum())
                .unwrap_or(0)
        } else {
            0
        };
        m.counters.prompts = if prompts_done { count("prompts.jsonl") } else { 0 };
        m.counters.images = images;
        m.counters.pairs = if filtered { count("pairs.jsonl") } else { 0 };
        m.counters.rejections = if filtered { count("rejections.jsonl") } else { 0 };
    }

    /// Run one stage. Its upstream must be complete; a complete stage whose
    /// inputs are unchanged is skipped.
    pub fn run_stage(&self, stage: Stage) -> Result<StageReport, PipelineError> {
        let mut manifest = self.manifest()?;
        if let Some(up) = stage.upstream() {
            if !manifest.is_complete(up) {
                return Err(PipelineError::Dependency(format!(
                    "{stage} requires {up} to be complete (it is {:?})",
                    manifest.status(up)
                )));
            }
        }
        let fp = self.fingerprint(stage, &manifest);
        if manifest.is_complete(stage) && manifest.record(stage).fingerprint.as_deref() == Some(fp.as_str()) {
            log::info!("{stage}: inputs unchanged, skipping");
            return Ok(StageReport {
                stage,
                skipped: true,
                summary: "up to date".into(),
            });
        }
        log::info!("{stage}: running");
        let result = self.pool.install(|| self.execute(stage));
        manifest.config_digest = self.config.digest();
        let save = |m: &RunManifest| {
            m.save(&self.manifest_path())
                .map_err(|e| PipelineError::Stage(e.to_string()))
        };
        match result {
            Ok(out) => {
                manifest
                    .apply(
                        stage,
                        StageStatus::Complete,
                        StageDigests {
                            fingerprint: Some(fp),
                            artifact_digest: Some(out.digest),
                            error: None,
                        },
                    )
                    .map_err(|e| PipelineError::Dependency(e.to_string()))?;
                self.counters(&mut manifest);
                save(&manifest)?;
                Ok(StageReport {
                    stage,
                    skipped: false,
                    summary: out.summary,
                })
            }
            Err(e) => {
                manifest
                    .apply(
                        stage,
                        StageStatus::Failed,
                        StageDigests {
                            fingerprint: Some(fp),
                            artifact_digest: None,
                            error: Some(e.to_string()),
                        },
                    )
                    .map_err(|e| PipelineError::Dependency(e.to_string()))?;
                self.counters(&mut manifest);
                save(&manifest)?;
                Err(e)
            }
        }
    }

    /// All seven stages in order.
    pub fn run_loop(&self) -> Result<Vec<StageReport>, PipelineError> {
        Stage::ALL.into_iter().map(|s| self.run_stage(s)).collect()
    }

    fn execute(&self, stage: Stage) -> Result<StageOutput, PipelineError> {
        match stage {
            Stage::Promptgen => self.stage_prompts(),
            Stage::Generation => self.stage_generate(),
            Stage::Judge => self.stage_judge(),
            Stage::Filter => self.stage_filter(),
            Stage::Export => self.stage_export(),
            Stage::Train => self.stage_train(),
            Stage::Eval => self.stage_eval(),
        }
    }

    fn templates(&self) -> Result<TemplateRegistry, PipelineError> {
        Ok(match &self.config.template_dir {
            Some(d) => TemplateRegistry::with_dir(d)?,
            None => TemplateRegistry::default(),
        })
    }

    fn prompt_options(&self, purpose: PromptPurpose, id_prefix: &str) -> PromptGenOptions {
        PromptGenOptions {
            template_id: self.config.template_id.clone(),
            max_prompt_tokens: self.config.max_prompt_tokens,
            max_per_request: self.config.max_prompts_per_request,
            purpose,
            id_prefix: id_prefix.to_string(),
        }
    }

    fn prompts(&self) -> Result<Vec<PromptRecord>, PipelineError> {
        read_jsonl(&self.path("prompts.jsonl"))
    }

    fn stage_prompts(&self) -> Result<StageOutput, PipelineError> {
        let out = generate_prompts(
            &self.config.classes,
            self.config.sampling,
            &self.backends,
            &self.templates()?,
            &self.prompt_options(PromptPurpose::Training, ""),
        )?;
        for s in &out.shortfalls {
            log::warn!(
                "class {}: {} of {} prompts produced",
                s.class_name,
                s.produced,
                s.requested
            );
        }
        if out.records.is_empty() {
            return Err(PipelineError::Stage("no valid prompts were produced".into()));
        }
        write_jsonl(&self.path("prompts.jsonl"), &out.records)?;
        let key: Vec<_> = out
            .records
            .iter()
            .map(|r| (&r.prompt_id, &r.class_name, &r.text))
            .collect();
        Ok(StageOutput {
            digest: sha256_json(&key),
            summary: format!(
                "{} prompts ({} lines rejected, {} duplicates)",
                out.records.len(),
                out.rejected_lines,
                out.duplicate_lines
            ),
        })
    }

    fn stage_generate(&self) -> Result<StageOutput, PipelineError> {
        let prompts = self.prompts()?;
        let cfg = &self.config;
        let cache = (cfg.generation_cache && !self.replaying)
            .then(|| GenerationCache::new(cfg.output_root.join("cache").join("generation")));
        let t2i = self.backends.text2image.clone();
        let sets: Vec<CandidateSet> = prompts
            .par_iter()
            .map(|p| -> Result<CandidateSet, PipelineError> {
                let req = GenerationRequest {
                    n: cfg.n_candidates,
                    resolution: cfg.resolution,
                    salt: &self.run_id,
                    dest_dir: self.rel(&format!("images/{}", p.prompt_id)),
                };
                let mut set = generate_candidates(p, &req, &self.backends, t2i.as_ref(), cache.as_ref())?;
                if set.complete {
                    if let Some((rows, cols)) = grid_shape(cfg.n_candidates, cfg.grid_rows) {
                        let rel = self.rel(&format!("grids/{}.png", p.prompt_id));
                        attach_grid(&mut set, rows, cols, self.backends.store(), &rel)?;
                    }
                }
                Ok(set)
            })
            .collect::<Result<_, _>>()?;
        let complete = sets.iter().filter(|s| s.complete).count();
        if complete == 0 {
            let why = sets.iter().find_map(|s| s.error.clone()).unwrap_or_default();
            return Err(PipelineError::Backend(format!("every candidate set failed: {why}")));
        }
        write_jsonl(&self.path("candidates.jsonl"), &sets)?;
        let key: Vec<_> = sets.iter().map(|s| (&s.prompt_id, &s.content_ids, s.complete)).collect();
        Ok(StageOutput {
            digest: sha256_json(&key),
            summary: format!("{complete}/{} candidate sets complete", sets.len()),
        })
    }

    fn stage_judge(&self) -> Result<StageOutput, PipelineError> {
        let cfg = &self.config;
        let registry = match &cfg.battery_dir {
            Some(d) => BatteryRegistry::with_dir(d),
            None => Ok(BatteryRegistry::default()),
        }
        .map_err(|e| PipelineError::Config(e.to_string()))?;
        registry
            .get(&cfg.battery_id)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let prompts: HashMap<String, PromptRecord> =
            self.prompts()?.into_iter().map(|p| (p.prompt_id.clone(), p)).collect();
        let sets: Vec<CandidateSet> = read_jsonl(&self.path("candidates.jsonl"))?;
        let opts = JudgeOptions {
            template: cfg.judge_template.clone(),
            credit: cfg.negative_answer_credit,
        };
        let judged: Vec<JudgedSet> = sets
            .par_iter()
            .filter(|s| s.complete)
            .map(|s| {
                let p = prompts.get(&s.prompt_id).ok_or_else(|| {
                    PipelineError::Stage(format!("candidate set for unknown prompt {}", s.prompt_id))
                })?;
                let battery = registry
                    .build_battery(&p.class_name, &p.text, &cfg.battery_id)
                    .map_err(|e| PipelineError::Config(e.to_string()))?;
                judge_candidate_set(s, &p.text, &battery, &self.backends, &opts)
                    .map_err(|e| PipelineError::Stage(e.to_string()))
            })
            .collect::<Result<_, _>>()?;
        let cards: usize = judged.iter().map(|j| j.cards.len()).sum();
        let attempted: usize = judged.iter().map(|j| j.cards.len() + j.unjudged.len()).sum();
        if attempted > 0 && cards == 0 {
            return Err(PipelineError::Backend("no candidate could be judged".into()));
        }
        let unclassified: u64 = judged.iter().map(|j| j.unclassified).sum();
        if unclassified > 0 {
            log::warn!("{unclassified} VQA answers could not be classified and count as nan");
        }
        let judgments: Vec<&JudgmentRecord> = judged.iter().flat_map(|j| &j.judgments).collect();
        write_jsonl(&self.path("judgments.jsonl"), &judgments)?;
        write_jsonl(&self.path("scorecards.jsonl"), &judged)?;
        Ok(StageOutput {
            digest: sha256_json(&judged),
            summary: format!("{cards} images scored, {} unjudged, {unclassified} unclassified answers", attempted - cards),
        })
    }

    fn stage_filter(&self) -> Result<StageOutput, PipelineError> {
        let prompts = self.prompts()?;
        let sets: HashMap<String, CandidateSet> = read_jsonl::<CandidateSet>(&self.path("candidates.jsonl"))?
            .into_iter()
            .map(|s| (s.prompt_id.clone(), s))
            .collect();
        let judged: HashMap<String, JudgedSet> = read_jsonl::<JudgedSet>(&self.path("scorecards.jsonl"))?
            .into_iter()
            .map(|j| (j.prompt_id.clone(), j))
            .collect();
        let inputs: Vec<PromptEvidence<'_>> = prompts
            .iter()
            .map(|p| PromptEvidence {
                prompt: p,
                set: sets.get(&p.prompt_id),
                judged: judged.get(&p.prompt_id),
            })
            .collect();
        let ex = extract_pairs(&inputs, &self.config.filter, &self.backends)
            .map_err(|e| PipelineError::Stage(e.to_string()))?;
        if ex.detector_failures > 0 {
            log::warn!("{} detector calls failed", ex.detector_failures);
        }
        write_jsonl(&self.path("pairs.jsonl"), &ex.pairs)?;
        write_jsonl(&self.path("rejections.jsonl"), &ex.rejections)?;
        Ok(StageOutput {
            digest: sha256_json(&(&ex.pairs, &ex.rejections)),
            summary: format!("{} pairs, {} rejections", ex.pairs.len(), ex.rejections.len()),
        })
    }

    fn stage_export(&self) -> Result<StageOutput, PipelineError> {
        let pairs: Vec<OptimalPair> = read_jsonl(&self.path("pairs.jsonl"))?;
        let bundle = export_pairs(&pairs, self.backends.store(), &self.dataset_dir()).map_err(|e| match e {
            ExportError::Empty => PipelineError::Stage(
                "no optimal pairs to export; see rejections.jsonl".into(),
            ),
            other => PipelineError::Stage(other.to_string()),
        })?;
        Ok(StageOutput {
            digest: bundle.digest().map_err(|e| PipelineError::Stage(e.to_string()))?,
            summary: format!("{} pairs exported to {}", bundle.pair_count, bundle.root.display()),
        })
    }

    fn stage_train(&self) -> Result<StageOutput, PipelineError> {
        let bundle = DatasetBundle::open(&self.dataset_dir()).map_err(|e| PipelineError::Stage(e.to_string()))?;
        let train_dir = self.path("train");
        let config = build_train_config(
            &bundle,
            &self.config.backends.text2image.model_id,
            &train_dir.join("output"),
            &self.config.train,
        )?;
        let spec = TrainerSpec {
            command: self.config.trainer_command.clone(),
            weights_file: self.config.weights_file.clone(),
            log_path: train_dir.join("trainer.log"),
        };
        let weights = launch_training(&config, &train_dir.join("config.txt"), &spec)?;
        let adapter = train_dir.join("adapter.json");
        std::fs::write(&adapter, serde_json::to_vec_pretty(&weights).expect("json"))
            .map_err(|e| stage_io(&adapter, e))?;
        Ok(StageOutput {
            digest: sha256_json(&(&weights.weights_digest, config.hyperparameter_digest())),
            summary: format!("adapter weights at {}", weights.weights_path.display()),
        })
    }

    fn adapter_of(&self, run_id: &str) -> Result<AdapterWeightsRef, PipelineError> {
        let path = run_dir(&self.config.output_root, run_id).join("train").join("adapter.json");
        let text = std::fs::read_to_string(&path).map_err(|e| {
            PipelineError::Dependency(format!("no trained adapter for run {run_id} ({}: {e})", path.display()))
        })?;
        serde_json::from_str(&text).map_err(|e| stage_io(&path, e))
    }

    fn stage_eval(&self) -> Result<StageOutput, PipelineError> {
        let cfg = &self.config;
        let weights = self.adapter_of(&self.run_id)?;
        let seeds = spread_counts(&cfg.classes, cfg.eval.validation_prompts as u32);
        let val = generate_prompts(
            &seeds,
            cfg.sampling,
            &self.backends,
            &self.templates()?,
            &self.prompt_options(PromptPurpose::Validation, "val-"),
        )?;
        if val.records.is_empty() {
            return Err(PipelineError::Stage("no validation prompts were produced".into()));
        }
        let eval_dir = self.path("eval");
        write_jsonl(&eval_dir.join("validation_prompts.jsonl"), &val.records)?;

        let base = self.backends.text2image.clone();
        let resolution = Resolution::square(cfg.eval.resolution);
        let seed_values = cfg.eval.seed_values();
        let tuned = scaled_backend(base.clone(), &weights, cfg.eval.compare_scale)?;
        let baseline: Arc<dyn TextToImageBackend> = if self.against == BASELINE {
            base.clone()
        } else {
            Arc::new(scaled_backend(base.clone(), &self.adapter_of(&self.against)?, cfg.eval.compare_scale)?)
        };
        let score = |backend: &dyn TextToImageBackend, scale: Option<f64>, name: &str| {
            score_model(
                &val.records,
                &seed_values,
                &ScoreJob {
                    backend,
                    resolution,
                    lora_scale: scale,
                    dest_dir: self.rel(&format!("eval/images/{name}")),
                },
                &self.backends,
            )
            .map_err(|e| PipelineError::Stage(e.to_string()))
        };
        let a = score(&tuned, Some(cfg.eval.compare_scale), "tuned")?;
        let b = score(baseline.as_ref(), None, &self.against)?;
        if a.iter().chain(&b).all(|s| s.clip_score.is_none()) {
            return Err(PipelineError::Backend("every evaluation sample failed".into()));
        }
        let report = compare(&a, &b, cfg.eval.tie_epsilon).map_err(|e| PipelineError::Stage(e.to_string()))?;

        let sweep_prompts: Vec<PromptRecord> = val.records.iter().take(cfg.eval.sweep_prompts).cloned().collect();
        let sweep = if cfg.eval.sweep_scales.is_empty() || sweep_prompts.is_empty() {
            None
        } else {
            Some(
                sweep_scales(
                    &sweep_prompts,
                    &seed_values,
                    &cfg.eval.sweep_scales,
                    &SweepJob {
                        base: base.clone(),
                        weights: &weights,
                        resolution,
                        dest_dir: self.rel("eval/images/sweep"),
                    },
                    &self.backends,
                )
                .map_err(|e| PipelineError::Stage(e.to_string()))?,
            )
        };
        let curves = sweep.as_ref().map(|s| s.curves.clone()).unwrap_or_default();
        let mut samples = a;
        samples.extend(b);
        if let Some(s) = sweep {
            samples.extend(s.samples);
        }
        write_jsonl(&eval_dir.join("samples.jsonl"), &samples)?;
        render_report(&report, &curves, &eval_dir).map_err(|e| PipelineError::Stage(e.to_string()))?;
        Ok(StageOutput {
            digest: sha256_json(&(&report, &curves)),
            summary: format!(
                "vs {}: {} wins, {} losses, {} ties (win rate {:.3}, win+tie {:.3})",
                self.against, report.wins, report.losses, report.ties, report.win_rate, report.win_plus_tie_rate
            ),
        })
    }
}

/// Pairs and rejections recorded by the filter stage.
pub fn read_filter_outputs(run_dir: &Path) -> Result<(Vec<OptimalPair>, Vec<Rejection>), PipelineError> {
    Ok((
        read_jsonl(&run_dir.join("pairs.jsonl"))?,
        read_jsonl(&run_dir.join("rejections.jsonl"))?,
    ))
}

impl From<BackendError> for PipelineError {
    fn from(e: BackendError) -> Self {
        PipelineError::Backend(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(root: &Path) -> RunConfig {
        let text = "output_root = \"out\"\nconfidence_threshold = 0.0\nn_candidates = 2\nwidth = 8\nheight = 8\n\
                    [[classes]]\nclass_name = \"Elephant\"\nprompt_count = 2\n\
                    [eval]\nvalidation_prompts = 1\nseeds = 1\nsweep_prompts = 1\n";
        RunConfig::from_toml(text, root).unwrap()
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes: Vec<i32> = [
            PipelineError::Config(String::new()),
            PipelineError::Dependency(String::new()),
            PipelineError::Backend(String::new()),
            PipelineError::Stage(String::new()),
        ]
        .iter()
        .map(PipelineError::exit_code)
        .collect();
        assert_eq!(codes, vec![2, 3, 4, 5]);
    }

    #[test]
    fn fingerprints_follow_only_their_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        let run = Run::open(cfg.clone(), "r", &RunOptions::default()).unwrap();
        let m = run.manifest().unwrap();
        let before: Vec<String> = Stage::ALL.iter().map(|&s| run.fingerprint(s, &m)).collect();

        cfg.filter.confidence_threshold = 0.5;
        let run = Run::open(cfg, "r", &RunOptions::default()).unwrap();
        let after: Vec<String> = Stage::ALL.iter().map(|&s| run.fingerprint(s, &m)).collect();
        for (i, s) in Stage::ALL.iter().enumerate() {
            assert_eq!(before[i] != after[i], *s == Stage::Filter, "{s}");
        }
    }

    #[test]
    fn stages_chain_and_count() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::open(config(dir.path()), "r", &RunOptions { parallelism: Some(2), ..Default::default() }).unwrap();
        assert!(matches!(run.run_stage(Stage::Generation), Err(PipelineError::Dependency(_))));
        let reports = run.run_loop().unwrap();
        assert!(reports.iter().all(|r| !r.skipped));
        let m = run.manifest().unwrap();
        assert_eq!((m.counters.prompts, m.counters.images), (2, 4));
        assert!(run.run_loop().unwrap().iter().all(|r| r.skipped));
        assert!(run.dataset_dir().join("metadata.jsonl").exists());
    }

    #[test]
    fn jsonl_reports_the_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(&p, "1\n\n2\nthree\n").unwrap();
        match read_jsonl::<u32>(&p) {
            Err(PipelineError::Stage(m)) => assert!(m.contains("line 4"), "{m}"),
            other => panic!("{other:?}"),
        }
    }
}
