//! CLIP-score evaluation: seeded per-prompt scoring, pairwise win/loss/tie
//! comparison and LoRA-scale sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::adapters::{Backends, TextToImageBackend};
use crate::finetune::{scaled_backend, AdapterWeightsRef, FinetuneError};
use crate::generation::Resolution;
use crate::promptgen::PromptRecord;

pub const DEFAULT_TIE_EPSILON: f64 = 0.01;
pub const DEFAULT_VALIDATION_PROMPTS: usize = 50;
pub const DEFAULT_SEEDS: [u64; 4] = [0, 1, 2, 3];
pub const SWEEP_SCALES: [f64; 5] = [0.0, 0.2, 0.4, 0.7, 1.0];

/// Differences this close to the tie width (relative) count as exactly on it.
const BOUNDARY_REL_TOL: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("argument error: {0}")]
    Argument(String),
    #[error(transparent)]
    Finetune(#[from] FinetuneError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> EvalError + '_ {
    move |e| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSample {
    pub prompt_id: String,
    pub seed: u64,
    pub model_id: String,
    #[serde(default)]
    pub lora_scale: Option<f64>,
    /// `None` when generation or scoring failed.
    pub clip_score: Option<f64>,
}

pub struct ScoreJob<'a> {
    pub backend: &'a dyn TextToImageBackend,
    pub resolution: Resolution,
    pub lora_scale: Option<f64>,
    /// Store directory for the generated images.
    pub dest_dir: String,
}

/// One seeded image per (prompt, seed), scored against its prompt text.
/// Output follows prompt order, then seed order.
pub fn score_model(
    prompts: &[PromptRecord],
    seeds: &[u64],
    job: &ScoreJob<'_>,
    backends: &Backends,
) -> Result<Vec<ScoreSample>, EvalError> {
    if prompts.is_empty() || seeds.is_empty() {
        return Err(EvalError::Argument("prompts and seeds must be non-empty".into()));
    }
    let units: Vec<(&PromptRecord, u64)> = prompts
        .iter()
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    Ok(units
        .par_iter()
        .map(|&(p, seed)| {
            let dir = format!("{}/{}/{seed}", job.dest_dir.trim_end_matches('/'), p.prompt_id);
            let score = backends
                .generate_images_with(
                    job.backend,
                    &p.text,
                    1,
                    job.resolution.width,
                    job.resolution.height,
                    Some(seed),
                    &dir,
                )
                .and_then(|refs| backends.image_text_score(&refs[0], &p.text));
            let clip_score = match score {
                Ok(s) => Some(s),
                Err(e) => {
                    log::warn!("{} seed {seed}: sample missing: {e}", p.prompt_id);
                    None
                }
            };
            ScoreSample {
                prompt_id: p.prompt_id.clone(),
                seed,
                model_id: job.backend.model_id().to_string(),
                lora_scale: job.lora_scale,
                clip_score,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Win,
    Loss,
    Tie,
}

/// Tie iff |d| < eps, with exactly-equal scores always tying.
pub fn classify_difference(d: f64, tie_epsilon: f64) -> Outcome {
    if d == 0.0 {
        return Outcome::Tie;
    }
    let mut ad = d.abs();
    if tie_epsilon > 0.0 && (ad - tie_epsilon).abs() <= BOUNDARY_REL_TOL * tie_epsilon.max(ad) {
        ad = tie_epsilon;
    }
    if ad < tie_epsilon {
        Outcome::Tie
    } else if d > 0.0 {
        Outcome::Win
    } else {
        Outcome::Loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateReport {
    pub model_a: String,
    pub model_b: String,
    pub wins: u64,
    pub losses: u64,
    pub ties: u64,
    pub total: u64,
    /// Keys skipped because either side's sample was missing.
    pub dropped: u64,
    pub win_rate: f64,
    pub win_plus_tie_rate: f64,
    pub tie_epsilon: f64,
}

fn model_name(samples: &[ScoreSample]) -> String {
    let mut names: Vec<&str> = samples.iter().map(|s| s.model_id.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    names.join(",")
}

/// Pair samples by (prompt_id, seed) and count wins for `a`.
pub fn compare(a: &[ScoreSample], b: &[ScoreSample], tie_epsilon: f64) -> Result<WinRateReport, EvalError> {
    if !(tie_epsilon >= 0.0 && tie_epsilon.is_finite()) {
        return Err(EvalError::Argument(format!("tie_epsilon {tie_epsilon} must be >= 0")));
    }
    let index = |s: &[ScoreSample], side: &str| -> Result<BTreeMap<(String, u64), Option<f64>>, EvalError> {
        let mut m = BTreeMap::new();
        for x in s {
            if m.insert((x.prompt_id.clone(), x.seed), x.clip_score).is_some() {
                return Err(EvalError::Argument(format!(
                    "duplicate sample ({}, {}) in {side}",
                    x.prompt_id, x.seed
                )));
            }
        }
        Ok(m)
    };
    let ma = index(a, "a")?;
    let mb = index(b, "b")?;
    let only = |x: &BTreeMap<(String, u64), Option<f64>>, y: &BTreeMap<(String, u64), Option<f64>>| {
        x.keys()
            .filter(|k| !y.contains_key(*k))
            .map(|(p, s)| format!("({p}, {s})"))
            .collect::<Vec<_>>()
    };
    let (missing_b, missing_a) = (only(&ma, &mb), only(&mb, &ma));
    if !missing_a.is_empty() || !missing_b.is_empty() {
        return Err(EvalError::Argument(format!(
            "sample keys differ; missing from a: [{}]; missing from b: [{}]",
            missing_a.join(", "),
            missing_b.join(", ")
        )));
    }
    let (mut wins, mut losses, mut ties, mut dropped) = (0u64, 0u64, 0u64, 0u64);
    for (k, sa) in &ma {
        let (Some(sa), Some(sb)) = (sa, mb[k]) else {
            dropped += 1;
            continue;
        };
        match classify_difference(sa - sb, tie_epsilon) {
            Outcome::Win => wins += 1,
            Outcome::Loss => losses += 1,
            Outcome::Tie => ties += 1,
        }
    }
    let total = wins + losses + ties;
    let rate = |n: u64| if total == 0 { 0.0 } else { n as f64 / total as f64 };
    Ok(WinRateReport {
        model_a: model_name(a),
        model_b: model_name(b),
        wins,
        losses,
        ties,
        total,
        dropped,
        win_rate: rate(wins),
        win_plus_tie_rate: rate(wins + ties),
        tie_epsilon,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub scale: f64,
    /// Mean over the seeds that produced a sample.
    pub mean_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub prompt_id: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub curves: Vec<Curve>,
    pub samples: Vec<ScoreSample>,
}

pub struct SweepJob<'a> {
    pub base: Arc<dyn TextToImageBackend>,
    pub weights: &'a AdapterWeightsRef,
    pub resolution: Resolution,
    pub dest_dir: String,
}

/// Score every prompt at each adapter scale; one curve per prompt.
pub fn sweep_scales(
    prompts: &[PromptRecord],
    seeds: &[u64],
    scales: &[f64],
    job: &SweepJob<'_>,
    backends: &Backends,
) -> Result<Sweep, EvalError> {
    if scales.is_empty() {
        return Err(EvalError::Argument("no scales".into()));
    }
    if let Some(s) = scales.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(EvalError::Argument(format!("scale {s} outside [0, 1]")));
    }
    if scales.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::Argument("scales must be strictly ascending".into()));
    }
    let mut samples = Vec::new();
    let mut by_prompt: BTreeMap<&str, Vec<CurvePoint>> = BTreeMap::new();
    for &scale in scales {
        let backend = scaled_backend(job.base.clone(), job.weights, scale)?;
        let s = score_model(
            prompts,
            seeds,
            &ScoreJob {
                backend: &backend,
                resolution: job.resolution,
                lora_scale: Some(scale),
                dest_dir: format!("{}/scale-{scale}", job.dest_dir.trim_end_matches('/')),
            },
            backends,
        )?;
        for p in prompts {
            let vals: Vec<f64> = s
                .iter()
                .filter(|x| x.prompt_id == p.prompt_id)
                .filter_map(|x| x.clip_score)
                .collect();
            let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            by_prompt.entry(&p.prompt_id).or_default().push(CurvePoint {
                scale,
                mean_score: mean,
            });
        }
        samples.extend(s);
    }
    let curves = prompts
        .iter()
        .map(|p| Curve {
            prompt_id: p.prompt_id.clone(),
            points: by_prompt.remove(p.prompt_id.as_str()).unwrap_or_default(),
        })
        .collect();
    Ok(Sweep { curves, samples })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportArtifacts {
    pub summary_path: PathBuf,
    pub curves_path: Option<PathBuf>,
}

pub const SUMMARY_FILE: &str = "winrate.json";
pub const CURVES_FILE: &str = "curves.csv";

/// Write `winrate.json` and, when there are curves, `curves.csv` with
/// columns `prompt_id, scale, mean_score`.
pub fn render_report(report: &WinRateReport, curves: &[Curve], dir: &Path) -> Result<ReportArtifacts, EvalError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let summary_path = dir.join(SUMMARY_FILE);
    let body = serde_json::to_vec_pretty(report).expect("report serializes");
    std::fs::write(&summary_path, body).map_err(io_err(&summary_path))?;
    let curves_path = if curves.is_empty() {
        None
    } else {
        let path = dir.join(CURVES_FILE);
        let csv_err = |e: csv::Error| EvalError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(["prompt_id", "scale", "mean_score"]).map_err(csv_err)?;
        for c in curves {
            for pt in &c.points {
                let mean = pt.mean_score.map(|m| m.to_string()).unwrap_or_default();
                w.write_record([c.prompt_id.as_str(), &pt.scale.to_string(), &mean])
                    .map_err(csv_err)?;
            }
        }
        w.flush().map_err(io_err(&path))?;
        Some(path)
    };
    Ok(ReportArtifacts {
        summary_path,
        curves_path,
    })
}

pub fn load_report(path: &Path) -> Result<WinRateReport, EvalError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
