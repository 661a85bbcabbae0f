//! Detection filtering over the best-scoring candidates of each prompt, and
//! extraction of one optimal (prompt, image) pair per prompt.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{Backends, Detection, ImageRef};
use crate::generation::CandidateSet;
use crate::judge::JudgedSet;
use crate::promptgen::PromptRecord;

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    #[default]
    LowestIndex,
    /// Higher judge total first, then lowest index.
    HighestScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub confidence_threshold: f64,
    pub tie_break: TieBreak,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            tie_break: TieBreak::LowestIndex,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if (0.0..=1.0).contains(&self.confidence_threshold) {
            Ok(())
        } else {
            Err(format!(
                "confidence_threshold {} outside [0, 1]",
                self.confidence_threshold
            ))
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("argument error: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalPair {
    pub prompt_id: String,
    pub prompt_text: String,
    pub class_name: String,
    #[serde(flatten)]
    pub image: ImageRef,
    pub image_index: u32,
    pub score_total: i32,
    pub detection_confidence: f64,
}

/// What the selector sees for one best-scoring candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateEvidence {
    pub image_index: u32,
    pub score_total: i32,
    /// Max class confidence; `None` when nothing was detected or the
    /// detector failed.
    pub confidence: Option<f64>,
}

/// Highest confidence among detections labelled `class_name`.
pub fn max_confidence(detections: &[Detection], class_name: &str) -> Option<f64> {
    detections
        .iter()
        .filter(|d| d.class_label.eq_ignore_ascii_case(class_name))
        .map(|d| d.confidence)
        .fold(None, |acc, c| Some(acc.map_or(c, |a: f64| a.max(c))))
}

/// Threshold first, then argmax confidence with the policy's tie-break.
/// Returns a position in `evidence`.
pub fn select_optimal(evidence: &[CandidateEvidence], policy: &FilterPolicy) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, e) in evidence.iter().enumerate() {
        let Some(c) = e.confidence else { continue };
        if c < policy.confidence_threshold {
            continue;
        }
        let Some(b) = best else {
            best = Some(i);
            continue;
        };
        let cur = &evidence[b];
        let bc = cur.confidence.unwrap_or(f64::NEG_INFINITY);
        let better = if c != bc {
            c > bc
        } else {
            match policy.tie_break {
                TieBreak::LowestIndex => e.image_index < cur.image_index,
                TieBreak::HighestScore => {
                    (e.score_total, std::cmp::Reverse(e.image_index))
                        > (cur.score_total, std::cmp::Reverse(cur.image_index))
                }
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub pair: Option<OptimalPair>,
    pub evidence: Vec<CandidateEvidence>,
    pub detector_failures: usize,
}

/// Detect `class_name` in each best-scoring image and pick the winner.
/// Detector failures count as below-threshold.
pub fn filter_and_select(
    prompt: &PromptRecord,
    best_indices: &[u32],
    judged: &JudgedSet,
    set: &CandidateSet,
    policy: &FilterPolicy,
    backends: &Backends,
) -> Result<FilterOutcome, FilterError> {
    if best_indices.is_empty() {
        return Err(FilterError::Argument(format!("{}: no best indices", prompt.prompt_id)));
    }
    let classes = [prompt.class_name.clone()];
    let mut evidence = Vec::with_capacity(best_indices.len());
    let mut detector_failures = 0;
    for &idx in best_indices {
        let image = set.images.get(idx as usize).ok_or_else(|| {
            FilterError::Argument(format!(
                "{}: index {idx} outside a {}-image set",
                prompt.prompt_id,
                set.images.len()
            ))
        })?;
        let score_total = judged
            .cards
            .iter()
            .find(|c| c.image_index == idx)
            .map(|c| c.total)
            .ok_or_else(|| {
                FilterError::Argument(format!("{}: index {idx} has no score card", prompt.prompt_id))
            })?;
        let confidence = match backends.detect(image, &classes) {
            Ok(dets) => max_confidence(&dets, &prompt.class_name),
            Err(e) => {
                log::warn!("{} image {idx}: detector failed, treated as below threshold: {e}", prompt.prompt_id);
                detector_failures += 1;
                None
            }
        };
        evidence.push(CandidateEvidence {
            image_index: idx,
            score_total,
            confidence,
        });
    }
    let pair = select_optimal(&evidence, policy).map(|i| {
        let e = evidence[i];
        OptimalPair {
            prompt_id: prompt.prompt_id.clone(),
            prompt_text: prompt.text.clone(),
            class_name: prompt.class_name.clone(),
            image: set.images[e.image_index as usize].clone(),
            image_index: e.image_index,
            score_total: e.score_total,
            detection_confidence: e.confidence.expect("selected evidence has a confidence"),
        }
    });
    Ok(FilterOutcome {
        pair,
        evidence,
        detector_failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectionReason {
    /// No best-scoring image cleared the confidence threshold.
    NoDetection,
    /// Generation or judging left nothing to filter.
    JudgingExcluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub prompt_id: String,
    pub reason: RejectionReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Everything the filter needs about one prompt. `set`/`judged` are `None`
/// when an upstream stage produced nothing usable.
#[derive(Debug, Clone, Copy)]
pub struct PromptEvidence<'a> {
    pub prompt: &'a PromptRecord,
    pub set: Option<&'a CandidateSet>,
    pub judged: Option<&'a JudgedSet>,
}

#[derive(Debug, Clone, Default)]
pub struct Extraction {
    pub pairs: Vec<OptimalPair>,
    pub rejections: Vec<Rejection>,
    pub detector_failures: usize,
}

/// At most one pair per prompt; every other prompt gets a rejection. Both
/// lists are ordered by prompt_id.
pub fn extract_pairs(
    inputs: &[PromptEvidence<'_>],
    policy: &FilterPolicy,
    backends: &Backends,
) -> Result<Extraction, FilterError> {
    enum One {
        Pair(OptimalPair, usize),
        Reject(Rejection, usize),
    }
    let reject = |p: &PromptRecord, reason, detail: String| {
        One::Reject(
            Rejection {
                prompt_id: p.prompt_id.clone(),
                reason,
                detail: Some(detail),
            },
            0,
        )
    };
    let results: Vec<One> = inputs
        .par_iter()
        .map(|ev| {
            let (Some(set), Some(judged)) = (ev.set, ev.judged) else {
                return Ok(reject(ev.prompt, RejectionReason::JudgingExcluded, "not judged".into()));
            };
            if !set.complete {
                return Ok(reject(
                    ev.prompt,
                    RejectionReason::JudgingExcluded,
                    set.error.clone().unwrap_or_else(|| "incomplete candidate set".into()),
                ));
            }
            let best = judged.best_indices();
            if best.is_empty() {
                return Ok(reject(
                    ev.prompt,
                    RejectionReason::JudgingExcluded,
                    "every candidate unjudged".into(),
                ));
            }
            let out = filter_and_select(ev.prompt, &best, judged, set, policy, backends)?;
            Ok(match out.pair {
                Some(p) => One::Pair(p, out.detector_failures),
                None => One::Reject(
                    Rejection {
                        prompt_id: ev.prompt.prompt_id.clone(),
                        reason: RejectionReason::NoDetection,
                        detail: None,
                    },
                    out.detector_failures,
                ),
            })
        })
        .collect::<Result<_, FilterError>>()?;
    let mut ex = Extraction::default();
    for r in results {
        match r {
            One::Pair(p, f) => {
                ex.detector_failures += f;
                ex.pairs.push(p);
            }
            One::Reject(r, f) => {
                ex.detector_failures += f;
                ex.rejections.push(r);
            }
        }
    }
    ex.pairs.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id));
    ex.rejections.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id));
    Ok(ex)
}
