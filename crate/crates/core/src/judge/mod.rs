//! Self-judging: ask every candidate image a fixed question battery through
//! the VQA backend, score the answers and keep the best-scoring set.

mod battery;
mod parse;
mod score;

pub use battery::{
    default_battery, render_question, Battery, BatteryRegistry, Polarity, Question, QuestionSpec,
    DEFAULT_BATTERY_ID, DEFAULT_JUDGE_TEMPLATE,
};
pub use parse::{classify_answer, parse_answer, parse_answer_counted, Classification, Parsed};
pub use score::{
    contribution, effective_answers, score_image, select_best, AnswerRecord, NegativeAnswerCredit,
    ScoreCard,
};

use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::adapters::{Backends, DependencyHint, QuestionHint};
use crate::generation::CandidateSet;

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("unknown battery {0:?}")]
    UnknownBattery(String),
    #[error("invalid battery: {0}")]
    InvalidBattery(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("argument error: {0}")]
    Argument(String),
}

/// One persisted VQA exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub prompt_id: String,
    pub image_index: u32,
    pub question_id: String,
    pub raw_text: String,
    pub parsed: Parsed,
    pub contribution: i8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgedSet {
    pub prompt_id: String,
    pub cards: Vec<ScoreCard>,
    /// Candidates whose VQA calls failed; they take no part in selection.
    pub unjudged: Vec<u32>,
    /// Persisted separately, one line per question.
    #[serde(skip)]
    pub judgments: Vec<JudgmentRecord>,
    /// Answers that matched no yes/no/nan token.
    pub unclassified: u64,
}

impl JudgedSet {
    pub fn best_indices(&self) -> Vec<u32> {
        select_best(&self.cards)
    }
}

#[derive(Debug, Clone)]
pub struct JudgeOptions {
    /// Framing of each question; `{question}` and `{prompt}` are substituted.
    pub template: String,
    pub credit: NegativeAnswerCredit,
}

impl Default for JudgeOptions {
    fn default() -> Self {
        Self {
            template: DEFAULT_JUDGE_TEMPLATE.to_string(),
            credit: NegativeAnswerCredit::Reward,
        }
    }
}

fn hint_for(q: &Question, battery: &[Question]) -> QuestionHint {
    QuestionHint {
        question_id: q.question_id.clone(),
        positive: q.polarity == Polarity::Positive,
        depends_on: q.depends_on.as_ref().and_then(|d| {
            battery.iter().find(|b| &b.question_id == d).map(|b| DependencyHint {
                question_id: b.question_id.clone(),
                positive: b.polarity == Polarity::Positive,
            })
        }),
    }
}

/// Questions go out in battery order, one image at a time. A backend failure
/// on any question marks that image unjudged.
pub fn judge_candidate_set(
    set: &CandidateSet,
    prompt_text: &str,
    battery: &[Question],
    backends: &Backends,
    opts: &JudgeOptions,
) -> Result<JudgedSet, JudgeError> {
    if !set.complete {
        return Err(JudgeError::Argument(format!(
            "candidate set {} is incomplete",
            set.prompt_id
        )));
    }
    let framed: Vec<String> = battery
        .iter()
        .map(|q| render_question(&opts.template, q, prompt_text))
        .collect::<Result<_, _>>()?;
    let unclassified = AtomicU64::new(0);
    let mut out = JudgedSet {
        prompt_id: set.prompt_id.clone(),
        cards: Vec::new(),
        unjudged: Vec::new(),
        judgments: Vec::new(),
        unclassified: 0,
    };
    'images: for (index, image) in set.images.iter().enumerate() {
        let index = index as u32;
        let mut answers = Vec::with_capacity(battery.len());
        for (q, text) in battery.iter().zip(&framed) {
            match backends.vqa_answer(image, text, Some(hint_for(q, battery))) {
                Ok(raw) => {
                    let parsed = parse_answer_counted(&raw, &unclassified);
                    answers.push(AnswerRecord {
                        question_id: q.question_id.clone(),
                        raw_text: raw,
                        parsed,
                    });
                }
                Err(e) => {
                    log::warn!("{} image {index} left unjudged: {e}", set.prompt_id);
                    out.unjudged.push(index);
                    continue 'images;
                }
            }
        }
        let card = score_image(&set.prompt_id, index, &answers, battery, opts.credit)?;
        out.judgments
            .extend(answers.into_iter().zip(&card.contributions).map(|(a, &c)| JudgmentRecord {
                prompt_id: set.prompt_id.clone(),
                image_index: index,
                question_id: a.question_id,
                raw_text: a.raw_text,
                parsed: a.parsed,
                contribution: c,
            }));
        out.cards.push(card);
    }
    out.unclassified = unclassified.load(Ordering::Relaxed);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::mock::{MockVqa, VqaScript};
    use crate::adapters::{CallLog, ImageStore};
    use crate::generation::{generate_candidates, GenerationRequest, Resolution};
    use crate::promptgen::PromptRecord;
    use std::sync::Arc;

    fn setup(n: u32) -> (tempfile::TempDir, Backends, CandidateSet) {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::new(dir.path());
        let backends = Backends::mock(store, Arc::new(CallLog::in_memory()), 3, "salt");
        let req = GenerationRequest {
            n,
            resolution: Resolution::square(32),
            salt: "salt",
            dest_dir: "images/p0".into(),
        };
        let t2i = backends.text2image.clone();
        let set = generate_candidates(&PromptRecord::new("p0", "Elephant", "an elephant"), &req, &backends, t2i.as_ref(), None).unwrap();
        (dir, backends, set)
    }

    #[test]
    fn ten_by_ten_makes_one_hundred_calls() {
        let (_d, backends, set) = setup(10);
        let battery = BatteryRegistry::default()
            .build_battery("Elephant", "an elephant", "default")
            .unwrap();
        let before = backends.log().count_kind(crate::adapters::BackendKind::Vqa);
        let judged =
            judge_candidate_set(&set, "an elephant", &battery, &backends, &JudgeOptions::default()).unwrap();
        assert_eq!(backends.log().count_kind(crate::adapters::BackendKind::Vqa) - before, 100);
        assert_eq!(judged.cards.len(), 10);
        assert_eq!(judged.judgments.len(), 100);
        assert!(judged.unjudged.is_empty());
    }

    #[test]
    fn single_image() {
        let (_d, backends, set) = setup(1);
        let battery = BatteryRegistry::default()
            .build_battery("Elephant", "an elephant", "default")
            .unwrap();
        let judged =
            judge_candidate_set(&set, "an elephant", &battery, &backends, &JudgeOptions::default()).unwrap();
        assert_eq!(judged.cards.len(), 1);
        assert_eq!(judged.best_indices(), vec![0]);
    }

    #[test]
    fn unparseable_answers_are_counted() {
        let (_d, backends, set) = setup(2);
        let battery = vec![Question::new("Q1", "Is it real?", Polarity::Positive, None)];
        let mut script = VqaScript::default();
        for cid in &set.content_ids {
            script.answers.push(crate::adapters::mock::ScriptedAnswer {
                content_id: cid.clone(),
                question_id: "Q1".into(),
                answer: "It is hard to tell from this angle.".into(),
            });
        }
        let backends = backends.with_vqa(Arc::new(MockVqa::new(1).with_script(script)));
        let judged =
            judge_candidate_set(&set, "an elephant", &battery, &backends, &JudgeOptions::default()).unwrap();
        assert_eq!(judged.unclassified, 2);
        assert!(judged.cards.iter().all(|c| c.total == 0));
    }
}
