use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use super::battery::{Polarity, Question};
use super::parse::Parsed;
use super::JudgeError;

/// How a negative question answered "no" is credited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeAnswerCredit {
    /// +1, the scoring rule as written.
    #[default]
    Reward,
    /// 0: only positive evidence earns points.
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: String,
    pub raw_text: String,
    pub parsed: Parsed,
}

impl AnswerRecord {
    pub fn new(question_id: &str, raw_text: &str, parsed: Parsed) -> Self {
        Self {
            question_id: question_id.to_string(),
            raw_text: raw_text.to_string(),
            parsed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub prompt_id: String,
    pub image_index: u32,
    pub contributions: Vec<i8>,
    pub total: i32,
}

pub fn contribution(polarity: Polarity, parsed: Parsed, credit: NegativeAnswerCredit) -> i8 {
    match (polarity, parsed) {
        (Polarity::Positive, Parsed::Yes) => 1,
        (Polarity::Negative, Parsed::Yes) => -1,
        (Polarity::Negative, Parsed::No) => match credit {
            NegativeAnswerCredit::Reward => 1,
            NegativeAnswerCredit::Neutral => 0,
        },
        _ => 0,
    }
}

/// Parsed values after the dependency rule: a question whose dependency
/// effectively answered "no" becomes nan. Effective values are used, so a
/// dependency that was itself coerced to nan does not propagate a "no".
pub fn effective_answers(answers: &[Parsed], battery: &[Question]) -> Vec<Parsed> {
    let position: HashMap<&str, usize> = battery
        .iter()
        .enumerate()
        .map(|(i, q)| (q.question_id.as_str(), i))
        .collect();
    let mut eff = Vec::with_capacity(answers.len());
    for (q, &a) in battery.iter().zip(answers) {
        let dep_no = q
            .depends_on
            .as_deref()
            .and_then(|d| position.get(d))
            .is_some_and(|&j| j < eff.len() && eff[j] == Parsed::No);
        eff.push(if dep_no { Parsed::Nan } else { a });
    }
    eff
}

pub fn score_image(
    prompt_id: &str,
    image_index: u32,
    answers: &[AnswerRecord],
    battery: &[Question],
    credit: NegativeAnswerCredit,
) -> Result<ScoreCard, JudgeError> {
    if answers.len() != battery.len() {
        return Err(JudgeError::Argument(format!(
            "{} answers for a {}-question battery",
            answers.len(),
            battery.len()
        )));
    }
    if let Some((a, q)) = answers
        .iter()
        .zip(battery)
        .find(|(a, q)| a.question_id != q.question_id)
    {
        return Err(JudgeError::Argument(format!(
            "answer for {} found where {} was expected",
            a.question_id, q.question_id
        )));
    }
    let parsed: Vec<Parsed> = answers.iter().map(|a| a.parsed).collect();
    let contributions: Vec<i8> = effective_answers(&parsed, battery)
        .into_iter()
        .zip(battery)
        .map(|(p, q)| contribution(q.polarity, p, credit))
        .collect();
    let total = contributions.iter().map(|&c| i32::from(c)).sum();
    Ok(ScoreCard {
        prompt_id: prompt_id.to_string(),
        image_index,
        contributions,
        total,
    })
}

/// Every index attaining the maximum total, ascending. Ties are kept.
pub fn select_best(cards: &[ScoreCard]) -> Vec<u32> {
    let Some(max) = cards.iter().map(|c| c.total).max() else {
        return Vec::new();
    };
    let mut best: Vec<u32> = cards
        .iter()
        .filter(|c| c.total == max)
        .map(|c| c.image_index)
        .collect();
    best.sort_unstable();
    best.dedup();
    best
}
