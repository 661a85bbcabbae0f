use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// Classified VQA answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parsed {
    Yes,
    No,
    Nan,
}

const YES: &[&str] = &["yes", "y", "yeah", "yep", "yup", "true", "correct", "affirmative"];
const NO: &[&str] = &["no", "n", "nope", "false", "incorrect", "negative"];
const NAN: &[&str] = &["nan", "n/a", "na"];

/// Result of [`classify_answer`]: `recognized` is false when no affirmation,
/// negation or explicit "nan" token led the answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classification {
    pub parsed: Parsed,
    pub recognized: bool,
}

fn leading_token(text: &str) -> &str {
    let trimmed = text.trim_start_matches(|c: char| !(c.is_alphanumeric() || c == '/'));
    let end = trimmed
        .find(|c: char| !(c.is_alphanumeric() || c == '/'))
        .unwrap_or(trimmed.len());
    &trimmed[..end]
}

pub fn classify_answer(raw: &str) -> Classification {
    let lower = raw.to_lowercase();
    let mut token = leading_token(&lower);
    if token == "answer" {
        let rest = &lower[lower.find("answer").map(|i| i + "answer".len()).unwrap_or(0)..];
        token = leading_token(rest);
    }
    let parsed = if YES.contains(&token) {
        Parsed::Yes
    } else if NO.contains(&token) {
        Parsed::No
    } else if NAN.contains(&token) {
        Parsed::Nan
    } else {
        return Classification {
            parsed: Parsed::Nan,
            recognized: false,
        };
    };
    Classification {
        parsed,
        recognized: true,
    }
}

/// Case-insensitive classification on the leading token; anything that is
/// not a clear yes/no is `Nan`.
pub fn parse_answer(raw: &str) -> Parsed {
    classify_answer(raw).parsed
}

/// As [`parse_answer`], bumping `unclassified` for unrecognized answers.
pub fn parse_answer_counted(raw: &str, unclassified: &AtomicU64) -> Parsed {
    let c = classify_answer(raw);
    if !c.recognized {
        unclassified.fetch_add(1, Ordering::Relaxed);
        log::warn!("unclassifiable VQA answer treated as nan: {raw:?}");
    }
    c.parsed
}
