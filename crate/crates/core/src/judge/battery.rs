use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use super::JudgeError;
use crate::promptgen::render_template;

pub const DEFAULT_BATTERY_ID: &str = "default";

/// Default framing of a battery question for the visual assistant.
pub const DEFAULT_JUDGE_TEMPLATE: &str = "\
The image was generated from the prompt: \"{prompt}\".\n\
{question}\n\
Begin your answer with Yes or No.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// "yes" earns a point.
    Positive,
    /// "yes" costs a point.
    Negative,
}

/// A battery entry before substitution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionSpec {
    pub question_id: String,
    /// Text with `{class_name}` / `{prompt}` placeholders.
    pub template: String,
    pub polarity: Polarity,
    /// A "no" on this earlier question forces the answer here to nan.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depends_on: Option<String>,
}

/// A battery question with its placeholders resolved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub text: String,
    pub polarity: Polarity,
    pub depends_on: Option<String>,
}

impl Question {
    pub fn new(id: &str, text: &str, polarity: Polarity, depends_on: Option<&str>) -> Self {
        Self {
            question_id: id.to_string(),
            text: text.to_string(),
            polarity,
            depends_on: depends_on.map(str::to_string),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Battery {
    pub battery_id: String,
    #[serde(rename = "question")]
    pub questions: Vec<QuestionSpec>,
}

impl Battery {
    /// Ids unique, every dependency names an earlier question.
    pub fn validate(&self) -> Result<(), JudgeError> {
        validate_order(
            self.questions
                .iter()
                .map(|q| (q.question_id.as_str(), q.depends_on.as_deref())),
        )
        .map_err(|m| JudgeError::InvalidBattery(format!("{}: {m}", self.battery_id)))?;
        if self.questions.is_empty() {
            return Err(JudgeError::InvalidBattery(format!(
                "{}: battery has no questions",
                self.battery_id
            )));
        }
        Ok(())
    }
}

pub(crate) fn validate_order<'a>(
    items: impl Iterator<Item = (&'a str, Option<&'a str>)>,
) -> Result<(), String> {
    let mut seen = HashSet::new();
    for (id, dep) in items {
        if let Some(dep) = dep {
            if !seen.contains(dep) {
                return Err(format!("{id} depends on {dep}, which is not an earlier question"));
            }
        }
        if !seen.insert(id) {
            return Err(format!("duplicate question id {id}"));
        }
    }
    Ok(())
}

fn spec(id: &str, template: &str, polarity: Polarity, depends_on: Option<&str>) -> QuestionSpec {
    QuestionSpec {
        question_id: id.to_string(),
        template: template.to_string(),
        polarity,
        depends_on: depends_on.map(str::to_string),
    }
}

/// The ten-question battery: Q2, Q6 and Q9 negative, Q4..Q7 conditional on Q3.
pub fn default_battery() -> Battery {
    use Polarity::*;
    let cond = "(If the answer to question 3 is 'No', answer 'Nan' to this question.) ";
    Battery {
        battery_id: DEFAULT_BATTERY_ID.to_string(),
        questions: vec![
            spec(
                "Q1",
                "Does this image look realistic, considering lighting, shadows, and reflections?",
                Positive,
                None,
            ),
            spec(
                "Q2",
                "Are there any subtle, unexpected patterns or behaviors in the image that might not be immediately noticeable?",
                Negative,
                None,
            ),
            spec("Q3", "can you clearly see {class_name} in the image?", Positive, None),
            spec(
                "Q4",
                &format!("{cond}Considering specific details like {{class_name}} posture, head and body shape, number of legs and form and the surroundings view, does the image look normal?"),
                Positive,
                Some("Q3"),
            ),
            spec(
                "Q5",
                &format!("{cond}If {{class_name}} is present, does it exhibit realistic and natural behavior?"),
                Positive,
                Some("Q3"),
            ),
            spec(
                "Q6",
                &format!("{cond}Are there any other objects or elements in the image that might be mistakenly identified as {{class_name}}?"),
                Negative,
                Some("Q3"),
            ),
            spec(
                "Q7",
                &format!("{cond}Does the representation of {{class_name}} in the image maintain anatomical accuracy (e.g., correct number of legs, tail, head)?"),
                Positive,
                Some("Q3"),
            ),
            spec(
                "Q8",
                "Do the colors in the image accurately match the description in the PROMPT {prompt}, including subtle variations and shades?",
                Positive,
                None,
            ),
            spec(
                "Q9",
                "Can you identify any deviations or abnormalities in the image that might be less obvious but still significant?",
                Negative,
                None,
            ),
            spec(
                "Q10",
                "Given PROMPT: {prompt}. Does the image respect fully the prompt description?",
                Positive,
                None,
            ),
        ],
    }
}

/// Batteries by id: the built-in default plus any `*.toml` battery files.
///
/// File format:
///
/// ```toml
/// battery_id = "short"
/// [[question]]
/// question_id = "Q1"
/// template = "can you clearly see {class_name} in the image?"
/// polarity = "positive"
/// ```
#[derive(Debug, Clone)]
pub struct BatteryRegistry {
    batteries: HashMap<String, Battery>,
}

impl Default for BatteryRegistry {
    fn default() -> Self {
        let mut batteries = HashMap::new();
        batteries.insert(DEFAULT_BATTERY_ID.to_string(), default_battery());
        Self { batteries }
    }
}

impl BatteryRegistry {
    pub fn with_dir(dir: &Path) -> Result<Self, JudgeError> {
        let mut reg = Self::default();
        let io = |e: std::io::Error| JudgeError::InvalidBattery(format!("{}: {e}", dir.display()));
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("toml") {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(io)?;
            let battery: Battery = toml::from_str(&text)
                .map_err(|e| JudgeError::InvalidBattery(format!("{}: {e}", path.display())))?;
            reg.insert(battery)?;
        }
        Ok(reg)
    }

    pub fn insert(&mut self, battery: Battery) -> Result<(), JudgeError> {
        battery.validate()?;
        self.batteries.insert(battery.battery_id.clone(), battery);
        Ok(())
    }

    pub fn get(&self, battery_id: &str) -> Result<&Battery, JudgeError> {
        self.batteries
            .get(battery_id)
            .ok_or_else(|| JudgeError::UnknownBattery(battery_id.to_string()))
    }

    pub fn contains(&self, battery_id: &str) -> bool {
        self.batteries.contains_key(battery_id)
    }

    /// Resolve `{class_name}` and `{prompt}` in every question, keeping
    /// battery order.
    pub fn build_battery(
        &self,
        class_name: &str,
        prompt_text: &str,
        battery_id: &str,
    ) -> Result<Vec<Question>, JudgeError> {
        let battery = self.get(battery_id)?;
        let vars = BTreeMap::from([
            ("class_name", class_name.to_string()),
            ("prompt", prompt_text.to_string()),
        ]);
        battery
            .questions
            .iter()
            .map(|q| {
                Ok(Question {
                    question_id: q.question_id.clone(),
                    text: render_template(&q.template, &vars)
                        .map_err(|e| JudgeError::Template(format!("{}: {e}", q.question_id)))?,
                    polarity: q.polarity,
                    depends_on: q.depends_on.clone(),
                })
            })
            .collect()
    }
}

/// Frame a resolved question for the VQA backend.
pub fn render_question(template: &str, question: &Question, prompt_text: &str) -> Result<String, JudgeError> {
    let vars = BTreeMap::from([
        ("question", question.text.clone()),
        ("prompt", prompt_text.to_string()),
        ("question_id", question.question_id.clone()),
    ]);
    render_template(template, &vars).map_err(|e| JudgeError::Template(e.to_string()))
}
