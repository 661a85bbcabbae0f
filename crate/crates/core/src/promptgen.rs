//! Class-conditioned diffusion prompt generation.
//!
//! The chat model is asked for newline-separated keyword prompts about one
//! class at a time. Lines are cleaned of list numbering, validated for class
//! containment and length, de-duplicated on normalized text, and topped up
//! until the requested count is met or the attempt budget (3x the count) runs
//! out.

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use crate::adapters::{BackendError, Backends, SamplingParams};

pub const DEFAULT_TEMPLATE_ID: &str = "default";
pub const DEFAULT_MAX_PROMPT_TOKENS: usize = 77;
pub const DEFAULT_PROMPTS_PER_CLASS: u32 = 100;
const ATTEMPT_BUDGET_FACTOR: usize = 3;

const DEFAULT_SYSTEM_TEMPLATE: &str = "\
You write prompts for a text-to-image diffusion model. Every prompt describes a \
realistic scene featuring {class_name} and must contain the word \"{class_name}\". \
Write each prompt as a comma-separated list of descriptive keywords covering the \
subject, its action, the setting, the lighting and the camera style. Apply these \
style directives to every prompt: {style_directives}. Return one prompt per line, \
without commentary.";

#[derive(Debug, thiserror::Error)]
pub enum PromptGenError {
    #[error("unknown template id '{0}'")]
    UnknownTemplate(String),
    #[error("template has unresolved placeholder {{{0}}}")]
    UnresolvedPlaceholder(String),
    #[error("invalid class seed: {0}")]
    InvalidSeed(String),
    #[error("template directory {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("chat backend failed while generating prompts for '{class_name}': {source}")]
    Backend {
        class_name: String,
        source: BackendError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSeed {
    pub class_name: String,
    #[serde(default = "default_prompt_count")]
    pub prompt_count: u32,
    #[serde(default = "default_style_directives")]
    pub style_directives: Vec<String>,
}

fn default_prompt_count() -> u32 {
    DEFAULT_PROMPTS_PER_CLASS
}

pub fn default_style_directives() -> Vec<String> {
    vec!["photo-realistic".to_string()]
}

impl ClassSeed {
    pub fn new(class_name: impl Into<String>, prompt_count: u32) -> Self {
        Self {
            class_name: class_name.into(),
            prompt_count,
            style_directives: default_style_directives(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.class_name.trim().is_empty() {
            return Err("class_name must not be empty".into());
        }
        if self.prompt_count == 0 {
            return Err(format!(
                "prompt_count for '{}' must be >= 1",
                self.class_name
            ));
        }
        Ok(())
    }
}

/// One diffusion prompt conditioned on a class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "PromptLine", into = "PromptLine")]
pub struct PromptRecord {
    pub prompt_id: String,
    pub class_name: String,
    pub text: String,
    pub sampling: SamplingParams,
    pub created_at: DateTime<Utc>,
}

impl PromptRecord {
    /// A record with default sampling, stamped now.
    pub fn new(prompt_id: &str, class_name: &str, text: &str) -> Self {
        Self {
            prompt_id: prompt_id.to_string(),
            class_name: class_name.to_string(),
            text: text.to_string(),
            sampling: SamplingParams::default(),
            created_at: Utc::now(),
        }
    }
}

/// On-disk shape of a [`PromptRecord`] (one `prompts.jsonl` line).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PromptLine {
    prompt_id: String,
    class_name: String,
    text: String,
    temperature: f64,
    top_p: f64,
    #[serde(default = "default_max_tokens")]
    max_tokens: u32,
    created_at: DateTime<Utc>,
}

fn default_max_tokens() -> u32 {
    SamplingParams::default().max_tokens
}

impl From<PromptLine> for PromptRecord {
    fn from(l: PromptLine) -> Self {
        Self {
            prompt_id: l.prompt_id,
            class_name: l.class_name,
            text: l.text,
            sampling: SamplingParams {
                temperature: l.temperature,
                top_p: l.top_p,
                max_tokens: l.max_tokens,
            },
            created_at: l.created_at,
        }
    }
}

impl From<PromptRecord> for PromptLine {
    fn from(r: PromptRecord) -> Self {
        Self {
            prompt_id: r.prompt_id,
            class_name: r.class_name,
            text: r.text,
            temperature: r.sampling.temperature,
            top_p: r.sampling.top_p,
            max_tokens: r.sampling.max_tokens,
            created_at: r.created_at,
        }
    }
}

// ---------------------------------------------------------------------------
// templates
// ---------------------------------------------------------------------------

/// Substitute `{name}` placeholders. Braces not enclosing an identifier are
/// left alone; an identifier without a value is an error.
pub fn render_template(
    template: &str,
    vars: &BTreeMap<&str, String>,
) -> Result<String, PromptGenError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let ident_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        let is_placeholder = ident_len > 0
            && after[ident_len..].starts_with('}')
            && !after.starts_with(|c: char| c.is_ascii_digit());
        if is_placeholder {
            let name = &after[..ident_len];
            let value = vars
                .get(name)
                .ok_or_else(|| PromptGenError::UnresolvedPlaceholder(name.to_string()))?;
            out.push_str(value);
            rest = &after[ident_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// System-prompt templates by id: a built-in `default`, plus every `*.txt`
/// file of an optional directory (file stem = id).
#[derive(Debug, Clone)]
pub struct TemplateRegistry {
    templates: HashMap<String, String>,
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        let mut templates = HashMap::new();
        templates.insert(
            DEFAULT_TEMPLATE_ID.to_string(),
            DEFAULT_SYSTEM_TEMPLATE.to_string(),
        );
        Self { templates }
    }
}

impl TemplateRegistry {
    pub fn with_dir(dir: &Path) -> Result<Self, PromptGenError> {
        let mut reg = Self::default();
        let io = |source| PromptGenError::Io {
            path: dir.display().to_string(),
            source,
        };
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = std::fs::read_to_string(&path).map_err(io)?;
            reg.templates.insert(id.to_string(), text.trim_end().to_string());
        }
        Ok(reg)
    }

    pub fn insert(&mut self, id: impl Into<String>, template: impl Into<String>) {
        self.templates.insert(id.into(), template.into());
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.templates.get(id).map(String::as_str)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.templates.contains_key(id)
    }
}

pub fn build_system_prompt(
    seed: &ClassSeed,
    template_id: &str,
    registry: &TemplateRegistry,
) -> Result<String, PromptGenError> {
    let template = registry
        .get(template_id)
        .ok_or_else(|| PromptGenError::UnknownTemplate(template_id.to_string()))?;
    let directives = if seed.style_directives.is_empty() {
        "none".to_string()
    } else {
        seed.style_directives.join(", ")
    };
    let vars = BTreeMap::from([
        ("class_name", seed.class_name.clone()),
        ("style_directives", directives),
        ("prompt_count", seed.prompt_count.to_string()),
    ]);
    render_template(template, &vars)
}

/// What the prompts are for; validation prompts are requested separately so
/// they never coincide with training prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptPurpose {
    Training,
    Validation,
}

fn user_prompt(class_name: &str, count: usize, batch: usize, purpose: PromptPurpose) -> String {
    let kind = match purpose {
        PromptPurpose::Training => "",
        PromptPurpose::Validation => "held-out validation ",
    };
    format!(
        "Generate {count} distinct {kind}prompts about \"{class_name}\". \
         Write one prompt per line. Batch {batch}."
    )
}

// ---------------------------------------------------------------------------
// parsing and validation
// ---------------------------------------------------------------------------

/// Split a completion into candidate prompts, dropping blank lines and list
/// markers such as `1.`, `2)`, `-`, `*`.
pub fn parse_completion(text: &str) -> Vec<String> {
    text.lines().filter_map(clean_line).collect()
}

fn clean_line(line: &str) -> Option<String> {
    let mut s = line.trim();
    s = s.trim_start_matches(['-', '*', '•', '#']).trim_start();
    let digits = s.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let tail = &s[digits..];
        if let Some(stripped) = tail.strip_prefix(['.', ')', ':']) {
            s = stripped.trim_start();
        }
    } else if let Some(inner) = s.strip_prefix('(') {
        let d = inner.chars().take_while(char::is_ascii_digit).count();
        if d > 0 && inner[d..].starts_with(')') {
            s = inner[d + 1..].trim_start();
        }
    }
    let s = s.trim_matches(|c| c == '"' || c == '\'' || c == '`').trim();
    (!s.is_empty()).then(|| s.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    Empty,
    MissingClass,
    TooLong { tokens: usize, limit: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptVerdict {
    Accept,
    Reject(RejectReason),
}

pub fn validate_prompt(text: &str, class_name: &str, max_tokens: usize) -> PromptVerdict {
    if text.trim().is_empty() {
        return PromptVerdict::Reject(RejectReason::Empty);
    }
    if !text.to_lowercase().contains(&class_name.to_lowercase()) {
        return PromptVerdict::Reject(RejectReason::MissingClass);
    }
    let tokens = text.split_whitespace().count();
    if tokens > max_tokens {
        return PromptVerdict::Reject(RejectReason::TooLong {
            tokens,
            limit: max_tokens,
        });
    }
    PromptVerdict::Accept
}

fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn slug(class_name: &str) -> String {
    let mut s: String = class_name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    while s.contains("--") {
        s = s.replace("--", "-");
    }
    let s = s.trim_matches('-').to_string();
    if s.is_empty() {
        "class".to_string()
    } else {
        s
    }
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PromptGenOptions {
    pub template_id: String,
    pub max_prompt_tokens: usize,
    /// Upper bound on prompts requested per chat call.
    pub max_per_request: usize,
    pub purpose: PromptPurpose,
    /// Prepended to every prompt id (e.g. `val-`).
    pub id_prefix: String,
}

impl Default for PromptGenOptions {
    fn default() -> Self {
        Self {
            template_id: DEFAULT_TEMPLATE_ID.to_string(),
            max_prompt_tokens: DEFAULT_MAX_PROMPT_TOKENS,
            max_per_request: 25,
            purpose: PromptPurpose::Training,
            id_prefix: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub class_name: String,
    pub requested: u32,
    pub produced: u32,
}

#[derive(Debug, Clone, Default)]
pub struct PromptGenOutcome {
    pub records: Vec<PromptRecord>,
    pub shortfalls: Vec<Shortfall>,
    pub rejected_lines: usize,
    pub duplicate_lines: usize,
}

impl PromptGenOutcome {
    pub fn is_complete(&self) -> bool {
        self.shortfalls.is_empty()
    }
}

struct ClassBatch {
    texts: Vec<String>,
    rejected: usize,
    duplicates: usize,
}

fn generate_for_class(
    seed: &ClassSeed,
    system: &str,
    params: SamplingParams,
    backends: &Backends,
    opts: &PromptGenOptions,
) -> Result<ClassBatch, PromptGenError> {
    let wanted = seed.prompt_count as usize;
    let budget = ATTEMPT_BUDGET_FACTOR * wanted;
    let mut seen = HashSet::new();
    let mut texts = Vec::with_capacity(wanted);
    let (mut attempts, mut rejected, mut duplicates) = (0usize, 0usize, 0usize);
    let mut batch = 0usize;
    while texts.len() < wanted && attempts < budget {
        batch += 1;
        let ask = (wanted - texts.len()).min(opts.max_per_request.max(1));
        let user = user_prompt(&seed.class_name, ask, batch, opts.purpose);
        let completion =
            backends
                .chat_complete(system, &user, params)
                .map_err(|source| PromptGenError::Backend {
                    class_name: seed.class_name.clone(),
                    source,
                })?;
        let lines = parse_completion(&completion);
        if lines.is_empty() {
            attempts += 1;
            continue;
        }
        for line in lines {
            if texts.len() == wanted || attempts == budget {
                break;
            }
            attempts += 1;
            match validate_prompt(&line, &seed.class_name, opts.max_prompt_tokens) {
                PromptVerdict::Accept => {
                    if seen.insert(normalize(&line)) {
                        texts.push(line);
                    } else {
                        duplicates += 1;
                    }
                }
                PromptVerdict::Reject(reason) => {
                    log::debug!("rejected prompt line {line:?}: {reason:?}");
                    rejected += 1;
                }
            }
        }
    }
    Ok(ClassBatch {
        texts,
        rejected,
        duplicates,
    })
}

/// Generate `prompt_count` prompts per seed. Classes run concurrently; ids
/// are assigned afterwards in seed order (`<prefix><class-slug>-NNNN`).
pub fn generate_prompts(
    seeds: &[ClassSeed],
    params: SamplingParams,
    backends: &Backends,
    registry: &TemplateRegistry,
    opts: &PromptGenOptions,
) -> Result<PromptGenOutcome, PromptGenError> {
    if seeds.is_empty() {
        return Err(PromptGenError::InvalidSeed("no class seeds given".into()));
    }
    for s in seeds {
        s.validate().map_err(PromptGenError::InvalidSeed)?;
    }
    params.validate().map_err(PromptGenError::InvalidSeed)?;
    let systems = seeds
        .iter()
        .map(|s| build_system_prompt(s, &opts.template_id, registry))
        .collect::<Result<Vec<_>, _>>()?;
    let batches = seeds
        .par_iter()
        .zip(systems.par_iter())
        .map(|(seed, system)| generate_for_class(seed, system, params, backends, opts))
        .collect::<Vec<_>>();

    let created_at = Utc::now();
    let mut outcome = PromptGenOutcome::default();
    let mut counters: HashMap<String, usize> = HashMap::new();
    for (seed, batch) in seeds.iter().zip(batches) {
        let batch = batch?;
        outcome.rejected_lines += batch.rejected;
        outcome.duplicate_lines += batch.duplicates;
        if batch.texts.len() < seed.prompt_count as usize {
            outcome.shortfalls.push(Shortfall {
                class_name: seed.class_name.clone(),
                requested: seed.prompt_count,
                produced: batch.texts.len() as u32,
            });
        }
        let slug = slug(&seed.class_name);
        for text in batch.texts {
            let n = counters.entry(slug.clone()).or_insert(0);
            *n += 1;
            outcome.records.push(PromptRecord {
                prompt_id: format!("{}{slug}-{:04}", opts.id_prefix, n),
                class_name: seed.class_name.clone(),
                text,
                sampling: params,
                created_at,
            });
        }
    }
    Ok(outcome)
}

/// Split `total` prompts across classes as evenly as possible, earlier
/// classes taking the remainder.
pub fn spread_counts(classes: &[ClassSeed], total: u32) -> Vec<ClassSeed> {
    let k = classes.len() as u32;
    if k == 0 {
        return Vec::new();
    }
    classes
        .iter()
        .enumerate()
        .map(|(i, c)| ClassSeed {
            prompt_count: total / k + u32::from((i as u32) < total % k),
            ..c.clone()
        })
        .filter(|c| c.prompt_count > 0)
        .collect()
}
