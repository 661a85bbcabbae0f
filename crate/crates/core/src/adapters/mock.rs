//! Deterministic stand-ins for the five model capabilities.
//!
//! Each mock is a pure function of its request, its configured seed and an
//! optional JSON script. Scripts let tests pin exact answers, detections and
//! scores; everything not scripted falls back to hash-derived defaults.

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

use super::types::*;
use super::{ChatBackend, DetectorBackend, ScorerBackend, TextToImageBackend, VqaBackend};
use crate::digest::{seed_bytes, unit_interval};
use crate::judge::{parse_answer, Parsed};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub chat: ChatScript,
    #[serde(default)]
    pub vqa: VqaScript,
    #[serde(default)]
    pub detector: DetectorScript,
    #[serde(default)]
    pub scorer: ScorerScript,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatScript {
    /// Canned completions keyed by the exact user prompt.
    #[serde(default)]
    pub responses: HashMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedAnswer {
    pub content_id: String,
    pub question_id: String,
    pub answer: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VqaScript {
    #[serde(default)]
    pub answers: Vec<ScriptedAnswer>,
    /// Probability that an unscripted default answer is inverted.
    #[serde(default)]
    pub flip_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedDetection {
    pub content_id: String,
    pub class_label: String,
    pub confidence: f64,
    #[serde(default)]
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorFallback {
    /// One detection per requested class, confidence hashed from
    /// `(seed, content_id, class)`.
    #[default]
    Hashed,
    Empty,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorScript {
    /// Images listed here report exactly their scripted detections.
    #[serde(default)]
    pub detections: Vec<ScriptedDetection>,
    #[serde(default)]
    pub fallback: DetectorFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedScore {
    /// `"*"` matches any image.
    pub content_id: String,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScorerScript {
    #[serde(default)]
    pub scores: Vec<ScriptedScore>,
}

// ---------------------------------------------------------------------------
// chat
// ---------------------------------------------------------------------------

const GROUPS: &[&str] = &[
    "a lone", "two", "a herd of", "a young", "an old", "three", "a family of", "a majestic",
];
const ACTIONS: &[&str] = &[
    "walking slowly",
    "drinking at a waterhole",
    "resting in the shade",
    "crossing a river",
    "grazing peacefully",
    "standing tall",
    "playing in the mud",
    "looking at the camera",
    "eating leaves",
    "running across the plain",
];
const SETTINGS: &[&str] = &[
    "African savanna",
    "dense jungle clearing",
    "dusty dirt road",
    "misty riverbank",
    "open grassland",
    "rocky hillside",
    "acacia woodland",
    "wildlife reserve",
    "dry lake bed",
    "lush green valley",
];
const LIGHTING: &[&str] = &[
    "golden hour",
    "soft morning light",
    "overcast sky",
    "dramatic sunset",
    "bright midday sun",
    "blue hour",
];
const STYLES: &[&str] = &[
    "photo-realistic",
    "high detail, 8k",
    "National Geographic style photo",
    "sharp focus, realistic textures",
    "telephoto lens, realistic",
];

/// Mock LLM. Asked for "N ... \"Subject\"", it answers N numbered keyword
/// prompts about the quoted subject.
pub struct MockChat {
    model_id: String,
    seed: u64,
    script: ChatScript,
}

impl MockChat {
    pub fn new(model_id: impl Into<String>, seed: u64) -> Self {
        Self {
            model_id: model_id.into(),
            seed,
            script: ChatScript::default(),
        }
    }

    pub fn with_script(mut self, script: ChatScript) -> Self {
        self.script = script;
        self
    }
}

fn first_integer(text: &str) -> Option<usize> {
    let start = text.find(|c: char| c.is_ascii_digit())?;
    let digits: String = text[start..]
        .chars()
        .take_while(char::is_ascii_digit)
        .collect();
    digits.parse().ok()
}

fn first_quoted(text: &str) -> Option<&str> {
    let start = text.find('"')? + 1;
    let len = text[start..].find('"')?;
    Some(&text[start..start + len]).filter(|s| !s.is_empty())
}

impl ChatBackend for MockChat {
    fn complete(&self, req: &ChatRequest) -> BackendResult<String> {
        if let Some(canned) = self.script.responses.get(&req.user) {
            return Ok(canned.clone());
        }
        let count = first_integer(&req.user).unwrap_or(1).clamp(1, 500);
        let subject = first_quoted(&req.user).unwrap_or("subject");
        let mut rng = ChaCha8Rng::from_seed(seed_bytes([
            self.model_id.as_bytes(),
            &self.seed.to_le_bytes(),
            req.system.as_bytes(),
            req.user.as_bytes(),
            &req.params.temperature.to_bits().to_le_bytes(),
            &req.params.top_p.to_bits().to_le_bytes(),
            &req.params.max_tokens.to_le_bytes(),
        ]));
        let mut pick = |list: &[&'static str]| *list.choose(&mut rng).expect("non-empty");
        let lines: Vec<String> = (1..=count)
            .map(|i| {
                format!(
                    "{i}. {} {subject} {}, {}, {}, {}",
                    pick(GROUPS),
                    pick(ACTIONS),
                    pick(SETTINGS),
                    pick(LIGHTING),
                    pick(STYLES)
                )
            })
            .collect();
        Ok(lines.join("\n"))
    }
}

// ---------------------------------------------------------------------------
// text-to-image
// ---------------------------------------------------------------------------

fn render(seed: [u8; 32], width: u32, height: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::from_seed(seed);
    let mut corner = || -> [f32; 3] { [rng.random(), rng.random(), rng.random()] };
    let (c00, c10, c01, c11) = (corner(), corner(), corner(), corner());
    let (wf, hf) = ((width.max(2) - 1) as f32, (height.max(2) - 1) as f32);
    let mut img = RgbImage::from_fn(width, height, |x, y| {
        let (u, v) = (x as f32 / wf, y as f32 / hf);
        let mut px = [0u8; 3];
        for (ch, out) in px.iter_mut().enumerate() {
            let top = c00[ch] * (1.0 - u) + c10[ch] * u;
            let bottom = c01[ch] * (1.0 - u) + c11[ch] * u;
            *out = ((top * (1.0 - v) + bottom * v) * 255.0).round() as u8;
        }
        Rgb(px)
    });
    let blocks = rng.random_range(2..6);
    for _ in 0..blocks {
        let bw = rng.random_range(1..=width.div_ceil(2));
        let bh = rng.random_range(1..=height.div_ceil(2));
        let x0 = rng.random_range(0..=width - bw);
        let y0 = rng.random_range(0..=height - bh);
        let color = Rgb([rng.random(), rng.random(), rng.random()]);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                img.put_pixel(x, y, color);
            }
        }
    }
    img
}

fn blend(base: &mut RgbImage, overlay: &RgbImage, scale: f64) {
    for (b, o) in base.pixels_mut().zip(overlay.pixels()) {
        for ch in 0..3 {
            let v = (1.0 - scale) * b.0[ch] as f64 + scale * o.0[ch] as f64;
            b.0[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Mock diffusion model. Seeded requests depend only on the seed; unseeded
/// ones draw from the run salt, standing in for free-running sampling.
pub struct MockTextToImage {
    model_id: String,
    seed: u64,
    salt: String,
}

impl MockTextToImage {
    pub fn new(model_id: impl Into<String>, seed: u64, salt: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            seed,
            salt: salt.into(),
        }
    }

    fn noise_key(&self, req: &ImageRequest) -> Vec<u8> {
        match req.seed {
            Some(s) => [b"seeded:".as_slice(), &s.to_le_bytes()].concat(),
            None => [
                b"free:".as_slice(),
                &self.seed.to_le_bytes(),
                self.salt.as_bytes(),
            ]
            .concat(),
        }
    }
}

impl TextToImageBackend for MockTextToImage {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn generate(&self, req: &ImageRequest) -> BackendResult<RgbImage> {
        if req.width == 0 || req.height == 0 {
            return Err(BackendError::Rejected("zero-sized resolution".into()));
        }
        let noise = self.noise_key(req);
        let index = req.index.to_le_bytes();
        let mut img = render(
            seed_bytes([
                self.model_id.as_bytes(),
                &noise,
                req.prompt.as_bytes(),
                &index,
            ]),
            req.width,
            req.height,
        );
        if let Some(adapter) = req.adapter.as_ref().filter(|a| a.scale > 0.0) {
            let overlay = render(
                seed_bytes([
                    adapter.adapter_digest.as_bytes(),
                    &noise,
                    req.prompt.as_bytes(),
                    &index,
                ]),
                req.width,
                req.height,
            );
            blend(&mut img, &overlay, adapter.scale);
        }
        Ok(img)
    }
}

// ---------------------------------------------------------------------------
// VQA
// ---------------------------------------------------------------------------

/// Mock visual assistant keyed by `(content_id, question_id)`.
///
/// Unscripted questions get the polarity-aware default ("Yes." for positive,
/// "No." for negative), optionally inverted with probability `flip_rate`.
/// A question whose dependency resolves to "no" answers "Nan".
pub struct MockVqa {
    seed: u64,
    answers: HashMap<(String, String), String>,
    flip_rate: f64,
}

impl MockVqa {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            answers: HashMap::new(),
            flip_rate: 0.0,
        }
    }

    pub fn with_script(mut self, script: VqaScript) -> Self {
        self.flip_rate = script.flip_rate;
        for a in script.answers {
            self.answers.insert((a.content_id, a.question_id), a.answer);
        }
        self
    }

    pub fn script_answer(
        &mut self,
        content_id: impl Into<String>,
        question_id: impl Into<String>,
        answer: impl Into<String>,
    ) {
        self.answers
            .insert((content_id.into(), question_id.into()), answer.into());
    }

    fn resolve(&self, content_id: &str, question_id: &str, positive: bool) -> String {
        if let Some(a) = self.answers.get(&(content_id.to_string(), question_id.to_string())) {
            return a.clone();
        }
        let flip = self.flip_rate > 0.0
            && unit_interval([
                self.seed.to_le_bytes().as_slice(),
                content_id.as_bytes(),
                question_id.as_bytes(),
            ]) < self.flip_rate;
        if positive != flip {
            "Yes.".to_string()
        } else {
            "No.".to_string()
        }
    }
}

impl VqaBackend for MockVqa {
    fn answer(&self, req: &VqaRequest) -> BackendResult<String> {
        let cid = req.image.content_id.as_str();
        let Some(hint) = &req.hint else {
            return Ok(self.resolve(cid, &req.question, true));
        };
        if let Some(a) = self.answers.get(&(cid.to_string(), hint.question_id.clone())) {
            return Ok(a.clone());
        }
        if let Some(dep) = &hint.depends_on {
            if parse_answer(&self.resolve(cid, &dep.question_id, dep.positive)) == Parsed::No {
                return Ok("Nan".to_string());
            }
        }
        Ok(self.resolve(cid, &hint.question_id, hint.positive))
    }
}

// ---------------------------------------------------------------------------
// detector
// ---------------------------------------------------------------------------

pub struct MockDetector {
    seed: u64,
    scripted: HashMap<String, Vec<ScriptedDetection>>,
    fallback: DetectorFallback,
}

impl MockDetector {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            scripted: HashMap::new(),
            fallback: DetectorFallback::Hashed,
        }
    }

    pub fn with_script(mut self, script: DetectorScript) -> Self {
        self.fallback = script.fallback;
        for d in script.detections {
            self.scripted.entry(d.content_id.clone()).or_default().push(d);
        }
        self
    }

    pub fn script_detection(&mut self, content_id: &str, class_label: &str, confidence: f64) {
        self.scripted
            .entry(content_id.to_string())
            .or_default()
            .push(ScriptedDetection {
                content_id: content_id.to_string(),
                class_label: class_label.to_string(),
                confidence,
                bbox: None,
            });
    }

    /// The confidence the hashed fallback reports for `(content_id, class)`.
    pub fn hashed_confidence(&self, content_id: &str, class_name: &str) -> f64 {
        unit_interval([
            self.seed.to_le_bytes().as_slice(),
            content_id.as_bytes(),
            class_name.to_lowercase().as_bytes(),
        ])
    }
}

impl DetectorBackend for MockDetector {
    fn detect(&self, req: &DetectRequest) -> BackendResult<Vec<Detection>> {
        let img = &req.image;
        let full = BBox {
            x: 0.0,
            y: 0.0,
            w: img.width as f64,
            h: img.height as f64,
        };
        if let Some(list) = self.scripted.get(&img.content_id) {
            return Ok(list
                .iter()
                .filter(|d| {
                    req.class_names
                        .iter()
                        .any(|c| c.eq_ignore_ascii_case(&d.class_label))
                })
                .map(|d| Detection {
                    class_label: d.class_label.clone(),
                    confidence: d.confidence,
                    bbox: d.bbox.unwrap_or(full),
                })
                .collect());
        }
        if self.fallback == DetectorFallback::Empty {
            return Ok(Vec::new());
        }
        Ok(req
            .class_names
            .iter()
            .map(|class| {
                let u = |tag: &str| {
                    unit_interval([
                        self.seed.to_le_bytes().as_slice(),
                        img.content_id.as_bytes(),
                        class.to_lowercase().as_bytes(),
                        tag.as_bytes(),
                    ])
                };
                let w = (0.2 + 0.6 * u("w")) * img.width as f64;
                let h = (0.2 + 0.6 * u("h")) * img.height as f64;
                Detection {
                    class_label: class.clone(),
                    confidence: self.hashed_confidence(&img.content_id, class),
                    bbox: BBox {
                        x: (u("x") * (img.width as f64 - w)).floor(),
                        y: (u("y") * (img.height as f64 - h)).floor(),
                        w: w.floor(),
                        h: h.floor(),
                    },
                }
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// scorer
// ---------------------------------------------------------------------------

pub struct MockScorer {
    seed: u64,
    scores: HashMap<(String, String), f64>,
}

impl MockScorer {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            scores: HashMap::new(),
        }
    }

    pub fn with_script(mut self, script: ScorerScript) -> Self {
        for s in script.scores {
            self.scores.insert((s.content_id, s.text), s.score);
        }
        self
    }

    pub fn script_score(&mut self, content_id: &str, text: &str, score: f64) {
        self.scores
            .insert((content_id.to_string(), text.to_string()), score);
    }
}

impl ScorerBackend for MockScorer {
    fn score(&self, req: &ScoreRequest) -> BackendResult<f64> {
        let exact = (req.image.content_id.clone(), req.text.clone());
        let any = ("*".to_string(), req.text.clone());
        if let Some(s) = self.scores.get(&exact).or_else(|| self.scores.get(&any)) {
            return Ok(*s);
        }
        Ok(0.15
            + 0.25
                * unit_interval([
                    self.seed.to_le_bytes().as_slice(),
                    req.image.content_id.as_bytes(),
                    req.text.as_bytes(),
                ]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chat_req(user: &str) -> ChatRequest {
        ChatRequest {
            system: "sys".into(),
            user: user.into(),
            params: SamplingParams::default(),
        }
    }

    fn image(cid: &str) -> ImageRef {
        ImageRef {
            content_id: cid.into(),
            width: 512,
            height: 512,
            storage_path: format!("{cid}.png"),
        }
    }

    #[test]
    fn chat_is_deterministic_per_seed() {
        let req = chat_req("Generate 3 distinct prompts about \"Elephant\".");
        let a = MockChat::new("m", 0).complete(&req).unwrap();
        let b = MockChat::new("m", 0).complete(&req).unwrap();
        let c = MockChat::new("m", 1).complete(&req).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.lines().count(), 3);
        assert!(a.lines().all(|l| l.contains("Elephant")));
    }

    #[test]
    fn chat_script_wins() {
        let mut script = ChatScript::default();
        script.responses.insert("u".into(), "canned".into());
        let chat = MockChat::new("m", 0).with_script(script);
        assert_eq!(chat.complete(&chat_req("u")).unwrap(), "canned");
    }

    #[test]
    fn t2i_seeded_and_salted() {
        let req = ImageRequest {
            prompt: "two elephants".into(),
            width: 32,
            height: 16,
            seed: Some(7),
            index: 0,
            adapter: None,
        };
        let a = MockTextToImage::new("sd", 0, "run-a");
        let b = MockTextToImage::new("sd", 0, "run-b");
        assert_eq!(a.generate(&req).unwrap(), b.generate(&req).unwrap());
        let free = ImageRequest { seed: None, ..req.clone() };
        assert_ne!(a.generate(&free).unwrap(), b.generate(&free).unwrap());
        let img = a.generate(&req).unwrap();
        assert_eq!(img.dimensions(), (32, 16));
    }

    #[test]
    fn vqa_defaults_follow_polarity_and_dependency() {
        let mut vqa = MockVqa::new(0);
        vqa.script_answer("img", "Q3", "No, I cannot see it.");
        let ask = |qid: &str, positive: bool, dep: Option<(&str, bool)>| {
            vqa.answer(&VqaRequest {
                image: image("img"),
                question: "?".into(),
                hint: Some(QuestionHint {
                    question_id: qid.into(),
                    positive,
                    depends_on: dep.map(|(d, p)| DependencyHint {
                        question_id: d.into(),
                        positive: p,
                    }),
                }),
            })
            .unwrap()
        };
        assert_eq!(ask("Q1", true, None), "Yes.");
        assert_eq!(ask("Q2", false, None), "No.");
        assert_eq!(ask("Q4", true, Some(("Q3", true))), "Nan");
        assert_eq!(ask("Q3", true, None), "No, I cannot see it.");
    }

    #[test]
    fn detector_restricts_vocabulary() {
        let mut det = MockDetector::new(0);
        det.script_detection("img", "Elephant", 0.72);
        let req = |classes: &[&str]| DetectRequest {
            image: image("img"),
            class_names: classes.iter().map(|s| s.to_string()).collect(),
        };
        let found = det.detect(&req(&["Elephant"])).unwrap();
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].confidence, 0.72);
        assert!(det.detect(&req(&["Giraffe"])).unwrap().is_empty());

        let hashed = MockDetector::new(3);
        let two = hashed.detect(&DetectRequest {
            image: image("other"),
            class_names: vec!["Elephant".into(), "Giraffe".into()],
        });
        let two = two.unwrap();
        assert_eq!(two.len(), 2);
        for d in &two {
            assert!(d.validate(512, 512).is_ok());
            assert!(["Elephant", "Giraffe"].contains(&d.class_label.as_str()));
        }
    }

    #[test]
    fn scorer_script_lookup() {
        let mut s = MockScorer::new(0);
        s.script_score("A", "two elephants", 0.31);
        let req = ScoreRequest {
            image: image("A"),
            text: "two elephants".into(),
        };
        assert_eq!(s.score(&req).unwrap(), 0.31);
        let other = ScoreRequest {
            image: image("B"),
            text: "two elephants".into(),
        };
        assert_eq!(s.score(&other).unwrap(), s.score(&other).unwrap());
    }
}
