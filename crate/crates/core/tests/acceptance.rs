//! Acceptance criteria. Each criterion prints one PASS/FAIL line with its
//! runtime; the test fails if any criterion fails or exceeds its budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ccsr::adapters::mock::{MockVqa, ScriptedAnswer, VqaScript};
use ccsr::adapters::{BBox, CallLog, Detection, ImageStore, TextToImageBackend};
use ccsr::config::RunConfig;
use ccsr::dataset::{DatasetBundle, RunManifest, Stage, StageStatus};
use ccsr::detectfilter::{max_confidence, select_optimal, CandidateEvidence, FilterPolicy, TieBreak};
use ccsr::eval::{classify_difference, compare, Outcome, ScoreSample};
use ccsr::finetune::{build_train_config, scaled_backend, AdapterWeightsRef, Precision};
use ccsr::generation::{generate_candidates, GenerationRequest, Resolution};
use ccsr::judge::{
    judge_candidate_set, score_image, AnswerRecord, BatteryRegistry, JudgeOptions,
    NegativeAnswerCredit, Parsed, Polarity, Question,
};
use ccsr::promptgen::PromptRecord;
use ccsr::Backends;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check, Duration);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn mock_backends(root: &Path, salt: &str) -> Backends {
    Backends::mock(ImageStore::new(root), Arc::new(CallLog::in_memory()), 11, salt)
}

// ---------------------------------------------------------------------------
// 1. worked scoring example
// ---------------------------------------------------------------------------

/// Per-question contributions for ten images of one prompt.
const TABLE: [[i8; 10]; 10] = [
    [1, -1, 1, 1, 1, 0, 1, 1, 1, 1],
    [1, -1, 1, 1, 1, 0, 1, 1, 1, 1],
    [1, -1, 1, 1, 1, 0, 1, 1, 1, 1],
    [1, 0, 0, 0, 0, 0, 1, 1, 1, 1],
    [1, 0, 1, 1, 1, 0, 1, 1, 1, 1],
    [1, -1, 1, 1, 1, 0, 1, 1, 1, 1],
    [1, 0, 1, 1, 1, 0, 1, 1, 1, 1],
    [1, 0, 1, 1, 1, 0, 1, 1, 1, 1],
    [1, -1, 1, 1, 1, 0, 1, 1, 1, 1],
    [1, 0, 1, 1, 1, 0, 1, 1, 1, 1],
];
const TABLE_TOTALS: [i32; 10] = [7, 7, 7, 5, 8, 7, 8, 8, 7, 8];
/// One-based, as the images are numbered in the worked example.
const TABLE_BEST: [u32; 4] = [5, 7, 8, 10];

/// Raw VQA answer that yields `cell` for a question of `polarity`. Zero
/// cells are answered "Nan" so conditional questions stay unconstrained.
fn answer_for(cell: i8, polarity: Polarity) -> &'static str {
    match (polarity, cell) {
        (_, 0) => "Nan",
        (Polarity::Positive, 1) => "Yes",
        (Polarity::Negative, -1) => "Yes",
        (Polarity::Negative, 1) => "No",
        _ => unreachable!("cell {cell} impossible for {polarity:?}"),
    }
}

fn worked_example() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let backends = mock_backends(dir.path(), "table");
    let prompt = PromptRecord::new(
        "p3",
        "Elephant",
        "a herd of elephants crossing a river at golden hour, photo-realistic",
    );
    let t2i = backends.text2image.clone();
    let set = generate_candidates(
        &prompt,
        &GenerationRequest {
            n: 10,
            resolution: Resolution::square(16),
            salt: "table",
            dest_dir: "images/p3".into(),
        },
        &backends,
        t2i.as_ref(),
        None,
    )
    .map_err(|e| e.to_string())?;
    let battery = BatteryRegistry::default()
        .build_battery(&prompt.class_name, &prompt.text, "default")
        .map_err(|e| e.to_string())?;
    ensure!(battery.len() == 10, "battery has {} questions", battery.len());

    let mut script = VqaScript::default();
    for (row, cid) in TABLE.iter().zip(&set.content_ids) {
        for (q, &cell) in battery.iter().zip(row) {
            script.answers.push(ScriptedAnswer {
                content_id: cid.clone(),
                question_id: q.question_id.clone(),
                answer: answer_for(cell, q.polarity).into(),
            });
        }
    }
    let backends = backends.with_vqa(Arc::new(MockVqa::new(0).with_script(script)));
    let judged = judge_candidate_set(&set, &prompt.text, &battery, &backends, &JudgeOptions::default())
        .map_err(|e| e.to_string())?;

    let totals: Vec<i32> = judged.cards.iter().map(|c| c.total).collect();
    ensure!(totals == TABLE_TOTALS, "totals {totals:?}");
    for (card, row) in judged.cards.iter().zip(TABLE) {
        ensure!(card.contributions == row, "image {} contributions {:?}", card.image_index + 1, card.contributions);
    }
    let best: Vec<u32> = judged.best_indices().iter().map(|i| i + 1).collect();
    ensure!(best == TABLE_BEST, "best {best:?}");
    Ok(format!("totals {totals:?}, best {best:?}"))
}

// ---------------------------------------------------------------------------
// 2 and 3. scoring oracle, bounds and monotonicity
// ---------------------------------------------------------------------------

const ANSWERS: [Parsed; 3] = [Parsed::Yes, Parsed::No, Parsed::Nan];

fn random_battery(rng: &mut ChaCha8Rng, q: usize) -> Vec<Question> {
    (0..q)
        .map(|i| {
            let polarity = if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
            let dep = (i > 0 && rng.random_bool(0.5)).then(|| format!("Q{}", rng.random_range(0..i) + 1));
            Question::new(&format!("Q{}", i + 1), &format!("question {i}"), polarity, dep.as_deref())
        })
        .collect()
}

fn dep_index(q: &Question) -> Option<usize> {
    q.depends_on
        .as_ref()
        .map(|d| d.trim_start_matches('Q').parse::<usize>().unwrap() - 1)
}

fn effective(i: usize, battery: &[Question], raw: &[Parsed]) -> Parsed {
    match dep_index(&battery[i]) {
        Some(j) if effective(j, battery, raw) == Parsed::No => Parsed::Nan,
        _ => raw[i],
    }
}

/// Direct evaluation: a question whose (effective) prerequisite is "no"
/// counts as unanswered; positives add one for "yes"; negatives subtract one
/// for "yes" and, under reward credit, add one for "no".
fn oracle_total(battery: &[Question], raw: &[Parsed], credit: NegativeAnswerCredit) -> i32 {
    (0..battery.len())
        .map(|i| match (battery[i].polarity, effective(i, battery, raw)) {
            (Polarity::Positive, Parsed::Yes) => 1,
            (Polarity::Negative, Parsed::Yes) => -1,
            (Polarity::Negative, Parsed::No) if credit == NegativeAnswerCredit::Reward => 1,
            _ => 0,
        })
        .sum()
}

fn records(battery: &[Question], raw: &[Parsed]) -> Vec<AnswerRecord> {
    battery
        .iter()
        .zip(raw)
        .map(|(q, &p)| AnswerRecord::new(&q.question_id, "", p))
        .collect()
}

fn all_vectors(q: usize) -> Vec<Vec<Parsed>> {
    (0..3usize.pow(q as u32))
        .map(|mut code| {
            (0..q)
                .map(|_| {
                    let a = ANSWERS[code % 3];
                    code /= 3;
                    a
                })
                .collect()
        })
        .collect()
}

fn oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut batteries, mut cases) = (0, 0);
    for q in 1..=4usize {
        for _ in 0..10 {
            let battery = random_battery(&mut rng, q);
            batteries += 1;
            for raw in all_vectors(q) {
                for credit in [NegativeAnswerCredit::Reward, NegativeAnswerCredit::Neutral] {
                    let card = score_image("p", 0, &records(&battery, &raw), &battery, credit)
                        .map_err(|e| e.to_string())?;
                    let want = oracle_total(&battery, &raw, credit);
                    ensure!(card.total == want, "{battery:?} {raw:?} {credit:?}: {} != {want}", card.total);
                    cases += 1;
                }
            }
        }
    }
    ensure!(batteries >= 20, "only {batteries} batteries");
    Ok(format!("{batteries} batteries, {cases} answer vectors"))
}

fn bounds_and_monotonicity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let instances = 12_000;
    for _ in 0..instances {
        let q = rng.random_range(1..=10);
        let battery = random_battery(&mut rng, q);
        let raw: Vec<Parsed> = (0..q).map(|_| ANSWERS[rng.random_range(0..3)]).collect();
        let credit = if rng.random_bool(0.5) { NegativeAnswerCredit::Reward } else { NegativeAnswerCredit::Neutral };
        let total = |raw: &[Parsed]| {
            score_image("p", 0, &records(&battery, raw), &battery, credit).map_err(|e| e.to_string())
        };
        let card = total(&raw)?;
        let pos = battery.iter().filter(|b| b.polarity == Polarity::Positive).count() as i32;
        let neg = q as i32 - pos;
        let upper = pos + if credit == NegativeAnswerCredit::Reward { neg } else { 0 };
        ensure!((-neg..=upper).contains(&card.total), "total {} outside [{}, {upper}]", card.total, -neg);
        ensure!(card.contributions.iter().all(|c| (-1..=1).contains(c)), "contribution out of range");
        ensure!(
            card.total == card.contributions.iter().map(|&c| i32::from(c)).sum::<i32>(),
            "total is not the sum of contributions"
        );

        // Improving one answer that no other question depends on never
        // lowers the total.
        let i = rng.random_range(0..q);
        let target = battery.iter().any(|b| dep_index(b) == Some(i));
        if !target {
            let better = match battery[i].polarity {
                Polarity::Positive => Parsed::Yes,
                Polarity::Negative => Parsed::No,
            };
            let mut improved = raw.clone();
            improved[i] = better;
            let after = total(&improved)?.total;
            ensure!(after >= card.total, "improving Q{} lowered {} -> {after}", i + 1, card.total);
        }
        // A prerequisite whose effective answer is "no" silences its dependents.
        let mut silenced = raw.clone();
        silenced[i] = Parsed::No;
        let c = total(&silenced)?;
        let active = effective(i, &battery, &silenced) == Parsed::No;
        for (k, b) in battery.iter().enumerate() {
            if active && dep_index(b) == Some(i) {
                ensure!(c.contributions[k] == 0, "dependent Q{} of Q{} still scored", k + 1, i + 1);
            }
        }
    }
    Ok(format!("{instances} instances"))
}

// ---------------------------------------------------------------------------
// 4. detection filter
// ---------------------------------------------------------------------------

const CLASS: &str = "Elephant";

fn random_detections(rng: &mut ChaCha8Rng) -> Vec<Detection> {
    let labels = [CLASS, "elephant", "Giraffe", "Rock"];
    (0..rng.random_range(0..4))
        .map(|_| Detection {
            class_label: labels[rng.random_range(0..labels.len())].into(),
            confidence: f64::from(rng.random_range(0..=20u32)) / 20.0,
            bbox: BBox { x: 0.0, y: 0.0, w: 1.0, h: 1.0 },
        })
        .collect()
}

/// Keep candidates at or above the threshold, take the top confidence, and
/// break ties by the policy.
fn oracle_select(ev: &[CandidateEvidence], policy: &FilterPolicy) -> Option<usize> {
    let kept: Vec<usize> = (0..ev.len())
        .filter(|&i| ev[i].confidence.is_some_and(|c| c >= policy.confidence_threshold))
        .collect();
    let top = kept
        .iter()
        .map(|&i| ev[i].confidence.unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut tied: Vec<usize> = kept.into_iter().filter(|&i| ev[i].confidence == Some(top)).collect();
    match policy.tie_break {
        TieBreak::LowestIndex => tied.sort_by_key(|&i| ev[i].image_index),
        TieBreak::HighestScore => tied.sort_by_key(|&i| (-ev[i].score_total, ev[i].image_index)),
    }
    tied.first().copied()
}

fn filter_tables() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let tables = 2_000;
    let mut selected = 0;
    for _ in 0..tables {
        let k = rng.random_range(1..=6);
        let mut indices: Vec<u32> = (0..10).collect();
        for i in (1..indices.len()).rev() {
            indices.swap(i, rng.random_range(0..=i));
        }
        let mut indices = indices[..k].to_vec();
        indices.sort_unstable();
        let ev: Vec<CandidateEvidence> = indices
            .iter()
            .map(|&image_index| {
                let dets = random_detections(&mut rng);
                let failed = rng.random_bool(0.1);
                CandidateEvidence {
                    image_index,
                    score_total: rng.random_range(5..=8),
                    confidence: if failed { None } else { max_confidence(&dets, CLASS) },
                }
            })
            .collect();
        let tie_break = if rng.random_bool(0.5) { TieBreak::LowestIndex } else { TieBreak::HighestScore };
        let t1 = f64::from(rng.random_range(0..=20u32)) / 20.0;
        let t2 = f64::from(rng.random_range(0..=20u32)) / 20.0;
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let p_lo = FilterPolicy { confidence_threshold: lo, tie_break };
        let p_hi = FilterPolicy { confidence_threshold: hi, tie_break };

        let w_lo = select_optimal(&ev, &p_lo);
        let w_hi = select_optimal(&ev, &p_hi);
        ensure!(w_lo == oracle_select(&ev, &p_lo), "oracle mismatch at {lo}: {ev:?}");
        ensure!(w_hi == oracle_select(&ev, &p_hi), "oracle mismatch at {hi}: {ev:?}");
        ensure!(w_lo == select_optimal(&ev, &p_lo), "selection not deterministic");
        if let Some(w) = w_hi {
            ensure!(w_lo == Some(w), "raising {lo} -> {hi} changed a surviving winner: {ev:?}");
        }
        if let Some(w) = w_lo {
            if ev[w].confidence.unwrap() >= hi {
                ensure!(w_hi == Some(w), "winner above {hi} dropped: {ev:?}");
            }
            selected += 1;
        }
    }
    Ok(format!("{tables} tables, {selected} with a winner"))
}

// ---------------------------------------------------------------------------
// 5. win-rate protocol
// ---------------------------------------------------------------------------

fn sample(prompt: usize, seed: u64, model: &str, score: f64) -> ScoreSample {
    ScoreSample {
        prompt_id: format!("v{prompt}"),
        seed,
        model_id: model.into(),
        lora_scale: None,
        clip_score: Some(score),
    }
}

fn pair_lists(a: &[f64], b: &[f64]) -> (Vec<ScoreSample>, Vec<ScoreSample>) {
    (
        a.iter().enumerate().map(|(i, &s)| sample(i / 4, (i % 4) as u64, "tuned", s)).collect(),
        b.iter().enumerate().map(|(i, &s)| sample(i / 4, (i % 4) as u64, "base", s)).collect(),
    )
}

fn win_rate() -> Check {
    let eps = 0.01;
    // Hand-computed: +0.05 win, -0.02 loss, +0.005 tie, 0 tie, +0.01 win,
    // -0.01 loss, +0.0099 tie, -0.0099 tie.
    let a = [0.35, 0.28, 0.305, 0.30, 0.31, 0.29, 0.3099, 0.2901];
    let b = [0.30; 8];
    let (sa, sb) = pair_lists(&a, &b);
    let r = compare(&sa, &sb, eps).map_err(|e| e.to_string())?;
    ensure!((r.wins, r.losses, r.ties, r.total) == (2, 2, 4, 8), "hand case {r:?}");
    ensure!(r.win_rate == 0.25 && r.win_plus_tie_rate == 0.75, "hand rates {r:?}");

    ensure!(classify_difference(0.31 - 0.30, eps) == Outcome::Win, "+0.01 must win");
    ensure!(classify_difference(0.30 - 0.31, eps) == Outcome::Loss, "-0.01 must lose");
    ensure!(classify_difference(0.01, eps) == Outcome::Win, "exact +0.01 must win");
    ensure!(classify_difference(-0.01, eps) == Outcome::Loss, "exact -0.01 must lose");
    ensure!(classify_difference(0.009_999, eps) == Outcome::Tie, "just below must tie");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sets = 1_500;
    for _ in 0..sets {
        let n = rng.random_range(1..=40);
        let a: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(20..=40u32)) / 100.0).collect();
        let b: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(20..=40u32)) / 100.0).collect();
        let (sa, sb) = pair_lists(&a, &b);
        let ab = compare(&sa, &sb, eps).map_err(|e| e.to_string())?;
        let ba = compare(&sb, &sa, eps).map_err(|e| e.to_string())?;
        ensure!(
            (ab.wins, ab.losses, ab.ties) == (ba.losses, ba.wins, ba.ties),
            "antisymmetry broken: {ab:?} vs {ba:?}"
        );
        ensure!(ab.wins + ab.losses + ab.ties == n as u64, "partition broken");
    }

    // 50 prompts x 4 seeds: 100 wins, 40 ties, 60 losses.
    let b = vec![0.30; 200];
    let a: Vec<f64> = (0..200)
        .map(|i| match i {
            0..100 => 0.33,
            100..140 => 0.30,
            _ => 0.25,
        })
        .collect();
    let (sa, sb) = pair_lists(&a, &b);
    let r = compare(&sa, &sb, eps).map_err(|e| e.to_string())?;
    ensure!(r.win_plus_tie_rate == 0.70, "constructed corpus gives {}", r.win_plus_tie_rate);
    Ok(format!("hand cases, boundary, {sets} antisymmetric sets, win+tie {:.2}", r.win_plus_tie_rate))
}

// ---------------------------------------------------------------------------
// 6. end-to-end mock loop with replay
// ---------------------------------------------------------------------------

fn end_to_end() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    std::fs::write(
        root.join("script.json"),
        r#"{ "vqa": { "flip_rate": 0.15 }, "detector": { "fallback": "hashed" },
             "scorer": { "scores": [] } }"#,
    )
    .map_err(|e| e.to_string())?;
    std::fs::write(
        root.join("run.toml"),
        r#"
output_root = "out"
n_candidates = 4
width = 32
height = 32
stage_parallelism = 4

[[classes]]
class_name = "Elephant"
prompt_count = 5

[[classes]]
class_name = "Teddy bear"
prompt_count = 5

[backends.vqa]
script = "script.json"

[backends.detector]
script = "script.json"

[backends.scorer]
script = "script.json"

[eval]
validation_prompts = 4
seeds = 2
sweep_prompts = 2
resolution = 32
"#,
    )
    .map_err(|e| e.to_string())?;
    let config = root.join("run.toml").display().to_string();
    let cli = |args: &[&str]| {
        let mut argv = vec!["ccsr", "--config", config.as_str()];
        argv.extend_from_slice(args);
        ccsr::cli::run_cli(argv)
    };

    let code = cli(&["--run", "live", "loop"]);
    ensure!(code == 0, "live loop exited {code}");
    let out = root.join("out");
    let manifest = RunManifest::load(&out.join("runs/live/run.json")).map_err(|e| e.to_string())?;
    for stage in Stage::ALL {
        ensure!(manifest.status(stage) == StageStatus::Complete, "{stage} is {:?}", manifest.status(stage));
    }
    ensure!(manifest.counters.prompts == 10, "prompts {}", manifest.counters.prompts);
    ensure!(manifest.counters.images == 40, "images {}", manifest.counters.images);

    let pairs = std::fs::read_to_string(out.join("runs/live/pairs.jsonl")).map_err(|e| e.to_string())?;
    let pair_count = pairs.lines().filter(|l| !l.trim().is_empty()).count();
    let bundle = DatasetBundle::open(&out.join("dataset/live")).map_err(|e| e.to_string())?;
    let metadata = bundle.records().map_err(|e| e.to_string())?.len();
    ensure!(pair_count > 0, "no pairs extracted");
    ensure!(metadata == pair_count, "metadata {metadata} != pairs {pair_count}");
    ensure!(out.join("runs/live/eval/winrate.json").exists(), "no win-rate summary");

    let code = cli(&["--run", "replayed", "--replay-from", "live", "loop"]);
    ensure!(code == 0, "replay loop exited {code}");
    let a = tree(&out.join("dataset/live"))?;
    let b = tree(&out.join("dataset/replayed"))?;
    ensure!(a.len() == pair_count + 1, "bundle holds {} files", a.len());
    ensure!(a == b, "replayed bundle differs");
    Ok(format!("{pair_count} pairs, {metadata} metadata lines, replay bit-exact"))
}

/// Relative path and bytes of every file under `root`, sorted.
fn tree(root: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let p = entry.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).map_err(|e| e.to_string())?));
            }
        }
    }
    out.sort();
    Ok(out)
}

// ---------------------------------------------------------------------------
// 7. default configuration
// ---------------------------------------------------------------------------

fn defaults() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig::from_toml("[[classes]]\nclass_name = \"Elephant\"\n", dir.path())
        .map_err(|e| e.to_string())?;
    ensure!(cfg.violations().is_empty(), "{:?}", cfg.violations());
    ensure!(cfg.n_candidates == 10, "n_candidates {}", cfg.n_candidates);
    ensure!(cfg.resolution == Resolution::square(512), "resolution {:?}", cfg.resolution);
    ensure!(cfg.filter.confidence_threshold == 0.6, "threshold {}", cfg.filter.confidence_threshold);
    ensure!(cfg.sampling.temperature == 0.7, "temperature {}", cfg.sampling.temperature);
    ensure!(cfg.sampling.top_p == 0.95, "top_p {}", cfg.sampling.top_p);
    ensure!(cfg.eval.tie_epsilon == 0.01, "tie_epsilon {}", cfg.eval.tie_epsilon);
    ensure!(cfg.eval.validation_prompts == 50, "validation prompts {}", cfg.eval.validation_prompts);
    ensure!(cfg.eval.seed_values() == [0, 1, 2, 3], "seeds {:?}", cfg.eval.seed_values());

    let train = build_train_config(
        &DatasetBundle::at(&dir.path().join("bundle")),
        "base",
        &dir.path().join("adapter"),
        &cfg.train,
    )
    .map_err(|e| e.to_string())?;
    ensure!(train.epochs == 100, "epochs {}", train.epochs);
    ensure!(train.batch_size == 18, "batch size {}", train.batch_size);
    ensure!(train.learning_rate == 1e-4, "learning rate {}", train.learning_rate);
    ensure!(train.horizontal_flip, "horizontal flip off");
    ensure!(train.resolution == 512, "train resolution {}", train.resolution);
    ensure!(train.precision == Precision::Mixed16, "precision {:?}", train.precision);
    Ok("N=10, 512x512, 0.6, T=0.7, top_p=0.95, 100 epochs, batch 18, lr 1e-4, flip, eps 0.01, 50x4".into())
}

// ---------------------------------------------------------------------------
// 8. zero-scale identity
// ---------------------------------------------------------------------------

fn zero_scale_identity() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let backends = mock_backends(dir.path(), "identity");
    let weights = AdapterWeightsRef {
        weights_path: dir.path().join("adapter_model.safetensors"),
        base_model_id: backends.text2image.model_id().to_string(),
        config_digest: "c".repeat(64),
        weights_digest: "ab".repeat(32),
    };
    let base = backends.text2image.clone();
    let zero = scaled_backend(base.clone(), &weights, 0.0).map_err(|e| e.to_string())?;
    let full = scaled_backend(base.clone(), &weights, 1.0).map_err(|e| e.to_string())?;
    ensure!(zero.model_id() == base.model_id(), "model id {}", zero.model_id());
    let prompts = 120;
    let mut differs = 0;
    for i in 0..prompts {
        let text = format!("an elephant standing in scene {i}");
        let seed = (i % 2 == 0).then_some(i as u64);
        let gen = |b: &dyn TextToImageBackend, tag: &str| {
            backends
                .generate_images_with(b, &text, 2, 16, 16, seed, &format!("{tag}/{i}"))
                .map(|refs| refs.into_iter().map(|r| r.content_id).collect::<Vec<_>>())
                .map_err(|e| e.to_string())
        };
        let want = gen(base.as_ref(), "base")?;
        ensure!(gen(&zero, "zero")? == want, "prompt {i}: scale 0 differs from base");
        if gen(&full, "full")? != want {
            differs += 1;
        }
    }
    ensure!(differs > 0, "adapter at scale 1 never changed an image");
    Ok(format!("{prompts} prompts identical at scale 0"))
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let criteria: [Criterion; 8] = [
        ("1 worked scoring example", worked_example, Duration::from_secs(1)),
        ("2 scoring oracle equivalence", oracle_equivalence, Duration::from_secs(5)),
        ("3 score bounds and monotonicity", bounds_and_monotonicity, Duration::from_secs(30)),
        ("4 filter oracle and monotone threshold", filter_tables, Duration::from_secs(10)),
        ("5 win-rate protocol", win_rate, Duration::from_secs(10)),
        ("6 end-to-end mock loop and replay", end_to_end, Duration::from_secs(60)),
        ("7 default configuration", defaults, Duration::from_secs(1)),
        ("8 zero-scale identity", zero_scale_identity, Duration::from_secs(5)),
    ];
    let mut failed = Vec::new();
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            if elapsed <= budget {
                Ok(detail)
            } else {
                Err(format!("took {elapsed:.2?}, budget {budget:?}"))
            }
        });
        match result {
            Ok(detail) => println!("PASS  {name} ({elapsed:.2?}): {detail}"),
            Err(why) => {
                println!("FAIL  {name} ({elapsed:.2?}): {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
