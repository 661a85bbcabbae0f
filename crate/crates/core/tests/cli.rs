use std::path::{Path, PathBuf};

use ccsr::cli::{read_manifest, run_cli};
use ccsr::dataset::{RunManifest, Stage, StageStatus};

const BASE: &str = r#"
output_root = "out"
n_candidates = 4
width = 16
height = 16

[[classes]]
class_name = "Elephant"
prompt_count = 3

[eval]
validation_prompts = 2
seeds = 2
sweep_prompts = 1
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), format!("{extra}\n{BASE}")).unwrap();
        Self { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("run.toml")
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn ccsr(&self, args: &[&str]) -> i32 {
        let config = self.config().display().to_string();
        let mut argv = vec!["ccsr", "--config", config.as_str()];
        argv.extend_from_slice(args);
        run_cli(argv)
    }

    fn manifest(&self, run: &str) -> RunManifest {
        read_manifest(&self.out(), run).expect("manifest")
    }

    fn rewrite(&self, extra: &str) {
        std::fs::write(self.config(), format!("{extra}\n{BASE}")).unwrap();
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn judge_before_generate_is_a_dependency_error() {
    let ws = Workspace::new("");
    assert_eq!(ws.ccsr(&["--run", "r1", "prompts"]), 0);
    assert_eq!(ws.ccsr(&["--run", "r1", "judge"]), 3);
    let m = ws.manifest("r1");
    assert_eq!(m.status(Stage::Judge), StageStatus::Pending);
    assert_eq!(m.status(Stage::Promptgen), StageStatus::Complete);
}

#[test]
fn config_errors_exit_two() {
    let ws = Workspace::new("confidence_threshold = 1.5\nn_candidates_typo = 3");
    assert_eq!(ws.ccsr(&["--run", "r1", "loop"]), 2);
    assert_eq!(ws.ccsr(&["validate"]), 2);
    assert_eq!(run_cli(["ccsr", "prompts"]), 2);
    assert_eq!(run_cli(["ccsr", "no-such-command"]), 2);
    let ws = Workspace::new("");
    assert_eq!(ws.ccsr(&["validate"]), 0);
    assert_eq!(ws.ccsr(&["--run", "../escape", "prompts"]), 2);
}

#[test]
fn unreachable_backend_exits_four() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let ws = Workspace::new("");
    std::fs::write(
        ws.config(),
        format!(
            "{BASE}\n[backends.chat]\nendpoint = \"http://127.0.0.1:{port}/v1/chat/completions\"\n\
             model_id = \"llm\"\nretry_limit = 0\ntimeout_secs = 2\n"
        ),
    )
    .unwrap();
    assert_eq!(ws.ccsr(&["--run", "r1", "prompts"]), 4);
    let m = ws.manifest("r1");
    assert_eq!(m.status(Stage::Promptgen), StageStatus::Failed);
    assert!(m.record(Stage::Promptgen).error.is_some());
}

#[test]
fn empty_export_is_a_stage_failure() {
    let ws = Workspace::new("");
    std::fs::write(ws.dir.path().join("det.json"), r#"{"detector": {"fallback": "empty"}}"#).unwrap();
    std::fs::write(
        ws.config(),
        format!("confidence_threshold = 1.0\n{BASE}\n[backends.detector]\nscript = \"det.json\"\n"),
    )
    .unwrap();
    assert_eq!(ws.ccsr(&["--run", "r1", "loop"]), 5);
    let m = ws.manifest("r1");
    assert_eq!(m.status(Stage::Filter), StageStatus::Complete);
    assert_eq!(m.status(Stage::Export), StageStatus::Failed);
    assert_eq!(m.counters.pairs, 0);
    assert_eq!(m.counters.rejections, 3);
}

#[test]
fn loop_matches_individual_stages() {
    let ws = Workspace::new("");
    assert_eq!(ws.ccsr(&["--run", "whole", "loop"]), 0);
    for cmd in ["prompts", "generate", "judge", "filter", "export", "train", "eval"] {
        assert_eq!(ws.ccsr(&["--run", "steps", cmd]), 0, "{cmd}");
    }
    let (a, b) = (ws.manifest("whole"), ws.manifest("steps"));
    for stage in Stage::ALL {
        assert_eq!(a.status(stage), StageStatus::Complete);
        // Unseeded generation is salted by run id, so only the prompts agree.
        if stage == Stage::Promptgen {
            assert_eq!(a.record(stage).artifact_digest, b.record(stage).artifact_digest);
        }
    }
    assert!(ws.out().join("runs/steps/eval/winrate.json").exists());
}

#[test]
fn rerun_is_a_no_op_and_threshold_change_redoes_filter_onward() {
    let ws = Workspace::new("");
    assert_eq!(ws.ccsr(&["--run", "r1", "loop"]), 0);
    let before = ws.manifest("r1");
    let transcript = ws.out().join("runs/r1/transcript.jsonl");
    let calls = read(&transcript).lines().count();

    assert_eq!(ws.ccsr(&["--run", "r1", "loop"]), 0);
    let again = ws.manifest("r1");
    assert_eq!(read(&transcript).lines().count(), calls);
    for stage in Stage::ALL {
        assert_eq!(before.record(stage).updated_at, again.record(stage).updated_at, "{stage}");
    }

    ws.rewrite("confidence_threshold = 0.3");
    assert_eq!(ws.ccsr(&["--run", "r1", "loop"]), 0);
    let after = ws.manifest("r1");
    for stage in [Stage::Promptgen, Stage::Generation, Stage::Judge] {
        assert_eq!(before.record(stage).updated_at, after.record(stage).updated_at, "{stage}");
    }
    assert_ne!(before.record(Stage::Filter).updated_at, after.record(Stage::Filter).updated_at);
}

#[test]
fn resume_after_interruption_matches_uninterrupted_run() {
    let ws = Workspace::new("");
    for cmd in ["prompts", "generate", "judge"] {
        assert_eq!(ws.ccsr(&["--run", "r1", cmd]), 0);
    }
    // A crash mid-filter leaves a partial artifact and no manifest update.
    std::fs::write(ws.out().join("runs/r1/pairs.jsonl"), "{\"truncated\":").unwrap();
    assert_eq!(ws.manifest("r1").resume_point(), Some(Stage::Filter));

    assert_eq!(ws.ccsr(&["--run", "r1", "--resume", "loop"]), 0);
    let m = ws.manifest("r1");
    assert!(Stage::ALL.iter().all(|&s| m.is_complete(s)));
    assert_eq!(ws.ccsr(&["--run", "r1", "--resume", "loop"]), 0);
    assert_eq!(ws.ccsr(&["--run", "never-started", "--resume", "loop"]), 2);

    // Replaying the same calls without interruption gives the same dataset.
    assert_eq!(ws.ccsr(&["--run", "r2", "--replay-from", "r1", "loop"]), 0);
    assert_eq!(
        read(&ws.out().join("dataset/r1/metadata.jsonl")),
        read(&ws.out().join("dataset/r2/metadata.jsonl"))
    );
}

#[test]
fn eval_against_another_run_and_snapshot_reuse() {
    let ws = Workspace::new("");
    assert_eq!(ws.ccsr(&["--run", "a", "loop"]), 0);
    assert_eq!(ws.ccsr(&["--run", "b", "loop"]), 0);
    let root = ws.out().display().to_string();
    // No --config: the stored snapshot of run b is used.
    assert_eq!(run_cli(["ccsr", "--output-root", &root, "--run", "b", "eval", "--against", "a"]), 0);
    let summary = read(&ws.out().join("runs/b/eval/winrate.json"));
    assert!(summary.contains("\"total\": 4"), "{summary}");
    assert_eq!(run_cli(["ccsr", "--output-root", &root, "--run", "b", "eval", "--against", "nobody"]), 3);
}

#[test]
fn replay_without_source_transcript_is_a_config_error() {
    let ws = Workspace::new("");
    assert_eq!(ws.ccsr(&["--run", "r2", "--replay-from", "missing", "loop"]), 2);
}
