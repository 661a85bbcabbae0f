//! `ccsr` command line.
//!
//! Exit codes: 0 success, 2 configuration, 3 dependency, 4 backend,
//! 5 stage failure.

use clap::{Parser, Subcommand};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use crate::config::{validate_config, RunConfig};
use crate::dataset::{RunManifest, Stage};
use crate::pipeline::{load_snapshot, run_dir, PipelineError, Run, RunOptions, StageReport, BASELINE};

#[derive(Debug, Parser)]
#[command(name = "ccsr", version, about = "Class-conditional self-rewarding data curation")]
pub struct Cli {
    /// Run configuration (TOML). Without it the run's stored snapshot is used.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run id; `loop` generates one when absent.
    #[arg(long, global = true)]
    pub run: Option<String>,
    /// Overrides the configured output root.
    #[arg(long, global = true)]
    pub output_root: Option<PathBuf>,
    /// Worker threads for per-prompt work (default: all cores).
    #[arg(long, global = true)]
    pub stage_parallelism: Option<usize>,
    /// Continue an existing run from its first incomplete stage.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Answer every backend call from another run's transcript.
    #[arg(long, global = true)]
    pub replay_from: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate class-conditioned prompts.
    Prompts,
    /// Generate candidate images.
    Generate,
    /// Score candidates with the question battery.
    Judge,
    /// Detection filter and optimal-pair selection.
    Filter,
    /// Write the fine-tuning dataset bundle.
    Export,
    /// Launch LoRA training on the bundle.
    Train,
    /// Win-rate comparison and scale sweep.
    Eval {
        /// `base` or the id of another trained run.
        #[arg(long, default_value = BASELINE)]
        against: String,
    },
    /// All seven stages in order.
    Loop,
    /// Resolve and check a configuration file.
    Validate,
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        let name = match self {
            Command::Loop | Command::Validate => return None,
            Command::Prompts => "prompts",
            Command::Generate => "generate",
            Command::Judge => "judge",
            Command::Filter => "filter",
            Command::Export => "export",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
        };
        Stage::from_command(name)
    }
}

fn fresh_run_id() -> String {
    chrono::Utc::now().format("run-%Y%m%d-%H%M%S").to_string()
}

fn resolve_config(cli: &Cli, run_id: Option<&str>) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| PipelineError::Config(e.to_string()))?,
        None => {
            let root = cli
                .output_root
                .clone()
                .unwrap_or_else(|| PathBuf::from("ccsr-out"));
            let source = cli.replay_from.as_deref().or(run_id).ok_or_else(|| {
                PipelineError::Config("either --config or --run is required".into())
            })?;
            let mut cfg = load_snapshot(&root, source)?;
            cfg.output_root = root;
            cfg
        }
    };
    if let Some(root) = &cli.output_root {
        cfg.output_root = root.clone();
    }
    Ok(cfg)
}

fn print_report(r: &StageReport) {
    let tag = if r.skipped { "skip" } else { "done" };
    println!("{:<10} {tag}  {}", r.stage.to_string(), r.summary);
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    if let Command::Validate = cli.command {
        let path = cli
            .config
            .as_deref()
            .ok_or_else(|| PipelineError::Config("validate needs --config".into()))?;
        let cfg = validate_config(path).map_err(|e| PipelineError::Config(e.to_string()))?;
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(());
    }
    let config = resolve_config(cli, cli.run.as_deref())?;
    let run_id = match (cli.run.clone().or_else(|| config.run_id.clone()), &cli.command) {
        (Some(id), _) => id,
        (None, Command::Loop) if !cli.resume => fresh_run_id(),
        (None, _) => return Err(PipelineError::Config("--run is required".into())),
    };
    if cli.resume && !run_dir(&config.output_root, &run_id).join("run.json").exists() {
        return Err(PipelineError::Config(format!("--resume: run {run_id} does not exist")));
    }
    let against = match &cli.command {
        Command::Eval { against } => Some(against.clone()),
        _ => None,
    };
    let run = Run::open(
        config,
        &run_id,
        &RunOptions {
            parallelism: cli.stage_parallelism,
            replay_from: cli.replay_from.clone(),
            against,
        },
    )?;
    println!("run {run_id} in {}", run.run_dir.display());
    match cli.command.stage() {
        Some(stage) => print_report(&run.run_stage(stage)?),
        None => {
            let start = if cli.resume {
                run.manifest()?.resume_point()
            } else {
                Some(Stage::Promptgen)
            };
            let Some(start) = start else {
                println!("all stages complete");
                return Ok(());
            };
            for stage in Stage::ALL.into_iter().filter(|s| *s >= start) {
                print_report(&run.run_stage(stage)?);
            }
        }
    }
    Ok(())
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Manifest of a run, if it exists.
pub fn read_manifest(output_root: &Path, run_id: &str) -> Option<RunManifest> {
    RunManifest::load(&run_dir(output_root, run_id).join("run.json")).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subcommands_map_to_stages() {
        for (args, stage) in [
            (vec!["ccsr", "prompts"], Some(Stage::Promptgen)),
            (vec!["ccsr", "generate"], Some(Stage::Generation)),
            (vec!["ccsr", "eval", "--against", "r0"], Some(Stage::Eval)),
            (vec!["ccsr", "loop", "--resume"], None),
        ] {
            assert_eq!(Cli::try_parse_from(&args).unwrap().command.stage(), stage, "{args:?}");
        }
    }

    #[test]
    fn global_flags_after_subcommand() {
        let cli = Cli::try_parse_from(["ccsr", "judge", "--run", "r1", "--stage-parallelism", "3"]).unwrap();
        assert_eq!(cli.run.as_deref(), Some("r1"));
        assert_eq!(cli.stage_parallelism, Some(3));
        match Cli::try_parse_from(["ccsr", "eval"]).unwrap().command {
            Command::Eval { against } => assert_eq!(against, BASELINE),
            other => panic!("{other:?}"),
        }
    }
}
