//! `camil`: the pipeline command line. Every stage writes its artifacts and
//! one `manifest.json` into its output directory.
//!
//! Feature extraction happens outside this tool: `train`, `evaluate` and the
//! other model stages read one `.milf` feature file per slide (an `n × d`
//! matrix, one row per retained tile, with optional grid positions) plus a
//! clinical CSV.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use config::{sections_for, Config};
use manifest::{collect_outputs, digest_inputs, RunManifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error(transparent)]
    Stage(#[from] camil_core::Error),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingInput(_) => "missing_input",
            CliError::Stage(_) => "stage",
            CliError::Io(_) => "io",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::MissingInput(_) => 2,
            CliError::Stage(_) | CliError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "camil", version, about = "Attention-MIL regression vs classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter, brightness-standardize and stain-normalize tiles of slide rasters
    Preprocess(RunArgs),
    /// Build a site-aware stratified fold plan
    Split(RunArgs),
    /// Train one preset on the folds of a plan
    Train(RunArgs),
    /// Score the test patients of each trained fold
    Evaluate(RunArgs),
    /// Cross-validate several presets and compare them statistically
    Compare(RunArgs),
    /// Cox survival analysis of deployed model scores
    Survival(RunArgs),
    /// Side-by-side attention heatmaps of a classifier and a regressor
    Heatmap(RunArgs),
    /// Generate a synthetic cohort with known ground truth
    Synth(RunArgs),
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// INI run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory of this stage
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training preset (train only)
    #[arg(long)]
    preset: Option<String>,
    /// Single fold to train or evaluate
    #[arg(long)]
    fold: Option<usize>,
    /// Print the effective configuration and exit
    #[arg(long)]
    print_config: bool,
    /// More log output (repeatable)
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
    /// `section.key=value` overrides, applied last
    overrides: Vec<String>,
}

impl Command {
    fn split(&self) -> (&'static str, &RunArgs) {
        match self {
            Command::Preprocess(a) => ("preprocess", a),
            Command::Split(a) => ("split", a),
            Command::Train(a) => ("train", a),
            Command::Evaluate(a) => ("evaluate", a),
            Command::Compare(a) => ("compare", a),
            Command::Survival(a) => ("survival", a),
            Command::Heatmap(a) => ("heatmap", a),
            Command::Synth(a) => ("synth", a),
        }
    }
}

fn resolve(name: &str, args: &RunArgs) -> Result<Config, CliError> {
    let mut cfg = Config::load(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.set("run.seed", s.to_string())?;
    }
    if let Some(j) = args.jobs {
        cfg.set("run.jobs", j.to_string())?;
    }
    if let Some(o) = &args.out {
        cfg.set(&format!("{name}.out"), o.display().to_string())?;
    }
    if let Some(p) = &args.preset {
        if name != "train" {
            return Err(CliError::Config(format!("--preset does not apply to {name}")));
        }
        cfg.set("train.preset", p.clone())?;
    }
    if let Some(f) = args.fold {
        match name {
            "train" | "evaluate" | "compare" => cfg.set(&format!("{name}.folds"), f.to_string())?,
            _ => return Err(CliError::Config(format!("--fold does not apply to {name}"))),
        }
    }
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn run(name: &str, args: &RunArgs) -> Result<(), CliError> {
    let cfg = resolve(name, args)?;
    let sections = sections_for(name);
    if args.print_config {
        print!("{}", cfg.render(sections));
        return Ok(());
    }
    let started = Instant::now();
    let stage = commands::build(name, &cfg)?;
    let inputs = digest_inputs(&stage.inputs)?;
    std::fs::create_dir_all(&stage.out)
        .map_err(|e| CliError::Io(format!("{}: {e}", stage.out.display())))?;
    (stage.run)(&stage.out)?;
    let manifest = RunManifest {
        command: name.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: stage.seed,
        config: cfg.snapshot(sections),
        inputs,
        outputs: collect_outputs(&stage.out)?,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let path = manifest.write(&stage.out)?;
    println!(
        "{}",
        serde_json::json!({
            "status": "ok",
            "command": name,
            "out": stage.out.display().to_string(),
            "manifest": path.display().to_string(),
        })
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = cli.command.split();
    let level = match args.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(name, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({
                    "status": "error",
                    "command": name,
                    "kind": e.kind(),
                    "message": e.to_string(),
                })
            );
            ExitCode::from(e.exit_code())
        }
    }
}
