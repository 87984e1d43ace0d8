use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use autosde::config::ExperimentConfig;
use autosde::stages::{run_full, run_stage, Stage};

#[derive(Parser)]
#[command(name = "autosde", version, about = "Learn reduced slow dynamics of slow-fast SDEs from short-term ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// Experiment recipe (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Overrides the simulation, training and evaluation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Stage to run, as an alternative to the subcommand.
    #[arg(long, global = true)]
    stage: Option<StageArg>,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Simulate the short-term ensemble.
    Simulate,
    /// Identify the slow drift and diffusion.
    Identify,
    /// Train the predictor and roll the ensemble forward.
    Train,
    /// Fit the manifold and build the reduced system.
    Reduce,
    /// Compare reduced and original dynamics.
    Evaluate,
    /// Run every stage in order.
    Full,
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum StageArg {
    Simulate,
    Identify,
    Train,
    Reduce,
    Evaluate,
    Full,
}

impl From<StageArg> for Command {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Simulate => Command::Simulate,
            StageArg::Identify => Command::Identify,
            StageArg::Train => Command::Train,
            StageArg::Reduce => Command::Reduce,
            StageArg::Evaluate => Command::Evaluate,
            StageArg::Full => Command::Full,
        }
    }
}

fn usage(msg: &str) -> ExitCode {
    eprintln!("error: {msg}\n\nFor more information, try '--help'.");
    ExitCode::from(2)
}

fn run(cmd: Command, config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let stage = match cmd {
        Command::Full => {
            run_full(&cfg, out)?;
            eprintln!("wrote all stages to {}", out.display());
            return Ok(());
        }
        Command::Simulate => Stage::Simulate,
        Command::Identify => Stage::Identify,
        Command::Train => Stage::Train,
        Command::Reduce => Stage::Reduce,
        Command::Evaluate => Stage::Evaluate,
    };
    run_stage(stage, &cfg, out).with_context(|| format!("stage {}", stage.name()))?;
    eprintln!("{} done, artifacts in {}", stage.name(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cmd = match (cli.command, cli.stage.map(Command::from)) {
        (Some(a), Some(b)) if a != b => return usage("subcommand and --stage disagree"),
        (Some(a), _) => a,
        (None, Some(b)) => b,
        (None, None) => return usage("a subcommand or --stage is required"),
    };
    let Some(config) = cli.config else {
        return usage("--config is required");
    };
    match run(cmd, &config, &cli.out, cli.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
