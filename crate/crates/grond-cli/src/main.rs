//! `grond` command-line lab: train surrogates, synthesize triggers, run
//! backdoor attacks with adversarial injection, apply defenses, and emit
//! analysis reports.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ExperimentConfig, TriggerKindConfig};

#[derive(Parser)]
#[command(name = "grond", version, about = "Backdoor attack/defense laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, clap::Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Reuse an existing output directory with the same config hash.
    #[arg(long)]
    resume: bool,
    /// Discard an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the clean surrogate model used for trigger synthesis.
    TrainSurrogate(RunArgs),
    /// Generate the configured trigger (training the surrogate if needed).
    GenTrigger {
        #[command(flatten)]
        run: RunArgs,
        /// Override the configured trigger kind.
        #[arg(long, value_enum)]
        trigger: Option<TriggerArg>,
    },
    /// Full attack: trigger -> poison -> train with adversarial injection.
    Attack {
        #[command(flatten)]
        run: RunArgs,
        /// Disable the injection callback (trigger-only ablation).
        #[arg(long)]
        no_abi: bool,
        /// Override the configured trigger kind.
        #[arg(long, value_enum)]
        trigger: Option<TriggerArg>,
    },
    /// Apply the configured defense chain to a snapshot.
    Defend {
        #[command(flatten)]
        run: RunArgs,
        /// Snapshot directory (defaults to the run's victim).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Worker-thread cap for sweeps.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Emit the configured analysis reports for a snapshot.
    Analyze {
        #[command(flatten)]
        run: RunArgs,
        /// Snapshot directory (defaults to the run's victim).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Baseline snapshot for the weight-change report.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Sort score columns descending.
        #[arg(long)]
        sorted: bool,
    },
    /// BA/ASR of a snapshot against the run's trigger.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Snapshot directory (defaults to the run's victim).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Summarize a run directory.
    Report {
        /// The run's output directory.
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TriggerArg {
    Upgd,
    PgdPerSample,
    RandomNoise,
    Patch,
    Blend,
}

impl From<TriggerArg> for TriggerKindConfig {
    fn from(value: TriggerArg) -> Self {
        match value {
            TriggerArg::Upgd => TriggerKindConfig::Upgd,
            TriggerArg::PgdPerSample => TriggerKindConfig::PgdPerSample,
            TriggerArg::RandomNoise => TriggerKindConfig::RandomNoise,
            TriggerArg::Patch => TriggerKindConfig::Patch,
            TriggerArg::Blend => TriggerKindConfig::Blend,
        }
    }
}

// Exit codes: 0 success, 2 config, 3 data, 4 training divergence, 5 I/O.
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;
const EXIT_IO: u8 = 5;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainSurrogate(run) => {
            let mut ws = open(&run)?;
            commands::cmd_train_surrogate(&mut ws)
        }
        Command::GenTrigger { run, trigger } => {
            let mut ws = open(&run)?;
            commands::cmd_gen_trigger(&mut ws, trigger.map(Into::into))
        }
        Command::Attack {
            run,
            no_abi,
            trigger,
        } => {
            let mut ws = open(&run)?;
            commands::cmd_attack(&mut ws, no_abi, trigger.map(Into::into))
        }
        Command::Defend { run, model, jobs } => {
            let mut ws = open(&run)?;
            commands::cmd_defend(&mut ws, model, jobs.max(1))
        }
        Command::Analyze {
            run,
            model,
            baseline,
            sorted,
        } => {
            let mut ws = open(&run)?;
            commands::cmd_analyze(&mut ws, model, baseline, sorted)
        }
        Command::Evaluate { run, model } => {
            let mut ws = open(&run)?;
            commands::cmd_evaluate(&mut ws, model)
        }
        Command::Report { run } => commands::cmd_report(&run),
    }
}

fn open(run: &RunArgs) -> anyhow::Result<commands::Workspace> {
    let config = ExperimentConfig::load(&run.config)?;
    commands::open_workspace(config, run.resume, run.force)
}

fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(lab) = cause.downcast_ref::<grond_lab::Error>() {
            return match lab {
                grond_lab::Error::Ingestion { .. } | grond_lab::Error::Capacity { .. } => EXIT_DATA,
                grond_lab::Error::Argument(_) | grond_lab::Error::Optimization(_) => EXIT_CONFIG,
                grond_lab::Error::Core(c) => classify_core(c),
            };
        }
        if let Some(core) = cause.downcast_ref::<grond_core::Error>() {
            return classify_core(core);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_CONFIG
}

fn classify_core(err: &grond_core::Error) -> u8 {
    match err {
        grond_core::Error::Config(_) | grond_core::Error::Argument(_) => EXIT_CONFIG,
        grond_core::Error::TrainingDiverged { .. } => EXIT_DIVERGED,
        grond_core::Error::Format { .. }
        | grond_core::Error::Checksum { .. }
        | grond_core::Error::Io { .. } => EXIT_IO,
    }
}
