//! `pianist`: MIDI ingestion, demonstration synthesis, training, rollout,
//! ablation and trajectory export for the bimanual piano policy.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pianist_core::reward::AudioRewardMode;

use config::{OracleChoice, Overrides, RunConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "pianist", version, about = "Residual diffusion policy for bimanual piano playing")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving output files.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Evaluator used for the oracle reward term.
    #[arg(long, global = true, value_enum)]
    oracle: Option<OracleChoice>,
    /// Audio similarity measure.
    #[arg(long, global = true, value_parser = parse_audio_mode)]
    audio_reward: Option<AudioRewardMode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a MIDI file and report goal trajectory statistics.
    Ingest { midi: PathBuf },
    /// Synthesize a demonstration and replay it through the environment.
    Demo { midi: PathBuf },
    /// Behaviour-clone the denoiser and write checkpoints and the loss curve.
    Train {
        /// Configuration file (same as --config).
        config: Option<PathBuf>,
        /// Write an all-zero residual checkpoint without training.
        #[arg(long)]
        zero_stub: bool,
    },
    /// Run a checkpoint on a song and write the report, audio and trace.
    Rollout { checkpoint: PathBuf, midi: PathBuf },
    /// Run the oracle x residual ablation grid.
    Ablate {
        /// Configuration file (same as --config).
        config: Option<PathBuf>,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Export per-finger x trajectories from a rollout trace.
    PlotTraj { trace: PathBuf },
}

fn parse_audio_mode(s: &str) -> Result<AudioRewardMode, String> {
    s.parse()
}

fn run(cli: Cli) -> Result<(), CliError> {
    let positional = match &cli.command {
        Command::Train { config, .. } | Command::Ablate { config, .. } => config.clone(),
        _ => None,
    };
    if positional.is_some() && cli.config.is_some() && positional != cli.config {
        return Err(CliError::BadArgs("conflicting config paths".into()));
    }
    let file = RunConfig::load(positional.or(cli.config).as_deref())?;
    let flags = Overrides {
        seed: cli.seed,
        out_dir: cli.out_dir,
        oracle: cli.oracle,
        audio_reward: cli.audio_reward,
    };
    let cfg = file.merge(|k| std::env::var(k).ok(), &flags)?;
    match cli.command {
        Command::Ingest { midi } => commands::ingest(&cfg, &midi).map(drop),
        Command::Demo { midi } => commands::demo(&cfg, &midi).map(drop),
        Command::Train { zero_stub, .. } => commands::train_cmd(&cfg, zero_stub).map(drop),
        Command::Rollout { checkpoint, midi } => commands::rollout_cmd(&cfg, &checkpoint, &midi).map(drop),
        Command::Ablate { seeds, .. } => commands::ablate(&cfg, seeds).map(drop),
        Command::PlotTraj { trace } => commands::plot_traj(&cfg, &trace).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
