//! `splitlora`: split federated LoRA fine-tuning at desk scale.
//!
//! Subcommands: `simulate` (analytical scheme comparison), `train`
//! (event-simulated federated training), `schedule` (policy studies).
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use splitlora::cost::{Preset, Scheme};
use splitlora_cli::commands;
use splitlora_cli::config::ExperimentConfig;
use splitlora_cli::CliError;

#[derive(Parser)]
#[command(
    name = "splitlora",
    version,
    about = "Split federated LoRA fine-tuning: cost simulation, desk-scale training, scheduling studies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare per-round time and memory of the schemes on a device preset.
    Simulate(CommonArgs),
    /// Run split federated LoRA training on the synthetic desk-scale task.
    Train(TrainArgs),
    /// Compare scheduling policies on the preset or on random instances.
    Schedule(ScheduleArgs),
}

/// Flags shared by all subcommands. Precedence: flags, then the
/// SPLITLORA_OUT environment variable (output directory only), then the
/// config file, then built-in defaults.
#[derive(Args)]
struct CommonArgs {
    /// JSON experiment config; may be partial.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in device preset name (paper-sec6).
    #[arg(long)]
    preset: Option<String>,
    /// Device preset JSON file; overrides --preset.
    #[arg(long)]
    devices: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated subset of: sl, vanilla-sfl, proposed.
    #[arg(long, value_delimiter = ',')]
    schemes: Vec<String>,
    /// Rounds to run (train) or to total up (simulate).
    #[arg(long)]
    rounds: Option<u32>,
    /// Base seed: data = seed, held-out = seed + 1, partition = seed + 2.
    #[arg(long)]
    seed: Option<u64>,
    /// Use only the first K preset clients.
    #[arg(long)]
    clients: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Aggregate after every this many rounds.
    #[arg(long)]
    agg_every: Option<usize>,
    /// Dirichlet label-skew concentration.
    #[arg(long)]
    alpha: Option<f64>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size per client step.
    #[arg(long)]
    batch: Option<usize>,
    /// With --clients 1: replay the monolithic oracle and fail unless
    /// parameters match to 1e-9.
    #[arg(long)]
    compare_monolithic: bool,
}

#[derive(Args)]
struct ScheduleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Compare policies on N seeded random instances instead of the preset.
    #[arg(long)]
    random: Option<usize>,
}

fn resolve(mut cfg: ExperimentConfig, args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    if let Ok(dir) = std::env::var("SPLITLORA_OUT") {
        if !dir.is_empty() {
            cfg.out_dir = PathBuf::from(dir);
        }
    }
    if let Some(name) = &args.preset {
        cfg.preset = name.clone();
        cfg.devices = None;
    }
    if let Some(path) = &args.devices {
        cfg.devices = Some(Preset::from_file(path).map_err(splitlora_cli::config_err)?);
    }
    if !args.schemes.is_empty() {
        cfg.schemes = args
            .schemes
            .iter()
            .map(|s| Scheme::from_str(s))
            .collect::<splitlora::Result<Vec<_>>>()
            .map_err(splitlora_cli::config_err)?;
    }
    if let Some(rounds) = args.rounds {
        cfg.rounds = rounds;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(clients) = args.clients {
        cfg.clients = Some(clients);
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => {
            let cfg = resolve(ExperimentConfig::simulate_default(), &args)?;
            let resolved = cfg.validate_and_resolve()?;
            commands::simulate(&cfg, &resolved)
        }
        Command::Train(args) => {
            let mut cfg = resolve(ExperimentConfig::train_default(), &args.common)?;
            if let Some(agg_every) = args.agg_every {
                cfg.agg_every = agg_every;
            }
            if let Some(alpha) = args.alpha {
                cfg.alpha = alpha;
            }
            if let Some(lr) = args.lr {
                cfg.hyper.lr = lr;
            }
            if let Some(batch) = args.batch {
                cfg.hyper.batch = batch;
            }
            let resolved = cfg.validate_and_resolve()?;
            commands::train(&cfg, &resolved, args.compare_monolithic)
        }
        Command::Schedule(args) => {
            let cfg = resolve(ExperimentConfig::schedule_default(), &args.common)?;
            let resolved = cfg.validate_and_resolve()?;
            match args.random {
                Some(n) => commands::schedule_random(&cfg, &resolved, n),
                None => commands::schedule_preset(&cfg, &resolved),
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code())
        }
    }
}
