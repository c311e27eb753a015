use clap::{Args, Parser, Subcommand};
use gprune_cli::{commands, config, errors::CliError};
use std::path::PathBuf;
use std::process::ExitCode;

/// Gravity-regularized training and structured pruning of small CNNs.
#[derive(Parser)]
#[command(name = "gprune", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the gravity rate alpha_g.
    #[arg(long = "alpha-g")]
    alpha_g: Option<f64>,
    /// Replace the pruning-rate list with a single rate.
    #[arg(long = "prune-rate")]
    prune_rate: Option<f64>,
    /// Where outputs go (default: config out_dir, then ./gprune-out).
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, optionally under the gravity regularizer.
    Train(Common),
    /// Prune a frozen checkpoint at every configured rate.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to prune.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Fine-tune a pruned checkpoint with plain SGD (gravity off).
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to fine-tune.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the (gravity rate x pruning rate) accuracy sweep.
    Sweep(Common),
    /// Inspect a checkpoint: masses, attractors, cost report.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to analyze.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train(c) | Command::Sweep(c) => c,
            Command::Prune { common, .. }
            | Command::Finetune { common, .. }
            | Command::Analyze { common, .. } => common,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let common = cli.command.common();
    let overrides = config::Overrides {
        seed: common.seed,
        alpha_g: common.alpha_g,
        prune_rate: common.prune_rate,
    };
    let loaded = config::load_config(&common.config, &overrides)?;
    let out_dir = common.out_dir.clone();

    match &cli.command {
        Command::Train(_) => {
            commands::train::run(&loaded, out_dir.as_deref())?;
        }
        Command::Prune { checkpoint, .. } => {
            commands::prune::run(&loaded, checkpoint, out_dir.as_deref())?;
        }
        Command::Finetune { checkpoint, .. } => {
            commands::finetune::run(&loaded, checkpoint, out_dir.as_deref())?;
        }
        Command::Sweep(_) => {
            commands::sweep::run(&loaded, out_dir.as_deref())?;
        }
        Command::Analyze { checkpoint, .. } => {
            commands::analyze::run(&loaded, checkpoint, out_dir.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gprune: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
