mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use emaformer::Error;

#[derive(Parser)]
#[command(name = "emaformer", version, about = "Train, evaluate and inspect embedding-augmented variate-token forecasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Debug)]
pub struct Common {
    /// Run configuration (flat TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Treat every CSV column as a channel.
    #[arg(long)]
    pub no_timestamp_column: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write the best checkpoint plus a report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train one model per horizon, each in `<out>/horizon_<H>`.
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<usize>,
    },
    /// Test-split MSE and MAE of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory; `{horizon}` is replaced per horizon.
        #[arg(long)]
        checkpoint: Option<String>,
        /// Evaluate several horizons and append their average.
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<usize>,
        /// Write forecasts as CSV, one file per evaluated batch.
        #[arg(long)]
        dump_forecasts: bool,
    },
    /// Correlation stability or attention entropy reports.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: DiagnoseMode,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write the learned channel, phase and joint tables as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DiagnoseMode {
    Cov,
    Entropy,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } | Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => 3,
        Error::Io { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common, horizons } => commands::train(&common, &horizons),
        Command::Eval { common, checkpoint, horizons, dump_forecasts } => {
            commands::eval(&common, checkpoint.as_deref(), &horizons, dump_forecasts)
        }
        Command::Diagnose { common, mode, checkpoint } => commands::diagnose(&common, mode, checkpoint.as_deref()),
        Command::ExportEmbeddings { common, checkpoint } => commands::export_embeddings(&common, &checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
