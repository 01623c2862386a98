//! `p2es` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "p2es", version, about = "PPG to 12-lead ECG synthesis pipeline")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Diffusion steps T.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// DDIM sampling steps S.
    #[arg(long, global = true)]
    pub ddim: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub eta: Option<f64>,
    /// Worker threads for batch parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Artifact directory (defaults to `$P2ES_DATA_DIR`, then `data`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the paired cohort and write the subject-level split.
    Synth,
    /// Cluster training subjects and train the PPG encoders.
    Cluster,
    /// Train the denoiser and write the checkpoint.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate 12-lead ECG from PPG windows.
    Generate {
        /// PPG segments (CSV or binary) or a cohort file.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Destination; `.csv` for text, anything else binary.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score generated ECG against references.
    Evaluate {
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Time and spectral entropy per channel.
    Entropy {
        #[arg(long)]
        input: PathBuf,
    },
    /// Overlay and entropy-curve CSVs for plotting.
    Plotdata {
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Record to plot.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Missing { .. } => 2,
                _ => 1,
            })
        }
    }
}
