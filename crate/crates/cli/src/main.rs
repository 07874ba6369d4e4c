use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use advlab_cli::{cmd_attack, cmd_plot, cmd_probe, cmd_train, Figure, ProbeOptions};

#[derive(Parser)]
#[command(name = "advlab", about = "Adversarial-training laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment/attack/probe configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's out_dir where present).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override folded into the run-level seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv plus checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from a final.ckpt written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate one attack per sample against a checkpoint.
    Attack {
        #[command(flatten)]
        common: Common,
    },
    /// Landscape metrics and sweeps against a checkpoint.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Comma-separated PGD step counts, e.g. 1,2,5,10,20,50.
        #[arg(long, value_delimiter = ',')]
        pgd_sweep: Option<Vec<usize>>,
        /// Comma-separated subset sizes for sensitivity sweeps.
        #[arg(long, value_delimiter = ',')]
        sample_sweep: Option<Vec<usize>>,
        /// Also measure the softplus twin's curvature per sample.
        #[arg(long)]
        softplus_twin: bool,
        /// Degenerate-attack probe: scale:M, flip:P or weight-noise:S.
        #[arg(long)]
        degenerate: Option<String>,
    },
    /// Reshape a stored CSV into tidy (series,x,y) plot data.
    Plot {
        /// Source CSV (metrics.csv or a probe output).
        #[arg(long)]
        input: PathBuf,
        /// fig1|fig2|fig3|fig4|a1|a2|a3
        #[arg(long)]
        figure: Figure,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let _workers = advlab_cli::worker_threads();
    let result = match cli.command {
        Command::Train { common, resume } => cmd_train(
            &common.config,
            common.out.as_deref(),
            common.seed,
            resume.as_deref(),
        ),
        Command::Attack { common } => {
            cmd_attack(&common.config, common.out.as_deref(), common.seed)
        }
        Command::Probe {
            common,
            pgd_sweep,
            sample_sweep,
            softplus_twin,
            degenerate,
        } => cmd_probe(
            &common.config,
            common.out.as_deref(),
            common.seed,
            &ProbeOptions {
                pgd_sweep,
                sample_sweep,
                softplus_twin,
                degenerate,
            },
        ),
        Command::Plot { input, figure, out } => cmd_plot(&input, figure, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
