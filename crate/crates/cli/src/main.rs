//! Command-line front end: tokenizer and transformer training, sampling,
//! inpainting, sampler ablations and forward-count benchmarks.

mod commands;
mod config;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use maskgen::training::MaskSchedule;

use commands::{AblateArgs, InpaintArgs, SampleArgs, SamplerFlags};

/// Exit status 2 for bad input or configuration, 1 for anything that
/// fails while running.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<maskgen::Error> for Failure {
    fn from(e: maskgen::Error) -> Self {
        match e {
            maskgen::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "maskgen", version, about = "Masked generative token models at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the VQ tokenizer on the configured dataset.
    TrainVq {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the masked transformer on tokenized data.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate images by iterative parallel decoding.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Condition on this class; unconditional when absent.
        #[arg(long)]
        class: Option<usize>,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Also write per-step mask and token sheets.
        #[arg(long)]
        snapshots: bool,
        /// Output directory (defaults to the checkpoint's run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate the non-white regions of an image. Writes the image, a
    /// JSON-lines trace and the final token grid next to `--output`.
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Same size as the image; white marks regions to keep.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        class: Option<usize>,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        output: PathBuf,
    },
    /// Sweep sampler settings and score each cell.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        schedules: Vec<MaskSchedule>,
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        gumbel: Vec<f32>,
        #[arg(long, value_delimiter = ',')]
        cfg: Vec<f32>,
        /// Samples per cell.
        #[arg(long, default_value_t = 128)]
        count: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Count forward passes of parallel against autoregressive decoding.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',')]
        steps: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        cfg: Vec<f32>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::TrainVq { config } => commands::train_vq(&config),
        Command::Train { config, resume } => commands::train(&config, resume.as_deref()),
        Command::Sample {
            checkpoint,
            class,
            sampler,
            count,
            snapshots,
            out,
        } => commands::sample(SampleArgs {
            checkpoint: &checkpoint,
            class,
            flags: &sampler,
            count,
            snapshots,
            out: out.as_deref(),
        }),
        Command::Inpaint {
            checkpoint,
            image,
            mask,
            class,
            sampler,
            output,
        } => commands::inpaint(InpaintArgs {
            checkpoint: &checkpoint,
            image: &image,
            mask: &mask,
            class,
            flags: &sampler,
            output: &output,
        }),
        Command::Ablate {
            checkpoint,
            schedules,
            steps,
            gumbel,
            cfg,
            count,
            output,
        } => commands::ablate(AblateArgs {
            checkpoint: &checkpoint,
            schedules: &schedules,
            steps: &steps,
            gumbel: &gumbel,
            cfg: &cfg,
            count,
            output: output.as_deref(),
        }),
        Command::Bench {
            checkpoint,
            steps,
            cfg,
            output,
        } => commands::bench(&checkpoint, &steps, &cfg, output.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
