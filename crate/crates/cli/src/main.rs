use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod artifacts;
mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "facemotion", version, about = "Speech-driven 3D facial motion: synthesis, training, generation, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON config file; may be partial, unspecified fields keep their defaults
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Starting learning rate; the end rate is a tenth of it
    #[arg(long)]
    pub lr: Option<f64>,
    /// Train on the first N clips only
    #[arg(long)]
    pub clips: Option<usize>,
    /// Continue from model and optimizer state in the output directory
    #[arg(long)]
    pub resume: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DecodeArg {
    Argmax,
    Sample,
}

#[derive(Args, Debug, Clone)]
pub struct DecodeFlags {
    #[arg(long, value_enum)]
    pub decode: Option<DecodeArg>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a deterministic synthetic dataset directory
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: train the multi-scale residual VQ codec
    TrainCodec {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        /// Single-scale quantizer (schedule [K])
        #[arg(long)]
        no_multiscale: bool,
        /// Encoder and decoder ignore the previous window
        #[arg(long)]
        no_temporal_vq: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 2: train the autoregressive token generator against a frozen codec
    TrainAr {
        #[arg(long)]
        data: PathBuf,
        /// Directory written by train-codec
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        /// Do not condition on the previous window's tokens
        #[arg(long)]
        no_temporal_ar: bool,
        /// Replace the style encoder by a learned constant
        #[arg(long)]
        no_style: bool,
        /// Keep the style encoder at its initial weights
        #[arg(long)]
        freeze_style: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Tokenize a motion clip with the codec
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        motion: PathBuf,
        /// Token pyramids as JSON
        #[arg(long)]
        out: PathBuf,
        /// Also decode the tokens back into an ARTM clip
        #[arg(long)]
        recon: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate motion from speech
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        /// Example motion clip whose first window sets the speaking style
        #[arg(long)]
        style: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        decode: DecodeFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Compare predicted and ground-truth clips (LVE, FDD, MOD)
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        pred: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        gt: Vec<PathBuf>,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Identity coefficients as a JSON array; zeros when absent
        #[arg(long)]
        beta: Option<PathBuf>,
        #[arg(long)]
        scale: Option<f64>,
        /// Use the deviation-of-norm FDD convention
        #[arg(long)]
        fdd_deviation_of_norm: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Streaming generation latency over synthetic audio
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seconds: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write one OBJ mesh per frame plus a CSV of the parameters
    ExportObj {
        #[arg(long)]
        motion: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        beta: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use facemotion::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Contract(_) => 2,
                E::Numeric(_) => 4,
                E::Dimension(_) | E::Format(_) | E::State(_) | E::Io(_) | E::Json(_) => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    4
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
