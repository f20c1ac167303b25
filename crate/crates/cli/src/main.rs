//! `bkd`: train, compress, distil, sample and profile diffusion U-Nets.

mod commands;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bkd_core::Error;

#[derive(Debug, Parser)]
#[command(name = "bkd", version, about = "Block removal and distillation for diffusion U-Nets")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Output directory (created if absent).
    #[arg(long, global = true, env = "BKD_OUT", default_value = "bkd-out")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for tensor kernels.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic shapes dataset or ingest an image folder.
    GenData(commands::GenDataArgs),
    /// Train a teacher U-Net from scratch.
    TrainTeacher(commands::TrainTeacherArgs),
    /// Compress a teacher and retrain the student.
    Distill(commands::DistillArgs),
    /// Text-to-image sampling.
    Sample(commands::SampleArgs),
    /// Image-to-image translation.
    Img2img(commands::Img2ImgArgs),
    /// Parameter and MAC report for a config.
    Profile(commands::ProfileArgs),
    /// Block or group removal sensitivity of a trained model.
    Sensitivity(commands::SensitivityArgs),
    /// Cross-attention attribution maps for prompts.
    Attribution(commands::AttributionArgs),
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::Config { .. } | Error::Plan(_) | Error::Misuse { .. } | Error::Json(_) => 2,
                Error::Numerical { .. } => 4,
                _ => 3,
            },
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => match e {
                Error::Config { .. } => "config",
                Error::Dimension(_) => "dimension",
                Error::Domain(_) => "domain",
                Error::Structure { .. } => "structure",
                Error::Plan(_) => "plan",
                Error::Misuse { .. } => "misuse",
                Error::Inheritance(_) => "inheritance",
                Error::Archive { .. } => "archive",
                Error::Numerical { .. } => "numerical",
                Error::Data { .. } => "data",
                Error::Io(_) => "io",
                Error::Json(_) => "json",
                Error::Tensor(_) => "tensor",
                Error::Image(_) => "image",
            },
        }
    }

    fn problems(&self) -> Vec<String> {
        match self {
            CliError::Core(Error::Config { problems }) | CliError::Core(Error::Archive { problems }) => problems.clone(),
            other => vec![other.to_string()],
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    // candle sizes its worker pool from this variable on first use
    std::env::set_var("RAYON_NUM_THREADS", cli.global.threads.max(1).to_string());

    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string(), "problems": e.problems() });
            eprintln!("{report}");
            ExitCode::from(e.exit_code())
        }
    }
}
