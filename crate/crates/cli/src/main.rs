mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "objectseeker", version, about = "Certified patch-robust object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML file of `key = value` settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// COCO-style annotations.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Detections fixture; the synthetic detector is used when absent.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Mask manifest; generated from the config when absent.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Image size for datasets without images.
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the mask manifest.
    GenMasks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        width: u32,
        #[arg(long)]
        height: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset: annotations, mask manifest and detections.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        n_images: usize,
        #[arg(long, default_value_t = 3)]
        objects_per_image: usize,
        #[arg(long, default_value_t = 128)]
        width: u32,
        #[arg(long, default_value_t = 128)]
        height: u32,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Robust inference; writes boxes per image.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Certify every ground-truth object.
    Certify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// CertR summary per location model.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Clean precision/recall sweep, AP and optional CertR at a target recall.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// PR table.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Adaptive attacks on every certified object and placement; exits 3 on
    /// any violation.
    AttackSim {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Maps onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Violation(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
            Failure::Violation(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenMasks { common, width, height, out } => {
            commands::gen_masks(&common, width, height, &out)
        }
        Command::Synth { common, n_images, objects_per_image, width, height, out_dir } => {
            commands::synth(&common, n_images, objects_per_image, width, height, &out_dir)
        }
        Command::Infer { common, data, out } => commands::infer(&common, &data, &out),
        Command::Certify { common, data, out, csv } => {
            commands::certify(&common, &data, &out, csv.as_deref())
        }
        Command::Eval { common, data, out, csv } => commands::eval(&common, &data, &out, csv.as_deref()),
        Command::AttackSim { common, data, out } => commands::attack_sim(&common, &data, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) | Failure::Data(e) => eprintln!("error: {e:#}"),
                Failure::Violation(msg) => eprintln!("violation: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}
