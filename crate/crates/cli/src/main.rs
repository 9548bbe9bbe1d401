mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcpersona::data::JointMode;
use mcpersona::trainer::InitMode;

use crate::config::Invalid;

#[derive(Debug, Parser)]
#[command(name = "mcpersona", version, about = "Multi-concept personalization of a miniature vision-language model")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand; flags override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run with this single seed instead of the configured list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub init: Option<InitMode>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario with its training and evaluation QA files.
    BuildDataset {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=4))]
        concepts: u8,
        #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u16).range(1..))]
        images: u16,
        #[arg(long, value_parser = parse_joint)]
        joint_mode: Option<JointMode>,
    },
    /// Learn concept tokens, one checkpoint per seed.
    Train,
    /// Locate every concept in an image and write the marked image and report.
    Ground {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every checkpoint on the evaluation suite.
    Evaluate,
    /// Compare k-means and random token initialization.
    AblateInit,
    /// Regenerate the frozen base model.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn parse_joint(s: &str) -> Result<JointMode, String> {
    match s {
        "base" => Ok(JointMode::Base),
        "appendix" => Ok(JointMode::Appendix),
        other => Err(format!("unknown joint mode {other:?} (expected base or appendix)")),
    }
}

const USAGE: u8 = 1;
const VALIDATION: u8 = 2;
const RUNTIME: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Invalid>().is_some() {
            return VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<mcpersona::Error>() {
            return match e {
                mcpersona::Error::Validation(_) | mcpersona::Error::Input(_) | mcpersona::Error::Format(_) => VALIDATION,
                _ => RUNTIME,
            };
        }
    }
    RUNTIME
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
