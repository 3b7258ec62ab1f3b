//! `hpl`: corpus generation, pretraining, downstream evaluation, federated
//! simulation, ablations and reports, all driven by one config file.

mod commands;
mod report;
mod runinfo;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::Ctx;
pub use report::{build_report, ReportRow, ReportTable, TASK_COLUMNS};
pub use runinfo::{hash_path, read_json, write_json, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "hpl", version, about = "Hybrid prototype-supervised ViT pretraining and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for every component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if absent.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// `key.path=value` config override; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Corpus root written by `gen-data`; corpora are generated from the
    /// config when absent.
    #[arg(long, env = "HPL_DATA_DIR", global = true)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BackboneArg {
    /// Pretraining output directory (or its `checkpoint/`); a randomly
    /// initialized backbone is used when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the classification, segmentation, caption and client corpora.
    GenData,
    /// Pretrain on the classification corpus' train split.
    Pretrain,
    /// 5-NN retrieval on frozen features.
    EvalRetrieval(BackboneArg),
    /// Linear probe on frozen features.
    EvalLinear(BackboneArg),
    /// Segmentation head on frozen patch tokens.
    EvalSeg(BackboneArg),
    /// Projection + LoRA caption decoder on frozen tokens.
    EvalCaption(BackboneArg),
    /// Federated averaging of linear heads over the client corpora.
    Fedsim(BackboneArg),
    /// One pretraining + evaluation run per loss configuration.
    Ablate {
        /// Loss terms that may be switched off: patch, koleo, sup.
        #[arg(long, value_delimiter = ',', default_value = "patch,koleo,sup")]
        toggle: Vec<String>,
        /// Evaluations per row: retrieval, linear, seg, caption.
        #[arg(long, value_delimiter = ',', default_value = "retrieval,linear")]
        evals: Vec<String>,
    },
    /// Comparison tables and plots across run directories.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::EvalRetrieval(_) => "eval-retrieval",
            Command::EvalLinear(_) => "eval-linear",
            Command::EvalSeg(_) => "eval-seg",
            Command::EvalCaption(_) => "eval-caption",
            Command::Fedsim(_) => "fedsim",
            Command::Ablate { .. } => "ablate",
            Command::Report { .. } => "report",
        }
    }
}

fn error_kind(e: &hpl_core::Error) -> &'static str {
    use hpl_core::Error::*;
    match e {
        Param(_) => "param",
        Shape(_) => "shape",
        Numerical(_) => "numerical",
        Invariant(_) => "invariant",
        Data(_) => "data",
        Config(_) => "config",
        NonFiniteLoss { .. } => "non_finite_loss",
        Io { .. } => "io",
        Json(_) => "json",
        Image { .. } => "image",
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 2 on usage errors, 1 otherwise with a
/// JSON error object on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = serde_json::json!({
                "error": error_kind(&e),
                "command": cli.command.name(),
                "message": e.to_string(),
            });
            eprintln!("{msg}");
            1
        }
    }
}
