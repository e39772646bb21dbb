//! `npd`: each pipeline phase as a subcommand, plus the full loop.

mod commands;
mod config;
mod meta;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Role;
use npd_core::NpdError;

#[derive(Debug, Parser)]
#[command(name = "npd", version, about = "Near-policy distillation at desk scale")]
struct Cli {
    /// Config file; relative artifact paths resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic task corpus and its eval split.
    Corpus {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        eval_out: Option<PathBuf>,
    },
    /// Supervised pretraining of the teacher or a warm-started student.
    Pretrain {
        #[arg(long, value_enum, default_value = "teacher")]
        role: RoleArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample trajectories from a frozen student snapshot.
    Gen {
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Teacher and student IFD, Δ-IFD and zone for every trajectory.
    Score {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep the Proximal zone; writes kept ids and zone statistics.
    Filter {
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        /// Keep every scoreable trajectory.
        #[arg(long)]
        no_filter: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        stats_out: Option<PathBuf>,
    },
    /// Pack kept trajectories into fixed-length training rows.
    Pack {
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long)]
        kept: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Teacher prefill over packs; writes the top-k sidecar.
    Annotate {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        packs: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one refresh interval starting at a refresh epoch.
    Train(TrainArgs),
    /// The full loop: refresh, annotate and train for every epoch.
    Run {
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Policy lag between a learner and the generator snapshot.
    Klmon {
        #[arg(long)]
        learner: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        step: u64,
    },
    /// Per-phase wall-time breakdown of a metrics log.
    Stats {
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// First epoch of the interval; must be a refresh epoch.
    #[arg(long)]
    start_epoch: usize,
    #[arg(long)]
    student: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    packs: Option<PathBuf>,
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum RoleArg {
    Teacher,
    Student,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Self {
        match r {
            RoleArg::Teacher => Role::Teacher,
            RoleArg::Student => Role::Student,
        }
    }
}

fn error_kind(e: &NpdError) -> (&'static str, u8) {
    match e {
        NpdError::MissingArtifact(_) => ("missing_artifact", 2),
        NpdError::Config(_) => ("config", 3),
        NpdError::Input(_) => ("input", 3),
        NpdError::Parse { .. } => ("parse", 3),
        NpdError::Format(_) => ("format", 3),
        NpdError::OversizeSequence { .. } => ("oversize_sequence", 3),
        NpdError::Staleness(_) => ("staleness", 3),
        NpdError::Provenance(_) => ("provenance", 3),
        NpdError::FilterStarvation { .. } => ("filter_starvation", 3),
        NpdError::Numerical(_) => ("numerical", 4),
        NpdError::DivisionGuard { .. } => ("division_guard", 4),
        NpdError::Io { .. } => ("io", 1),
    }
}

fn report(kind: &str, message: String, code: u8) -> ExitCode {
    let body = serde_json::json!({ "error": { "kind": kind, "message": message, "exit_code": code } });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("NPD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("NPD_THREADS={raw} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report("usage", e.to_string(), 3),
    };
    if let Err(msg) = init_threads() {
        return report("config", msg, 3);
    }
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = error_kind(&e);
            report(kind, e.to_string(), code)
        }
    }
}
