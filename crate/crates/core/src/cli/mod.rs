//! The `mtl-lab` command line: one subcommand per analysis, configured by
//! a TOML file and reproducible from a seed.

mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub use commands::format_percent;
use commands::{Ctx, Outcome};
use config::{help, ConfigFile};

use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "mtl-lab", version, about = "Deterministic multi-task learning numerics over files")]
pub struct Cli {
    /// TOML config file; relative paths inside it resolve against its directory.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random draw (overrides the config's `seed`).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker thread cap (overrides the config's `threads`).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Directory receiving all artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "mtl-out")]
    pub output: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Task-affinity tensor from per-task feature dumps.
    #[command(after_help = help::AFFINITY)]
    Affinity,
    /// Lowest-cost branched architecture within a resource budget.
    #[command(name = "branch-search", after_help = help::BRANCH)]
    BranchSearch,
    /// Task weights of one balancing strategy.
    #[command(after_help = help::BALANCE)]
    Balance,
    /// Multi-task performance relative to single-task baselines.
    #[command(name = "delta-mtl", after_help = help::DELTA)]
    DeltaMtl,
    /// Cross-task agreement of local pixel affinities across dilations.
    #[command(name = "pixel-affinity", after_help = help::PIXEL)]
    PixelAffinity,
    /// Contrastive and kNN losses with gradient checks on random instances.
    #[command(name = "contrastive-check", after_help = help::CONTRASTIVE)]
    ContrastiveCheck,
    /// Crop-sampler statistics.
    #[command(name = "crop-stats", after_help = help::CROP)]
    CropStats,
    /// Distillation forward passes compared against a per-pixel reference.
    #[command(name = "distill-check", after_help = help::DISTILL)]
    DistillCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Affinity => "affinity",
            Command::BranchSearch => "branch-search",
            Command::Balance => "balance",
            Command::DeltaMtl => "delta-mtl",
            Command::PixelAffinity => "pixel-affinity",
            Command::ContrastiveCheck => "contrastive-check",
            Command::CropStats => "crop-stats",
            Command::DistillCheck => "distill-check",
        }
    }
}

/// A fully resolved invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub output: PathBuf,
}

impl From<Cli> for RunConfig {
    fn from(c: Cli) -> Self {
        RunConfig {
            command: c.command,
            config: c.config,
            seed: c.seed,
            threads: c.threads,
            output: c.output,
        }
    }
}

/// Result of [`run`]: the stdout summary and every file written.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub summary: String,
    pub files: Vec<PathBuf>,
}

pub fn run(rc: &RunConfig) -> Result<RunReport> {
    let cfg = match &rc.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let seed = rc.seed.or(cfg.seed).unwrap_or(0);
    let threads = rc.threads.or(cfg.threads);
    if threads == Some(0) {
        return Err(Error::config("threads", "must be at least 1"));
    }
    let ctx = Ctx {
        cfg: &cfg,
        seed,
        output: &rc.output,
    };
    let dispatch = || -> Result<Outcome> {
        match rc.command {
            Command::Affinity => commands::affinity(&ctx),
            Command::BranchSearch => commands::branch_search(&ctx),
            Command::Balance => commands::balance(&ctx),
            Command::DeltaMtl => commands::delta(&ctx),
            Command::PixelAffinity => commands::pixel(&ctx),
            Command::ContrastiveCheck => commands::contrastive(&ctx),
            Command::CropStats => commands::crop(&ctx),
            Command::DistillCheck => commands::distill(&ctx),
        }
    };
    let outcome = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config("threads", e.to_string()))?
            .install(dispatch)?,
        None => dispatch()?,
    };
    Ok(RunReport {
        summary: outcome.summary,
        files: outcome.files,
    })
}

/// Parses `args`, runs, and maps the outcome to an exit status: 0 on
/// success, 2 on usage errors, 1 on any other failure.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = write!(sink, "{text}");
            return ExitCode::from(code as u8);
        }
    };
    match run(&cli.into()) {
        Ok(report) => {
            let _ = write!(stdout, "{}", report.summary);
            ExitCode::SUCCESS
        }
        Err(e @ Error::Config { .. }) => {
            let _ = writeln!(stderr, "usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            ExitCode::FAILURE
        }
    }
}
