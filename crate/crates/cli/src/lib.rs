//! `qpi`: simulate chromatic acquisitions, retrieve phase, train and sample
//! zero-mean diffusion models, evaluate, and run the theory checks.
//!
//! Exit codes: 0 success, 1 user error (bad arguments, config or input),
//! 2 internal error. `QPI_THREADS` sets the worker thread count; outputs do
//! not depend on it.

pub mod commands;
pub mod config;
mod error;
pub mod files;
pub mod manifest;
pub mod units;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use commands::{replay, run, CommandKind, Invocation};
pub use config::{Method, RunConfig};
pub use error::CliError;
pub use manifest::Manifest;

pub const THREADS_ENV: &str = "QPI_THREADS";

#[derive(Debug, Parser)]
#[command(name = "qpi", version, about = "Single-exposure quantitative phase imaging from chromatic aberration")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Simulate a dataset of RGB defocused exposures and phase maps.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Retrieve phase from a through-focus stack, an RGB image or a dataset.
    Solve {
        #[command(flatten)]
        common: Common,
        /// PNG, ZMDT tensor or ZMDS dataset; repeat for stack planes.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        /// Overrides `[solve] method`.
        #[arg(long, value_enum)]
        method: Option<Method>,
    },
    /// Train a diffusion model on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint written by a previous `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw phase samples for every input of a dataset.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// MS-SSIM and MAE of predictions against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Tensor, directory of tensors, or dataset.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Monte Carlo checks of the zero-mean diffusion theory.
    VerifyTheory {
        #[command(flatten)]
        common: Common,
    },
    /// Rerun a command from its manifest and compare output hashes.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration as TOML.
    Defaults,
}

fn existing(path: &Path) -> Result<PathBuf, CliError> {
    path.canonicalize().map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn invocation(command: CommandKind, common: Common, inputs: Vec<(&str, PathBuf)>) -> Result<Invocation, CliError> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    let inputs = inputs
        .into_iter()
        .map(|(role, p)| Ok((role.to_string(), existing(&p)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(Invocation { command, config, inputs, out: common.out })
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let inv = match cli.command {
        Cmd::Defaults => {
            print!("{}", RunConfig::default().to_toml());
            return Ok(());
        }
        Cmd::Replay { manifest, out } => {
            let m = replay(&manifest, &out)?;
            println!("replay of {} matched {} output files", m.command, m.outputs.len());
            return Ok(());
        }
        Cmd::Simulate { common } => {
            let mut inv = invocation(CommandKind::Simulate, common, Vec::new())?;
            if let Some(dir) = inv.config.simulate.source_dir.clone() {
                for f in commands::source_files(&dir, inv.config.simulate.count)? {
                    inv.inputs.push(("source".into(), existing(&f)?));
                }
            }
            inv
        }
        Cmd::Solve { common, inputs, method } => {
            let mut inv = invocation(CommandKind::Solve, common, inputs.into_iter().map(|p| ("input", p)).collect())?;
            if let Some(m) = method {
                inv.config.solve.method = m;
            }
            inv
        }
        Cmd::Train { common, data, resume } => {
            let mut inputs = vec![("data", data)];
            inputs.extend(resume.map(|r| ("resume", r)));
            invocation(CommandKind::Train, common, inputs)?
        }
        Cmd::Sample { common, checkpoint, data } => {
            invocation(CommandKind::Sample, common, vec![("checkpoint", checkpoint), ("data", data)])?
        }
        Cmd::Eval { common, pred, truth } => {
            invocation(CommandKind::Eval, common, vec![("pred", pred), ("truth", truth)])?
        }
        Cmd::VerifyTheory { common } => invocation(CommandKind::VerifyTheory, common, Vec::new())?,
    };
    let m = run(&inv)?;
    for o in &m.outputs {
        log::info!("wrote {} ({})", inv.out.join(&o.path).display(), &o.sha256[..12]);
    }
    Ok(())
}

/// Size the global thread pool from `QPI_THREADS` when set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Internal(e.to_string()))
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match std::panic::catch_unwind(|| dispatch(cli)) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("qpi: {e}");
            e.exit_code()
        }
        Err(_) => 2,
    }
}
