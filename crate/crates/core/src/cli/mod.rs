//! `flowctl` command-line front end.
//!
//! ```text
//! flowctl {train|sample|finetune|eval|convert-vp} --config FILE [--seed S] [--out DIR]
//! ```
//!
//! Exit codes: 0 success, 2 config, 3 divergence, 4 missing artifact,
//! 5 integrity, 6 evaluation mismatch, 1 anything else.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub use config::RunConfig;

use crate::error::{Error, Result};
use crate::sampler::SampleMode;

pub const THREADS_ENV: &str = "FLOWCTL_THREADS";

/// Written next to every run's outputs. Carries no timestamps so reruns
/// produce identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub children: Vec<String>,
    pub artifacts: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, children: Vec<String>, artifacts: Vec<String>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: cfg.hash(),
            seeds: cfg.seeds.clone(),
            children,
            artifacts,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifests serialize")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
        serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
    }
}

/// Worker count from `FLOWCTL_THREADS`, default 1.
pub fn worker_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

/// Run `n_jobs` independent jobs on up to `threads` workers. Results come back
/// in job order; the first failing job (by index) decides the error.
pub fn run_pool<T, F>(n_jobs: usize, threads: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let threads = threads.clamp(1, n_jobs.max(1));
    if threads == 1 {
        return (0..n_jobs).map(job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n_jobs).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n_jobs {
                    break;
                }
                let r = job(i);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("workers joined").into_iter().map(|r| r.expect("every job ran")).collect()
}

#[derive(Debug, Parser)]
#[command(name = "flowctl", version, about = "Flow-matching sampling under stochastic optimal control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed; `sample` then runs this one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Ode,
    Sde,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a base velocity field.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also write the trained field here.
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
    },
    /// Sample trajectories, optionally under test-time or learned control.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Sampler grid steps.
        #[arg(long)]
        steps: Option<usize>,
        /// One value or a comma-separated sweep.
        #[arg(long, value_delimiter = ',')]
        lambda: Vec<f64>,
        /// Base field checkpoint; overrides `field.checkpoint`.
        #[arg(long)]
        checkpoint_in: Option<PathBuf>,
        /// Fine-tuned control checkpoint; overrides `sampler.control`.
        #[arg(long)]
        control_in: Option<PathBuf>,
    },
    /// Fine-tune an additive control with Adjoint Matching.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// One value or a comma-separated sweep.
        #[arg(long, value_delimiter = ',')]
        lambda: Vec<f64>,
        /// Optimizer iterations.
        #[arg(long)]
        steps: Option<usize>,
        /// Trajectories per iteration.
        #[arg(long)]
        batch: Option<usize>,
        /// Grid steps regressed per trajectory.
        #[arg(long)]
        subsample: Option<usize>,
        /// Base field checkpoint; overrides `field.checkpoint`.
        #[arg(long)]
        checkpoint_in: Option<PathBuf>,
        /// Also write the control here (single lambda only).
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
    },
    /// Score candidate runs against a base run.
    Eval {
        /// Only `out_dir` is read from it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write eval.json.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base run directory or report.json.
        #[arg(long)]
        base: PathBuf,
        /// Candidate runs, same forms as `--base`.
        #[arg(long, num_args = 1.., required = true)]
        candidate: Vec<PathBuf>,
    },
    /// Tabulate the FM schedule induced by a VP noising chain.
    ConvertVp {
        #[command(flatten)]
        common: Common,
    },
}

fn sweep(values: Vec<f64>) -> Option<config::Sweep> {
    match values.len() {
        0 => None,
        1 => Some(config::Sweep::One(values[0])),
        _ => Some(config::Sweep::Many(values)),
    }
}

fn resolve(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    let out = cfg.out_dir.clone().ok_or_else(|| Error::Config("no output directory: pass --out or set `out_dir`".into()))?;
    Ok((cfg, out))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, checkpoint_out } => {
            let (mut cfg, out) = resolve(&common)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            let r = commands::train(&cfg, &out, checkpoint_out.as_deref())?;
            println!("trained field: final smoothed loss {:.6} -> {}", r.final_smoothed_loss, r.checkpoint.display());
            if !r.converged {
                eprintln!("warning: smoothed loss is above train.loss_threshold");
            }
        }
        Command::Sample { common, mode, steps, lambda, checkpoint_in, control_in } => {
            let (mut cfg, out) = resolve(&common)?;
            if let Some(s) = common.seed {
                cfg.seeds = vec![s];
            }
            if let Some(m) = mode {
                cfg.sampler.mode = match m {
                    ModeArg::Ode => SampleMode::Ode,
                    ModeArg::Sde => SampleMode::Sde,
                };
            }
            if let Some(n) = steps {
                cfg.sampler.steps = n;
            }
            if let Some(l) = sweep(lambda) {
                cfg.cost.lambda = l;
            }
            if checkpoint_in.is_some() {
                cfg.field.checkpoint = checkpoint_in;
            }
            if control_in.is_some() {
                cfg.sampler.control = control_in;
            }
            cfg.validate()?;
            for o in commands::sample(&cfg, &out)? {
                let focus = o.mean("train", "focus_score").unwrap_or(f64::NAN);
                println!("lambda {}: {} seeds, mean focus_score {focus:.4} -> {}", o.lambda, cfg.seeds.len(), o.dir.display());
            }
        }
        Command::Finetune { common, lambda, steps, batch, subsample, checkpoint_in, checkpoint_out } => {
            let (mut cfg, out) = resolve(&common)?;
            if let Some(s) = common.seed {
                cfg.finetune.seed = s;
            }
            if let Some(l) = sweep(lambda) {
                cfg.finetune.lambda = l;
            }
            let am = &mut cfg.finetune.am;
            if let Some(n) = steps {
                am.steps_total = n;
            }
            if let Some(b) = batch {
                am.batch_trajectories = b;
            }
            if let Some(k) = subsample {
                am.subsample_steps = k;
            }
            if checkpoint_in.is_some() {
                cfg.field.checkpoint = checkpoint_in;
            }
            for o in commands::finetune(&cfg, &out, checkpoint_out.as_deref())? {
                println!(
                    "lambda {}: final smoothed AM loss {:.6}, base checksum {} -> {}",
                    o.lambda,
                    o.final_smoothed_loss,
                    &o.base_checksum[..12],
                    o.checkpoint.display()
                );
            }
        }
        Command::Eval { config, out, base, candidate } => {
            let mut out = out;
            if let Some(path) = config {
                let cfg = RunConfig::load(&path)?;
                out = out.or(cfg.out_dir);
            }
            let table = commands::eval(&base, &candidate, out.as_deref())?;
            print!("{}", table.render());
        }
        Command::ConvertVp { common } => {
            let (cfg, out) = resolve(&common)?;
            let (path, table) = commands::convert_vp(&cfg, &out)?;
            println!("FM schedule from K = {} VP chain -> {}", table.k, path.display());
        }
    }
    Ok(())
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                eprint!("{e}");
                return 2;
            }
            // Help may be piped into something that closes early.
            let _ = write!(std::io::stdout(), "{e}");
            return 0;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("flowctl: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_preserves_order_and_first_error() {
        let out = run_pool(7, 3, |i| Ok(i * i)).unwrap();
        assert_eq!(out, vec![0, 1, 4, 9, 16, 25, 36]);
        let err = run_pool(6, 4, |i| if i >= 2 { Err(Error::Config(format!("job {i}"))) } else { Ok(i) }).unwrap_err();
        assert_eq!(err.to_string(), "config error: job 2");
        assert!(run_pool(0, 4, Ok).unwrap().is_empty());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["flowctl", "train"]), 2);
        assert_eq!(run(["flowctl", "frobnicate"]), 2);
        assert_eq!(run(["flowctl", "--version"]), 0);
    }

    #[test]
    fn missing_config_file_exits_2() {
        assert_eq!(run(["flowctl", "train", "--config", "/nonexistent/run.toml", "--out", "/tmp/x"]), 2);
    }
}
