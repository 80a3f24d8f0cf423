//! `ttm`: generate synthetic data, train, evaluate, run ablations and SNR
//! sweeps, and check gradients.
//!
//! Configuration precedence is flags > config file > preset. Progress goes
//! to stdout as `key=value` lines. Exit codes: 0 success, 1 usage or
//! validation error, 2 runtime failure.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{error::ErrorKind, Args, Parser, Subcommand};
use ttm_core::CoreError;

#[derive(Parser)]
#[command(name = "ttm", version, about = "Talking-to-me detection experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Base preset: default, bench or tiny.
    #[arg(long)]
    preset: Option<String>,
    /// TOML file overlaid on the preset.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Root for run directories [default: paths.output, then $TTM_OUTPUT, then ./runs].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self, default_preset: &str) -> Result<ttm_core::RunConfig> {
        let preset = self.preset.as_deref().unwrap_or(default_preset);
        run::resolve_config(preset, self.config.as_deref(), &self.sets, self.seed)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the train, val and test splits of the synthetic scenario.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one model and save its checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// full, audio-only, baseline or a `+`-joined subset of vstr, psa, vmma.
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Re-score a training run from its checkpoint.
    Eval {
        /// Directory written by `train`.
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train every toggle combination over the configured seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also compare prompt threshold settings.
        #[arg(long)]
        thresholds: bool,
    },
    /// Compare noise-mixed training against clean training across SNR levels.
    SnrSweep {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of the training objective (tiny preset by default).
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "full")]
        variant: String,
        /// Index of the training sequence to check.
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Head orientation from a 6D vector, or per frame from a trained run.
    #[command(group = clap::ArgGroup::new("source").required(true).args(["vector", "run"]))]
    Pose {
        /// Six comma-separated numbers `a1,a2`.
        #[arg(long, allow_hyphen_values = true)]
        vector: Option<String>,
        /// Directory written by `train`; writes pose.csv.
        #[arg(long, value_name = "DIR")]
        run: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

/// Outcome of a command that ran to completion.
enum Done {
    Ok,
    /// Finished, but some part failed.
    Failed,
}

fn execute(cmd: Cmd) -> Result<Done> {
    let done = |failures: usize| if failures == 0 { Done::Ok } else { Done::Failed };
    match cmd {
        Cmd::Generate { cfg } => {
            commands::generate(&cfg.resolve("default")?, cfg.out.as_deref())?;
            Ok(Done::Ok)
        }
        Cmd::Train { cfg, variant } => {
            let v = run::parse_variant(&variant)?;
            commands::train(&cfg.resolve("default")?, v, cfg.out.as_deref())?;
            Ok(Done::Ok)
        }
        Cmd::Eval { run, out } => {
            commands::eval(&run, out.as_deref())?;
            Ok(Done::Ok)
        }
        Cmd::Ablate { cfg, thresholds } => Ok(done(commands::ablate(&cfg.resolve("default")?, cfg.out.as_deref(), thresholds)?)),
        Cmd::SnrSweep { cfg } => Ok(done(commands::snr_sweep(&cfg.resolve("default")?, cfg.out.as_deref())?)),
        Cmd::Gradcheck { cfg, variant, sequence, eps, tol } => {
            let v = run::parse_variant(&variant)?;
            let pass = commands::gradcheck(&cfg.resolve("tiny")?, v, sequence, eps, tol)?;
            Ok(if pass { Done::Ok } else { Done::Failed })
        }
        Cmd::Pose { vector, run, split, out } => {
            match (vector, run) {
                (Some(v), _) => commands::pose_vector(&v)?,
                (None, Some(r)) => commands::pose_run(&r, &split, out.as_deref())?,
                (None, None) => unreachable!("clap enforces the source group"),
            }
            Ok(Done::Ok)
        }
    }
}

fn is_validation(e: &anyhow::Error) -> bool {
    e.downcast_ref::<run::Invalid>().is_some()
        || e.downcast_ref::<CoreError>().is_some_and(|c| matches!(c.root(), CoreError::Config(_)))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(cli.cmd) {
        Ok(Done::Ok) => ExitCode::SUCCESS,
        Ok(Done::Failed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
