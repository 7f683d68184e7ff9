//! `glab`: config-driven experiment orchestration for the 2-D diffusion
//! guidance laboratory. Exit codes: 0 success, 2 validation error,
//! 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Ctx, ReproFigure};
use config::ExperimentConfig;
use glab_core::guide::GuidanceMode;
use glab_core::Error;

#[derive(Parser)]
#[command(
    name = "glab",
    about = "2-D diffusion guidance laboratory: analytic worlds, energy-based denoisers, guided sampling",
    version
)]
struct Cli {
    /// TOML experiment configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory holding per-config run directories.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Cap the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overwrite existing artifacts of this run directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build and dump the fractal two-class world.
    World {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        depth: Option<u32>,
        #[arg(long)]
        per_branch: Option<usize>,
    },
    /// Train the energy-based denoiser; writes checkpoints and a log.
    Train {
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Switch the final-head objective to the acceleration loss.
        #[arg(long)]
        accel: bool,
        /// Comma-separated iterations at which to snapshot checkpoints
        /// (for autoguidance aux models).
        #[arg(long)]
        snapshots: Option<String>,
    },
    /// Sample from a checkpoint under one guidance setting.
    Sample {
        /// Checkpoint path (defaults to this run's final checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Guidance mode: none | cfg | autoguidance | ig | ig_cfg.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        w: Option<f64>,
        #[arg(long)]
        w2: Option<f64>,
        #[arg(long)]
        sigma_low: Option<f64>,
        #[arg(long)]
        sigma_high: Option<f64>,
        #[arg(long)]
        aux_checkpoint: Option<String>,
    },
    /// Compute metrics and a figure for previously sampled runs.
    Eval {
        /// samples_*.csv files to evaluate.
        samples: Vec<PathBuf>,
    },
    /// Sample every configured guidance setting against one checkpoint.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Reproduce the toy figures (fig3: guidance comparison, fig4:
    /// training acceleration).
    Repro {
        /// fig3 | fig4
        figure: String,
        /// paper (default) | ci
        #[arg(long, default_value = "paper")]
        profile: String,
    },
}

fn parse_mode(s: &str) -> Result<GuidanceMode, Error> {
    match s {
        "none" => Ok(GuidanceMode::None),
        "cfg" => Ok(GuidanceMode::Cfg),
        "autoguidance" => Ok(GuidanceMode::Autoguidance),
        "ig" => Ok(GuidanceMode::Ig),
        "ig_cfg" => Ok(GuidanceMode::IgCfg),
        other => Err(Error::Config(format!(
            "unknown guidance mode {other:?} (expected none|cfg|autoguidance|ig|ig_cfg)"
        ))),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }

    match cli.cmd {
        Cmd::World { seed, depth, per_branch } => {
            if let Some(s) = seed {
                config.world.seed = s;
            }
            if let Some(d) = depth {
                config.world.depth = d;
            }
            if let Some(p) = per_branch {
                config.world.per_branch = p;
            }
            config.validate()?;
            commands::cmd_world(&Ctx { config, force: cli.force })
        }
        Cmd::Train { iterations, batch, seed, accel, snapshots } => {
            if let Some(i) = iterations {
                config.train.iterations = i;
            }
            if let Some(b) = batch {
                config.train.batch = b;
            }
            if let Some(s) = seed {
                config.train.seed = s;
            }
            if accel {
                config.train.accel = true;
            }
            if let Some(list) = snapshots {
                config.train.snapshot_iterations = list
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|e| Error::Config(format!("bad snapshot iteration {s:?}: {e}")))
                    })
                    .collect::<Result<Vec<usize>, Error>>()?;
            }
            config.validate()?;
            commands::cmd_train(&Ctx { config, force: cli.force })
        }
        Cmd::Sample {
            checkpoint,
            count,
            seed,
            mode,
            w,
            w2,
            sigma_low,
            sigma_high,
            aux_checkpoint,
        } => {
            if let Some(c) = count {
                config.sample.count = c;
            }
            if let Some(s) = seed {
                config.sample.seed = s;
            }
            let mut spec = config.guidance.first().cloned().unwrap_or_default();
            if let Some(m) = mode {
                spec.mode = parse_mode(&m)?;
            }
            if let Some(v) = w {
                spec.w = v;
            }
            if let Some(v) = w2 {
                spec.w2 = v;
            }
            if let Some(v) = sigma_low {
                spec.sigma_low = v;
            }
            if let Some(v) = sigma_high {
                spec.sigma_high = Some(v);
            }
            if let Some(a) = aux_checkpoint {
                spec.aux_checkpoint = Some(a);
            }
            config.guidance = vec![spec.clone()];
            config.validate()?;
            commands::cmd_sample(&Ctx { config, force: cli.force }, checkpoint, &spec)
        }
        Cmd::Eval { samples } => {
            config.validate()?;
            commands::cmd_eval(&Ctx { config, force: cli.force }, &samples)
        }
        Cmd::Sweep { checkpoint } => {
            config.validate()?;
            commands::cmd_sweep(&Ctx { config, force: cli.force }, checkpoint)
        }
        Cmd::Repro { figure, profile } => {
            match profile.as_str() {
                "paper" => {}
                "ci" => {
                    let keep_seed = config.train.seed;
                    config.train = glab_core::train::TrainConfig::ci_profile();
                    config.train.seed = keep_seed;
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown profile {other:?} (expected paper|ci)"
                    )))
                }
            }
            config.validate()?;
            let fig = match figure.as_str() {
                "fig3" => ReproFigure::Fig3,
                "fig4" => ReproFigure::Fig4,
                other => {
                    return Err(Error::Config(format!(
                        "unknown figure {other:?} (expected fig3|fig4)"
                    )))
                }
            };
            commands::cmd_repro(&Ctx { config, force: cli.force }, fig)
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
