//! Subcommand implementations: build worlds, train, sample under guidance,
//! evaluate, sweep, and reproduce the toy figures.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use glab_core::eval::{self, Panel, RunReport};
use glab_core::guide::{self, DenoiserBundle, GuidanceMode, GuidanceSpec};
use glab_core::mixture::{self, Class, WorldModel};
use glab_core::net::{self, NetParams};
use glab_core::sampler::{self, SampleRun};
use glab_core::train::{self, TrainConfig};
use glab_core::{Error, Result};

use crate::config::{guard_overwrite, ExperimentConfig};

pub struct Ctx {
    pub config: ExperimentConfig,
    pub force: bool,
}

impl Ctx {
    fn run_dir(&self) -> PathBuf {
        self.config.run_dir()
    }

    fn ensure_run_dir(&self) -> Result<PathBuf> {
        let dir = self.run_dir();
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn world_path(&self) -> PathBuf {
        self.run_dir().join("world.json")
    }

    /// Load the run's world if present, otherwise build it from the config
    /// (and persist it so later commands agree on it).
    fn load_or_build_world(&self) -> Result<WorldModel> {
        let path = self.world_path();
        if path.exists() {
            return mixture::load_world(&path);
        }
        let w = &self.config.world;
        let world = mixture::build_fractal_mixture(w.seed, w.depth, w.per_branch, &w.branch)?;
        world.validate()?;
        self.ensure_run_dir()?;
        mixture::save_world(&world, &path)?;
        Ok(world)
    }

    fn checkpoint_dir(&self) -> PathBuf {
        self.run_dir().join("checkpoints")
    }

    fn final_checkpoint_path(&self) -> PathBuf {
        self.checkpoint_dir()
            .join(format!("{}.glabckpt", train::checkpoint_id(self.config.train.iterations)))
    }
}

/// Build, standardize, validate, and dump the world, plus a contour-only
/// preview figure.
pub fn cmd_world(ctx: &Ctx) -> Result<()> {
    let dir = ctx.ensure_run_dir()?;
    let world_path = ctx.world_path();
    let preview_path = dir.join("world_preview.svg");
    guard_overwrite(&[world_path.clone(), preview_path.clone()], ctx.force)?;

    let w = &ctx.config.world;
    let world = mixture::build_fractal_mixture(w.seed, w.depth, w.per_branch, &w.branch)?;
    world.validate()?;
    mixture::save_world(&world, &world_path)?;
    let preview = eval::render_figure(
        &ctx.config.eval,
        &world,
        &[Panel { title: "ground truth (99% mass contours)".into(), samples: vec![], classes: vec![] }],
    )?;
    std::fs::write(&preview_path, preview)?;
    println!(
        "world: {} components ({} per class, {} branches) -> {}",
        world.total_components(),
        world.class(Class::A).len(),
        world.class(Class::A).branch_count(),
        world_path.display()
    );
    Ok(())
}

/// Train with the configured profile; write checkpoints and train.log.csv.
pub fn cmd_train(ctx: &Ctx) -> Result<()> {
    let dir = ctx.ensure_run_dir()?;
    let log_path = dir.join("train.log.csv");
    guard_overwrite(&[log_path.clone(), ctx.final_checkpoint_path()], ctx.force)?;
    let world = ctx.load_or_build_world()?;
    let cfg = &ctx.config.train;
    std::fs::create_dir_all(ctx.checkpoint_dir())?;

    let total = cfg.iterations;
    let run = train::run_training_with(cfg, &world, |row| {
        if (row.iter + 1) % 128 == 0 || row.iter + 1 == total {
            eprintln!(
                "iter {:>6}/{total}  lr {:.5}  loss_final {:.5}  loss_inter {:.5}",
                row.iter + 1,
                row.lr,
                row.loss_final,
                row.loss_inter
            );
        }
    })?;

    let mut csv = String::from("iter,lr,loss_final,loss_inter,grad_norm,wallclock_s\n");
    for r in &run.log {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter, r.lr, r.loss_final, r.loss_inter, r.grad_norm, r.wallclock_s
        ));
    }
    std::fs::write(&log_path, csv)?;
    for ckpt in &run.checkpoints {
        let path = ctx.checkpoint_dir().join(format!("{}.glabckpt", ckpt.id));
        net::save_checkpoint(&path, &ckpt.params, &ckpt.ema)?;
    }
    println!(
        "train: {} iterations, {} checkpoints -> {}",
        run.log.len(),
        run.checkpoints.len(),
        ctx.checkpoint_dir().display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SampleMeta {
    pub nfe_per_sample: usize,
    pub expected_nfe: usize,
    pub guidance: GuidanceSpec,
    pub checkpoint: String,
    pub seed: u64,
    pub config_hash: String,
}

fn load_checkpoint_at(path: &Path) -> Result<(NetParams, NetParams)> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "checkpoint not found: {}",
            path.display()
        )));
    }
    net::load_checkpoint(path)
}

/// Resolve an aux-checkpoint reference: an existing path, or an id inside
/// the run's checkpoint directory.
fn resolve_aux(ctx: &Ctx, spec: &GuidanceSpec) -> Result<Option<NetParams>> {
    let Some(id) = &spec.aux_checkpoint else {
        return Ok(None);
    };
    let direct = PathBuf::from(id);
    let path = if direct.exists() {
        direct
    } else {
        ctx.checkpoint_dir().join(format!("{id}.glabckpt"))
    };
    let (_, ema) = load_checkpoint_at(&path)?;
    Ok(Some(ema))
}

fn sample_with_guidance(
    ctx: &Ctx,
    ema: &NetParams,
    aux: Option<NetParams>,
    spec: &GuidanceSpec,
) -> Result<SampleRun> {
    let bundle = DenoiserBundle::new(ema.clone(), aux);
    let denoiser = guide::guided_denoiser(&bundle, spec.clone())?;
    let run = sampler::heun_sample_round_robin(&denoiser, &ctx.config.sample)?;
    let expected = ctx.config.sample.nfe();
    if run.nfe_per_sample != expected {
        return Err(Error::Invariant(format!(
            "NFE {} does not match the Heun budget {expected}",
            run.nfe_per_sample
        )));
    }
    Ok(run)
}

fn write_samples_csv(path: &Path, run: &SampleRun) -> Result<()> {
    let mut csv = String::from("index,class,x,y\n");
    for (i, (x, c)) in run.samples.iter().zip(&run.classes).enumerate() {
        csv.push_str(&format!("{i},{c},{},{}\n", x[0], x[1]));
    }
    std::fs::write(path, csv)?;
    Ok(())
}

fn read_samples_csv(path: &Path) -> Result<(Vec<[f64; 2]>, Vec<Class>)> {
    let text = std::fs::read_to_string(path)?;
    let mut samples = Vec::new();
    let mut classes = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::Format(format!(
                "{}:{}: expected 4 columns",
                path.display(),
                ln + 1
            )));
        }
        classes.push(match cols[1] {
            "A" => Class::A,
            "B" => Class::B,
            other => {
                return Err(Error::Format(format!(
                    "{}:{}: unknown class {other:?}",
                    path.display(),
                    ln + 1
                )))
            }
        });
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), ln + 1)))
        };
        samples.push([parse(cols[2])?, parse(cols[3])?]);
    }
    Ok((samples, classes))
}

/// Load a checkpoint, construct the guided denoiser, sample, and dump
/// samples plus provenance.
pub fn cmd_sample(ctx: &Ctx, checkpoint: Option<PathBuf>, spec: &GuidanceSpec) -> Result<()> {
    spec.validate()?;
    let dir = ctx.ensure_run_dir()?;
    let tag = spec.tag();
    let csv_path = dir.join(format!("samples_{tag}.csv"));
    let meta_path = dir.join(format!("samples_{tag}.meta.json"));
    guard_overwrite(&[csv_path.clone(), meta_path.clone()], ctx.force)?;

    let ckpt_path = checkpoint.unwrap_or_else(|| ctx.final_checkpoint_path());
    let (_, ema) = load_checkpoint_at(&ckpt_path)?;
    let aux = resolve_aux(ctx, spec)?;
    let run = sample_with_guidance(ctx, &ema, aux, spec)?;
    write_samples_csv(&csv_path, &run)?;
    let meta = SampleMeta {
        nfe_per_sample: run.nfe_per_sample,
        expected_nfe: ctx.config.sample.nfe(),
        guidance: spec.clone(),
        checkpoint: ckpt_path.display().to_string(),
        seed: ctx.config.sample.seed,
        config_hash: ctx.config.hash(),
    };
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    println!(
        "sample: {} samples (NFE {} per sample) -> {}",
        run.samples.len(),
        run.nfe_per_sample,
        csv_path.display()
    );
    Ok(())
}

/// Per-class 99%-mass thresholds on the eval grid.
fn class_taus(ctx: &Ctx, world: &WorldModel) -> Result<[f64; 2]> {
    let grid = ctx.config.eval.grid();
    let q = ctx.config.eval.contour_quantile;
    Ok([
        mixture::mass_threshold(world, Class::A, q, &grid)?,
        mixture::mass_threshold(world, Class::B, q, &grid)?,
    ])
}

fn report_for(
    ctx: &Ctx,
    world: &WorldModel,
    taus: &[f64; 2],
    samples: &[[f64; 2]],
    classes: &[Class],
    guidance: &GuidanceSpec,
    checkpoint: String,
) -> RunReport {
    let (outlier_rate, branch_coverage, mean_loglik) =
        eval::pooled_metrics(world, samples, classes, taus);
    RunReport {
        outlier_rate,
        branch_coverage,
        mean_loglik,
        sample_count: samples.len(),
        guidance: guidance.clone(),
        checkpoint,
        seed: ctx.config.sample.seed,
        config_hash: ctx.config.hash(),
    }
}

/// Evaluate previously sampled runs: metrics JSON, CSV, and a figure.
pub fn cmd_eval(ctx: &Ctx, sample_files: &[PathBuf]) -> Result<()> {
    if sample_files.is_empty() {
        return Err(Error::Config("eval needs at least one samples.csv".into()));
    }
    let dir = ctx.ensure_run_dir()?;
    let report_path = dir.join("report.json");
    let metrics_path = dir.join("metrics.csv");
    let figure_path = dir.join("figure_eval.svg");
    guard_overwrite(
        &[report_path.clone(), metrics_path.clone(), figure_path.clone()],
        ctx.force,
    )?;
    let world = ctx.load_or_build_world()?;
    let taus = class_taus(ctx, &world)?;
    let mut reports = Vec::new();
    let mut panels = Vec::new();
    for file in sample_files {
        let (samples, classes) = read_samples_csv(file)?;
        let meta_path = file.with_extension("").with_extension("meta.json");
        let (guidance, checkpoint) = if meta_path.exists() {
            let meta: SampleMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
            (meta.guidance, meta.checkpoint)
        } else {
            (GuidanceSpec::default(), "unknown".to_string())
        };
        let title = guidance.tag();
        reports.push(report_for(
            ctx, &world, &taus, &samples, &classes, &guidance, checkpoint,
        ));
        panels.push(Panel { title, samples, classes });
    }
    std::fs::write(&report_path, serde_json::to_string_pretty(&reports)?)?;
    eval::write_metrics_csv(&metrics_path, &reports)?;
    let svg = eval::render_figure(&ctx.config.eval, &world, &panels)?;
    std::fs::write(&figure_path, svg)?;
    for r in &reports {
        println!(
            "eval {}: outliers {:.4}  coverage {:.4}  loglik {:.4}",
            r.guidance.tag(),
            r.outlier_rate,
            r.branch_coverage,
            r.mean_loglik
        );
    }
    println!("eval: {} runs -> {}", reports.len(), report_path.display());
    Ok(())
}

/// Sample every guidance setting in the config against one checkpoint and
/// emit one metrics row per setting.
pub fn cmd_sweep(ctx: &Ctx, checkpoint: Option<PathBuf>) -> Result<()> {
    let dir = ctx.ensure_run_dir()?;
    let report_path = dir.join("report.json");
    let metrics_path = dir.join("metrics.csv");
    let figure_path = dir.join("figure_sweep.svg");
    guard_overwrite(
        &[report_path.clone(), metrics_path.clone(), figure_path.clone()],
        ctx.force,
    )?;
    let world = ctx.load_or_build_world()?;
    let taus = class_taus(ctx, &world)?;
    let ckpt_path = checkpoint.unwrap_or_else(|| ctx.final_checkpoint_path());
    let (_, ema) = load_checkpoint_at(&ckpt_path)?;
    let mut reports = Vec::new();
    let mut panels = Vec::new();
    for spec in &ctx.config.guidance {
        let aux = resolve_aux(ctx, spec)?;
        let run = sample_with_guidance(ctx, &ema, aux, spec)?;
        write_samples_csv(&dir.join(format!("samples_{}.csv", spec.tag())), &run)?;
        reports.push(report_for(
            ctx,
            &world,
            &taus,
            &run.samples,
            &run.classes,
            spec,
            ckpt_path.display().to_string(),
        ));
        panels.push(Panel { title: spec.tag(), samples: run.samples, classes: run.classes });
        let r = reports.last().unwrap();
        println!(
            "sweep {}: outliers {:.4}  coverage {:.4}  loglik {:.4}",
            spec.tag(),
            r.outlier_rate,
            r.branch_coverage,
            r.mean_loglik
        );
    }
    std::fs::write(&report_path, serde_json::to_string_pretty(&reports)?)?;
    eval::write_metrics_csv(&metrics_path, &reports)?;
    let svg = eval::render_figure(&ctx.config.eval, &world, &panels)?;
    std::fs::write(&figure_path, svg)?;
    println!("sweep: {} settings -> {}", reports.len(), metrics_path.display());
    Ok(())
}

pub enum ReproFigure {
    Fig3,
    Fig4,
}

fn train_once(
    ctx: &Ctx,
    world: &WorldModel,
    cfg: &TrainConfig,
    label: &str,
) -> Result<(NetParams, NetParams)> {
    eprintln!(
        "repro: training {label} ({} iterations, batch {})",
        cfg.iterations, cfg.batch
    );
    let total = cfg.iterations;
    let run = train::run_training_with(cfg, world, |row| {
        if (row.iter + 1) % 256 == 0 || row.iter + 1 == total {
            eprintln!(
                "  [{label}] iter {:>6}/{total}  loss_final {:.5}",
                row.iter + 1,
                row.loss_final
            );
        }
    })?;
    let last = run.checkpoints.last().unwrap();
    let path = ctx
        .checkpoint_dir()
        .join(format!("repro_{label}.glabckpt"));
    std::fs::create_dir_all(ctx.checkpoint_dir())?;
    net::save_checkpoint(&path, &last.params, &last.ema)?;
    Ok((last.params.clone(), last.ema.clone()))
}

/// Reproduce the toy figures: guidance comparison (fig3) and training
/// acceleration (fig4). Training is triggered automatically.
pub fn cmd_repro(ctx: &Ctx, figure: ReproFigure) -> Result<()> {
    let dir = ctx.ensure_run_dir()?;
    let name = match figure {
        ReproFigure::Fig3 => "fig3",
        ReproFigure::Fig4 => "fig4",
    };
    let figure_path = dir.join(format!("figure_{name}.svg"));
    let report_path = dir.join(format!("report_{name}.json"));
    guard_overwrite(&[figure_path.clone(), report_path.clone()], ctx.force)?;
    let world = ctx.load_or_build_world()?;
    let taus = class_taus(ctx, &world)?;

    let mut reports = Vec::new();
    let mut panels = Vec::new();
    let add_panel = |title: String,
                         spec: &GuidanceSpec,
                         run: SampleRun,
                         ckpt: &str,
                         reports: &mut Vec<RunReport>,
                         panels: &mut Vec<Panel>| {
        reports.push(report_for(
            ctx,
            &world,
            &taus,
            &run.samples,
            &run.classes,
            spec,
            ckpt.to_string(),
        ));
        panels.push(Panel { title, samples: run.samples, classes: run.classes });
    };

    match figure {
        ReproFigure::Fig3 => {
            let (_, ema) = train_once(ctx, &world, &ctx.config.train, "fig3")?;
            let settings = [
                ("unguided".to_string(), GuidanceSpec::default()),
                (
                    "CFG w=2.5".to_string(),
                    GuidanceSpec { mode: GuidanceMode::Cfg, w: 2.5, ..GuidanceSpec::default() },
                ),
                (
                    "IG w=2".to_string(),
                    GuidanceSpec { mode: GuidanceMode::Ig, w: 2.0, ..GuidanceSpec::default() },
                ),
                (
                    "IG+CFG w=(1, 1.5)".to_string(),
                    GuidanceSpec {
                        mode: GuidanceMode::IgCfg,
                        w: 1.0,
                        w2: 1.5,
                        ..GuidanceSpec::default()
                    },
                ),
            ];
            for (title, spec) in settings {
                let run = sample_with_guidance(ctx, &ema, None, &spec)?;
                add_panel(title, &spec, run, "repro_fig3", &mut reports, &mut panels);
            }
        }
        ReproFigure::Fig4 => {
            let long_cfg = ctx.config.train.clone();
            let short_cfg = TrainConfig {
                iterations: (long_cfg.iterations / 4).max(1),
                ..long_cfg.clone()
            };
            let accel_cfg = TrainConfig { accel: true, ..short_cfg.clone() };
            let (_, ema_short) = train_once(ctx, &world, &short_cfg, "fig4_short")?;
            let (_, ema_long) = train_once(ctx, &world, &long_cfg, "fig4_long")?;
            let (_, ema_accel) = train_once(ctx, &world, &accel_cfg, "fig4_accel")?;
            let unguided = GuidanceSpec::default();
            let ig2 = GuidanceSpec { mode: GuidanceMode::Ig, w: 2.0, ..GuidanceSpec::default() };
            let runs = [
                ("short training".to_string(), &ema_short, &unguided, "repro_fig4_short"),
                ("long training".to_string(), &ema_long, &unguided, "repro_fig4_long"),
                ("short + IG w=2".to_string(), &ema_short, &ig2, "repro_fig4_short"),
                ("accelerated loss".to_string(), &ema_accel, &unguided, "repro_fig4_accel"),
            ];
            for (title, ema, spec, ckpt) in runs {
                let run = sample_with_guidance(ctx, ema, None, spec)?;
                add_panel(title, spec, run, ckpt, &mut reports, &mut panels);
            }
        }
    }

    std::fs::write(&report_path, serde_json::to_string_pretty(&reports)?)?;
    let svg = eval::render_figure(&ctx.config.eval, &world, &panels)?;
    std::fs::write(&figure_path, svg)?;
    for r in &reports {
        println!(
            "repro {name} {}: outliers {:.4}  coverage {:.4}",
            r.guidance.tag(),
            r.outlier_rate,
            r.branch_coverage
        );
    }
    println!("repro: {name} -> {}", figure_path.display());
    Ok(())
}
