//! Exact-score-matching training with intermediate auxiliary supervision,
//! the guidance-inspired acceleration objective, LR and EMA schedules, and
//! checkpointing.
//!
//! Both heads regress the analytically known score of the smoothed data
//! distribution; the per-head loss is `sigma^2 || model_score - score ||^2`
//! averaged over the batch, and the total loss weights the intermediate
//! head by lambda. The acceleration variant shifts the final head's target
//! by `omega * sg(score_ema_final - score_ema_inter)`, both guidance scores
//! evaluated with the EMA parameters.
//!
//! Everything is bitwise reproducible: batches derive from per-(iteration,
//! sample) RNG streams, gradient evaluation shards the batch into
//! fixed-size chunks, and the chunk reduction runs in ascending index
//! order regardless of worker count.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffkit::{DualScalar, Tape};
use crate::error::{Error, Result};
use crate::mixture::{self, Class, WorldModel};
use crate::net::{self, ClassLabel, Head, NetLayout, NetParams};

/// Fixed gradient shard size; independent of worker count so that thread
/// pools of any size produce identical sums.
const GRAD_CHUNK: usize = 128;

/// RNG stream namespace for batch generation (keeps batch draws disjoint
/// from parameter-init streams).
const BATCH_STREAM_BASE: u64 = 1 << 56;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    /// Reference learning rate of the decay schedule.
    pub alpha_ref: f64,
    /// Iteration count at which the 1/sqrt decay starts.
    pub t_ref: f64,
    /// log(sigma) ~ N(p_mean, p_std) during training.
    pub p_mean: f64,
    pub p_std: f64,
    /// Weight of the intermediate-head loss.
    pub lambda: f64,
    /// Acceleration guidance weight (used when `accel` is set).
    pub omega: f64,
    pub accel: bool,
    /// Probability of replacing the class label by Null (CFG training).
    pub class_dropout: f64,
    /// Relative width of the power-function EMA profile.
    pub sigma_rel: f64,
    pub seed: u64,
    /// Iterations after which to snapshot a checkpoint (the final state is
    /// always included).
    pub snapshot_iterations: Vec<usize>,
    /// Hidden width of the denoiser MLP.
    pub width: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Regress denoising targets instead of exact scores. Off by default;
    /// the paper found no behavioral difference.
    pub denoising_sm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 4096,
            batch: 4096,
            alpha_ref: 0.01,
            t_ref: 512.0,
            p_mean: -2.3,
            p_std: 1.5,
            lambda: 0.5,
            omega: 0.5,
            accel: false,
            class_dropout: 0.1,
            sigma_rel: 0.010,
            seed: 0,
            snapshot_iterations: Vec::new(),
            width: 64,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            denoising_sm: false,
        }
    }
}

impl TrainConfig {
    /// The desk-scale profile used by the acceptance suite: 16x fewer
    /// samples than the paper defaults while preserving every directional
    /// claim.
    pub fn ci_profile() -> TrainConfig {
        TrainConfig { iterations: 1024, batch: 1024, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.omega < 0.0 {
            return Err(Error::Config("lambda and omega must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.class_dropout) {
            return Err(Error::Config(format!(
                "class_dropout {} outside [0, 1)",
                self.class_dropout
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(self.p_std > 0.0) || !(self.sigma_rel > 0.0) {
            return Err(Error::Config("p_std and sigma_rel must be positive".into()));
        }
        Ok(())
    }

    /// Noise range covered during training (4 log-normal stds); evaluation
    /// outside it is permitted but worth flagging.
    pub fn sigma_bounds(&self) -> (f64, f64) {
        (
            (self.p_mean - 4.0 * self.p_std).exp(),
            (self.p_mean + 4.0 * self.p_std).exp(),
        )
    }

    pub fn layout(&self) -> NetLayout {
        NetLayout::new(self.width, 0.5)
    }
}

/// sigma = exp(p_mean + p_std * z), z standard normal.
pub fn sample_noise_level<R: Rng + ?Sized>(rng: &mut R, p_mean: f64, p_std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (p_mean + p_std * z).exp()
}

/// Learning rate schedule alpha_ref / sqrt(max(t / t_ref, 1)).
pub fn learning_rate(t: usize, alpha_ref: f64, t_ref: f64) -> f64 {
    alpha_ref / (t as f64 / t_ref).max(1.0).sqrt()
}

/// Solve the power-function EMA exponent gamma from the relative width:
/// sigma_rel^2 = (gamma + 1) / ((gamma + 2)^2 (gamma + 3)), bracketed on
/// gamma in [1, 100].
pub fn power_ema_gamma(sigma_rel: f64) -> Result<f64> {
    let target = sigma_rel * sigma_rel;
    let f = |g: f64| (g + 1.0) / ((g + 2.0) * (g + 2.0) * (g + 3.0)) - target;
    let (mut lo, mut hi) = (1.0f64, 100.0f64);
    if !(f(lo) > 0.0 && f(hi) < 0.0) {
        return Err(Error::Config(format!(
            "sigma_rel {sigma_rel} has no EMA exponent in [1, 100]"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Per-step EMA decay of the power profile.
pub fn ema_beta(t: usize, gamma: f64) -> f64 {
    (1.0 - 1.0 / t as f64).powf(gamma + 1.0)
}

/// ema <- ema + (1 - beta)(params - ema), elementwise.
pub fn ema_update(ema: &mut NetParams, params: &NetParams, beta: f64) {
    for (e, p) in ema.data.iter_mut().zip(&params.data) {
        *e += (1.0 - beta) * (*p - *e);
    }
}

/// One training point: position, noise level, true class, conditioning
/// label after dropout.
#[derive(Debug, Clone, Copy)]
pub struct BatchPoint {
    pub x: [f64; 2],
    pub sigma: f64,
    pub class: Class,
    pub label: ClassLabel,
    /// Regression target of both heads (analytic score, or the denoising
    /// direction when denoising_sm is set).
    pub target: [f64; 2],
}

/// Deterministic batch for one iteration: per-sample draws come from the
/// stream `(iteration, index)`, so any sharding reproduces them.
pub fn gen_batch(world: &WorldModel, config: &TrainConfig, iteration: usize) -> Result<Vec<BatchPoint>> {
    let chunks: Vec<Result<Vec<BatchPoint>>> = (0..config.batch)
        .collect::<Vec<_>>()
        .par_chunks(GRAD_CHUNK)
        .map(|idxs| {
            idxs.iter()
                .map(|&i| gen_point(world, config, iteration, i))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(config.batch);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn gen_point(
    world: &WorldModel,
    config: &TrainConfig,
    iteration: usize,
    index: usize,
) -> Result<BatchPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(BATCH_STREAM_BASE | ((iteration as u64) << 28) | index as u64);
    let sigma = sample_noise_level(&mut rng, config.p_mean, config.p_std);
    let class = if rng.gen::<f64>() < 0.5 { Class::A } else { Class::B };
    let label = if rng.gen::<f64>() < config.class_dropout {
        ClassLabel::Null
    } else {
        ClassLabel::from(class)
    };
    if config.denoising_sm {
        let x0 = mixture::sample_one(world, class, 0.0, &mut rng)?;
        let e0: f64 = rng.sample(StandardNormal);
        let e1: f64 = rng.sample(StandardNormal);
        let x = [x0[0] + sigma * e0, x0[1] + sigma * e1];
        let inv = 1.0 / (sigma * sigma);
        Ok(BatchPoint {
            x,
            sigma,
            class,
            label,
            target: [(x0[0] - x[0]) * inv, (x0[1] - x[1]) * inv],
        })
    } else {
        let x = mixture::sample_one(world, class, sigma, &mut rng)?;
        let target = mixture::score(world, class, x, sigma);
        Ok(BatchPoint { x, sigma, class, label, target })
    }
}

/// Per-sample guidance offsets for the acceleration objective:
/// omega * (score_ema_final - score_ema_inter) evaluated with EMA weights.
fn accel_guidance(ema: &NetParams, points: &[BatchPoint]) -> Result<Vec<[f64; 2]>> {
    points
        .iter()
        .map(|p| {
            let pair = net::energy_pair_dual(
                ema,
                [DualScalar::input(p.x[0], 0), DualScalar::input(p.x[1], 1)],
                p.sigma,
                p.label,
            )?;
            let sf = pair.final_head.tangents;
            let si = pair.intermediate.tangents;
            Ok([sf[0] - si[0], sf[1] - si[1]])
        })
        .collect()
}

/// Batched losses and the full parameter gradient of
/// `mean(sigma^2 ||s_f - target_f||^2) + lambda * mean(sigma^2 ||s_i - target||^2)`.
struct BatchEval {
    loss_final: f64,
    loss_inter: f64,
    grad: Vec<f64>,
}

fn batch_eval(
    params: &NetParams,
    points: &[BatchPoint],
    lambda: f64,
    omega: f64,
    guidance: Option<&[[f64; 2]]>,
) -> Result<BatchEval> {
    let layout = &params.layout;
    let nparam = layout.total_len();
    let chunk_results: Vec<Result<(Vec<f64>, f64, f64)>> = points
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut grad = vec![0.0f64; nparam];
            let mut lf_sum = 0.0;
            let mut li_sum = 0.0;
            let mut tape = Tape::new(&params.data);
            for (k, p) in chunk.iter().enumerate() {
                tape.clear(&params.data);
                let (e_i, e_f) = net::energies_on_tape(&mut tape, layout, p.x, p.sigma, p.label)?;
                let s2 = p.sigma * p.sigma;
                // Final-head target: true score, plus the stop-gradient
                // guidance offset when accelerating.
                let tgt_f = {
                    let base = tape.constant(&p.target);
                    match guidance {
                        Some(g) => {
                            let gi = ci * GRAD_CHUNK + k;
                            let gnode = tape.constant(&g[gi]);
                            let sg = tape.stop_gradient(gnode);
                            let scaled = tape.scale(sg, omega);
                            tape.add(base, scaled)
                        }
                        None => base,
                    }
                };
                let lf = head_loss(&mut tape, e_f, tgt_f, s2);
                let tgt_i = tape.constant(&p.target);
                let li = head_loss(&mut tape, e_i, tgt_i, s2);
                let li_w = tape.scale(li, lambda);
                let total = tape.add(lf, li_w);
                let lf_v = tape.scalar_value(lf);
                let li_v = tape.scalar_value(li);
                if !lf_v.is_finite() || !li_v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss diverged on sample x={:?} sigma={} label={:?}",
                        p.x, p.sigma, p.label
                    )));
                }
                lf_sum += lf_v;
                li_sum += li_v;
                tape.backward_into(total, 1.0, &mut grad);
            }
            Ok((grad, lf_sum, li_sum))
        })
        .collect();

    let mut grad = vec![0.0f64; nparam];
    let mut lf = 0.0;
    let mut li = 0.0;
    for r in chunk_results {
        let (g, f, i) = r?;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
        lf += f;
        li += i;
    }
    let inv_b = 1.0 / points.len() as f64;
    for g in grad.iter_mut() {
        *g *= inv_b;
    }
    Ok(BatchEval {
        loss_final: lf * inv_b,
        loss_inter: li * inv_b,
        grad,
    })
}

fn head_loss(
    tape: &mut Tape<'_>,
    energy: crate::diffkit::NodeId,
    target: crate::diffkit::NodeId,
    sigma_sq: f64,
) -> crate::diffkit::NodeId {
    let g0 = tape.tangent_row(energy, 0);
    let g1 = tape.tangent_row(energy, 1);
    let score = tape.concat(g0, g1);
    let diff = tape.sub(score, target);
    let sq = tape.square(diff);
    let sum = tape.sum(sq);
    tape.scale(sum, sigma_sq)
}

/// Mean over the batch of `sigma^2 || model_score(head) - target ||^2`.
pub fn esm_loss(
    params: &NetParams,
    points: &[BatchPoint],
    head: Head,
) -> Result<f64> {
    let sums: Vec<Result<f64>> = points
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut acc = 0.0;
            for p in chunk {
                let pair = net::energy_pair_dual(
                    params,
                    [DualScalar::input(p.x[0], 0), DualScalar::input(p.x[1], 1)],
                    p.sigma,
                    p.label,
                )?;
                let s = pair.head(head).tangents;
                let d = [s[0] - p.target[0], s[1] - p.target[1]];
                let l = p.sigma * p.sigma * (d[0] * d[0] + d[1] * d[1]);
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "esm loss diverged on sample x={:?} sigma={}",
                        p.x, p.sigma
                    )));
                }
                acc += l;
            }
            Ok(acc)
        })
        .collect();
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / points.len() as f64)
}

/// esm_loss(Final) + lambda * esm_loss(Intermediate), same batch for both.
pub fn total_loss(params: &NetParams, points: &[BatchPoint], lambda: f64) -> Result<f64> {
    Ok(esm_loss(params, points, Head::Final)? + lambda * esm_loss(params, points, Head::Intermediate)?)
}

/// Acceleration objective: the final head's target is shifted by
/// `omega * sg(score_ema_final - score_ema_inter)`; the intermediate loss
/// is unchanged. Reduces to [`total_loss`] bitwise at omega = 0.
pub fn accel_loss(
    params: &NetParams,
    ema: &NetParams,
    points: &[BatchPoint],
    lambda: f64,
    omega: f64,
) -> Result<f64> {
    let guidance = accel_guidance(ema, points)?;
    let sums: Vec<Result<f64>> = points
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut acc = 0.0;
            for (k, p) in chunk.iter().enumerate() {
                let pair = net::energy_pair_dual(
                    params,
                    [DualScalar::input(p.x[0], 0), DualScalar::input(p.x[1], 1)],
                    p.sigma,
                    p.label,
                )?;
                let g = guidance[ci * GRAD_CHUNK + k];
                let tgt_f = [p.target[0] + omega * g[0], p.target[1] + omega * g[1]];
                let sf = pair.final_head.tangents;
                let si = pair.intermediate.tangents;
                let df = [sf[0] - tgt_f[0], sf[1] - tgt_f[1]];
                let di = [si[0] - p.target[0], si[1] - p.target[1]];
                let s2 = p.sigma * p.sigma;
                acc += s2 * (df[0] * df[0] + df[1] * df[1])
                    + lambda * (s2 * (di[0] * di[0] + di[1] * di[1]));
            }
            Ok(acc)
        })
        .collect();
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / points.len() as f64)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Adam {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1, beta2, eps }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Mutable training state: raw and EMA parameters plus optimizer moments.
pub struct TrainState {
    pub params: NetParams,
    pub ema: NetParams,
    pub iteration: usize,
    adam: Adam,
    gamma: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss_final: f64,
    pub loss_inter: f64,
    pub grad_norm: f64,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub id: String,
    pub iteration: usize,
    pub params: NetParams,
    pub ema: NetParams,
}

pub struct TrainRun {
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogRow>,
}

pub fn checkpoint_id(iteration: usize) -> String {
    format!("iter{iteration:06}")
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<TrainState> {
        config.validate()?;
        let gamma = power_ema_gamma(config.sigma_rel)?;
        let params = NetParams::init(config.layout(), config.seed);
        let ema = params.clone();
        let n = params.layout.total_len();
        Ok(TrainState {
            params,
            ema,
            iteration: 0,
            adam: Adam::new(n, config.adam_beta1, config.adam_beta2, config.adam_eps),
            gamma,
        })
    }

    /// One optimizer step on a prepared batch. Returns the per-head losses
    /// and the gradient norm.
    pub fn step(
        &mut self,
        config: &TrainConfig,
        points: &[BatchPoint],
    ) -> Result<(f64, f64, f64)> {
        let guidance = if config.accel {
            Some(accel_guidance(&self.ema, points)?)
        } else {
            None
        };
        let eval = batch_eval(
            &self.params,
            points,
            config.lambda,
            config.omega,
            guidance.as_deref(),
        )?;
        let gnorm = eval.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !gnorm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient diverged at iteration {} (batch stream base {:#x}, seed {})",
                self.iteration,
                BATCH_STREAM_BASE | ((self.iteration as u64) << 28),
                config.seed
            )));
        }
        let lr = learning_rate(self.iteration, config.alpha_ref, config.t_ref);
        self.adam.step(&mut self.params.data, &eval.grad, lr);
        self.params.normalize_rows();
        self.iteration += 1;
        let beta = ema_beta(self.iteration, self.gamma);
        ema_update(&mut self.ema, &self.params, beta);
        Ok((eval.loss_final, eval.loss_inter, gnorm))
    }
}

/// Full training loop: Adam with the 1/sqrt schedule, class dropout, forced
/// weight renormalization, power-EMA tracking, and checkpoints at the
/// requested iterations plus the end. Deterministic given the seed.
pub fn run_training(config: &TrainConfig, world: &WorldModel) -> Result<TrainRun> {
    run_training_with(config, world, |_| {})
}

/// [`run_training`] with a per-iteration observer (used for progress
/// reporting by the CLI).
pub fn run_training_with(
    config: &TrainConfig,
    world: &WorldModel,
    mut observer: impl FnMut(&LogRow),
) -> Result<TrainRun> {
    let mut state = TrainState::new(config)?;
    let mut log = Vec::with_capacity(config.iterations);
    let mut checkpoints = Vec::new();
    let start = Instant::now();
    let snapshot = |iter: usize, st: &TrainState| Checkpoint {
        id: checkpoint_id(iter),
        iteration: iter,
        params: st.params.clone(),
        ema: st.ema.clone(),
    };
    if config.iterations == 0 {
        checkpoints.push(snapshot(0, &state));
        return Ok(TrainRun { checkpoints, log });
    }
    for step in 0..config.iterations {
        let points = gen_batch(world, config, step)?;
        let lr = learning_rate(step, config.alpha_ref, config.t_ref);
        let (loss_final, loss_inter, grad_norm) = state.step(config, &points)?;
        let row = LogRow {
            iter: step,
            lr,
            loss_final,
            loss_inter,
            grad_norm,
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        observer(&row);
        log.push(row);
        let done = step + 1;
        if config.snapshot_iterations.contains(&done) && done != config.iterations {
            checkpoints.push(snapshot(done, &state));
        }
    }
    checkpoints.push(snapshot(config.iterations, &state));
    Ok(TrainRun { checkpoints, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{build_fractal_mixture, BranchParams};

    #[test]
    fn noise_level_examples() {
        // z = 0 and z = 1 by direct evaluation of the formula.
        assert!(((-2.3f64).exp() - 0.10025884372280375).abs() < 1e-15);
        assert!(((-2.3f64 + 1.5).exp() - (-0.8f64).exp()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let l = sample_noise_level(&mut rng, -2.3, 1.5).ln();
            sum += l;
            sum2 += l * l;
        }
        let mean = sum / n as f64;
        let std = (sum2 / n as f64 - mean * mean).sqrt();
        assert!((mean + 2.3).abs() < 0.005, "mean log sigma {mean}");
        assert!((std - 1.5).abs() < 0.005, "std log sigma {std}");
    }

    #[test]
    fn learning_rate_schedule_values() {
        assert_eq!(learning_rate(0, 0.01, 512.0), 0.01);
        assert_eq!(learning_rate(512, 0.01, 512.0), 0.01);
        assert!((learning_rate(2048, 0.01, 512.0) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn ema_gamma_solve_and_beta() {
        let gamma = power_ema_gamma(0.010).unwrap();
        // Independent check: Newton's method on the same relation from a
        // different starting point.
        let target = 0.010f64 * 0.010;
        let mut g: f64 = 50.0;
        for _ in 0..100 {
            let f = (g + 1.0) / ((g + 2.0) * (g + 2.0) * (g + 3.0)) - target;
            let h = 1e-6;
            let fp = ((g + h + 1.0) / ((g + h + 2.0) * (g + h + 2.0) * (g + h + 3.0))
                - (g - h + 1.0) / ((g - h + 2.0) * (g - h + 2.0) * (g - h + 3.0)))
                / (2.0 * h);
            g -= f / fp;
        }
        assert!((gamma - g).abs() < 1e-6, "bisection {gamma} vs newton {g}");
        // t = 1 resets the EMA to the raw parameters.
        assert_eq!(ema_beta(1, gamma), 0.0);
    }

    #[test]
    fn ema_converges_monotonically_to_frozen_params() {
        let config = TrainConfig::default();
        let params = NetParams::init(config.layout(), 3);
        let mut ema = NetParams::init(config.layout(), 4);
        let gamma = power_ema_gamma(0.010).unwrap();
        let mut prev_gap: Vec<f64> = ema
            .data
            .iter()
            .zip(&params.data)
            .map(|(e, p)| (e - p).abs())
            .collect();
        for t in 2..200 {
            ema_update(&mut ema, &params, ema_beta(t, gamma));
            for (i, (e, p)) in ema.data.iter().zip(&params.data).enumerate() {
                let gap = (e - p).abs();
                assert!(gap <= prev_gap[i] + 1e-18, "coordinate {i} diverged");
                prev_gap[i] = gap;
            }
        }
    }

    fn tiny_world() -> WorldModel {
        build_fractal_mixture(1, 3, 2, &BranchParams::default()).unwrap()
    }

    #[test]
    fn esm_loss_zero_at_init_on_single_gaussian_world() {
        let world = WorldModel::single_gaussian(0.5);
        let config = TrainConfig { batch: 256, seed: 5, ..TrainConfig::default() };
        let params = NetParams::init(config.layout(), config.seed);
        let points = gen_batch(&world, &config, 0).unwrap();
        for head in [Head::Intermediate, Head::Final] {
            let loss = esm_loss(&params, &points, head).unwrap();
            assert!(loss.abs() < 1e-12, "init loss {loss}");
        }
    }

    #[test]
    fn total_loss_composition() {
        let world = tiny_world();
        let config = TrainConfig { batch: 64, seed: 2, ..TrainConfig::default() };
        let mut params = NetParams::init(config.layout(), 11);
        let g = params.layout.gains();
        params.data[g.offset] = 0.2;
        params.data[g.offset + 1] = 0.4;
        let points = gen_batch(&world, &config, 3).unwrap();
        let lf = esm_loss(&params, &points, Head::Final).unwrap();
        let li = esm_loss(&params, &points, Head::Intermediate).unwrap();
        let t0 = total_loss(&params, &points, 0.0).unwrap();
        assert_eq!(t0.to_bits(), lf.to_bits(), "lambda 0 is the final loss");
        let t = total_loss(&params, &points, 0.5).unwrap();
        assert!((t - (lf + 0.5 * li)).abs() < 1e-15);
    }

    #[test]
    fn accel_loss_matches_total_loss_at_omega_zero_and_init() {
        let world = tiny_world();
        let config = TrainConfig { batch: 64, seed: 8, ..TrainConfig::default() };
        let mut params = NetParams::init(config.layout(), 21);
        let g = params.layout.gains();
        params.data[g.offset] = 0.3;
        params.data[g.offset + 1] = 0.6;
        let mut ema = params.clone();
        ema.data[g.offset] = 0.1;
        let points = gen_batch(&world, &config, 1).unwrap();

        // omega = 0: bitwise equal to the baseline loss.
        let base = total_loss(&params, &points, 0.5).unwrap();
        let acc = accel_loss(&params, &ema, &points, 0.5, 0.0).unwrap();
        assert_eq!(base.to_bits(), acc.to_bits());

        // At init the EMA heads agree, so the guidance term vanishes.
        let init = NetParams::init(config.layout(), 21);
        let base_init = total_loss(&init, &points, 0.5).unwrap();
        let acc_init = accel_loss(&init, &init, &points, 0.5, 0.7).unwrap();
        assert!((base_init - acc_init).abs() <= 1e-15 * base_init.abs().max(1.0));
    }

    #[test]
    fn batch_grad_matches_loss_path_and_lambda_isolation() {
        let world = tiny_world();
        let config = TrainConfig { batch: 96, seed: 31, ..TrainConfig::default() };
        let mut params = NetParams::init(config.layout(), 41);
        let g = params.layout.gains();
        params.data[g.offset] = 0.25;
        params.data[g.offset + 1] = 0.5;
        let points = gen_batch(&world, &config, 0).unwrap();

        // Tape losses agree with the dual-path losses.
        let eval = batch_eval(&params, &points, 0.5, 0.0, None).unwrap();
        let lf = esm_loss(&params, &points, Head::Final).unwrap();
        let li = esm_loss(&params, &points, Head::Intermediate).unwrap();
        assert!((eval.loss_final - lf).abs() <= 1e-12 * lf.max(1.0));
        assert!((eval.loss_inter - li).abs() <= 1e-12 * li.max(1.0));

        // lambda = 0: the intermediate head weights and gain get no
        // gradient; the trunk still does (through the final branch).
        let eval0 = batch_eval(&params, &points, 0.0, 0.0, None).unwrap();
        let hi = params.layout.w_head(Head::Intermediate);
        for i in 0..hi.len() {
            assert_eq!(eval0.grad[hi.offset + i], 0.0);
        }
        assert_eq!(eval0.grad[params.layout.gain(Head::Intermediate).offset], 0.0);
        let trunk = params.layout.w_hidden(2);
        assert!(eval0.grad[trunk.offset..trunk.offset + trunk.len()]
            .iter()
            .any(|g| *g != 0.0));
    }

    #[test]
    fn dropout_statistics_match_rate() {
        let world = tiny_world();
        let config = TrainConfig {
            batch: 1024,
            class_dropout: 0.1,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut nulls = 0usize;
        let mut total = 0usize;
        for iter in 0..64 {
            let points = gen_batch(&world, &config, iter).unwrap();
            nulls += points.iter().filter(|p| p.label == ClassLabel::Null).count();
            total += points.len();
        }
        let frac = nulls as f64 / total as f64;
        assert!((frac - 0.1).abs() < 0.005, "null fraction {frac}");
    }

    #[test]
    fn zero_iterations_returns_init_checkpoint_only() {
        let world = tiny_world();
        let config = TrainConfig { iterations: 0, batch: 16, ..TrainConfig::default() };
        let run = run_training(&config, &world).unwrap();
        assert_eq!(run.checkpoints.len(), 1);
        assert_eq!(run.checkpoints[0].iteration, 0);
        assert!(run.log.is_empty());
        let init = NetParams::init(config.layout(), config.seed);
        assert_eq!(run.checkpoints[0].params.data, init.data);
    }

    #[test]
    fn training_is_deterministic_and_preserves_row_norms() {
        let world = tiny_world();
        let config = TrainConfig {
            iterations: 8,
            batch: 64,
            snapshot_iterations: vec![4],
            seed: 77,
            ..TrainConfig::default()
        };
        let a = run_training(&config, &world).unwrap();
        let b = run_training(&config, &world).unwrap();
        assert_eq!(a.checkpoints.len(), 2);
        for (ca, cb) in a.checkpoints.iter().zip(&b.checkpoints) {
            assert_eq!(ca.id, cb.id);
            for (x, y) in ca.params.data.iter().zip(&cb.params.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in ca.ema.data.iter().zip(&cb.ema.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let last = a.checkpoints.last().unwrap();
        assert!(last.params.max_row_norm_error() < 1e-12);
        assert_eq!(a.log.len(), 8);
        // EMA snapped to params at t = 1 and tracks them afterwards; after
        // a few steps it differs but stays finite.
        assert!(last.ema.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn class_conditioning_diverges_after_one_step() {
        let world = tiny_world();
        let config = TrainConfig { iterations: 1, batch: 128, seed: 13, ..TrainConfig::default() };
        let run = run_training(&config, &world).unwrap();
        let p = &run.checkpoints.last().unwrap().params;
        let input_a = crate::net::NetInput { x: [0.4, 0.1], sigma: 0.3, label: ClassLabel::A };
        let input_b = crate::net::NetInput { x: [0.4, 0.1], sigma: 0.3, label: ClassLabel::B };
        let fa = net::features(p, input_a, Head::Final).unwrap();
        let fb = net::features(p, input_b, Head::Final).unwrap();
        assert_ne!(fa, fb);
    }
}
