//! Fractal two-class Gaussian mixture with exact densities, scores, samples,
//! and mass-threshold contours at any noise level.
//!
//! Each class is a tree of branches: a root segment recursively subdivided
//! into two children per level, every branch carrying a fixed number of
//! anisotropic Gaussian components laid along its segment. Smoothing by a
//! noise level sigma adds `sigma^2 I` to every component covariance, so the
//! density, its score, and samples stay available in closed form.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LOG_TWO_PI: f64 = 1.837877066409345483560659472811_f64;

/// Hard cap on tree depth; component count doubles per level.
const MAX_DEPTH: u32 = 12;

/// Class label of a mixture (two data classes; the null label used for
/// classifier-free guidance lives in the network module, not here).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Class {
    A,
    B,
}

impl Class {
    pub const ALL: [Class; 2] = [Class::A, Class::B];

    pub fn index(self) -> usize {
        match self {
            Class::A => 0,
            Class::B => 1,
        }
    }
}

impl std::fmt::Display for Class {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Class::A => write!(f, "A"),
            Class::B => write!(f, "B"),
        }
    }
}

/// One Gaussian component: weight, mean, 2x2 covariance, and the index of
/// the tree branch that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub phi: f64,
    pub mu: [f64; 2],
    pub sigma: [[f64; 2]; 2],
    pub branch: u32,
}

impl MixtureComponent {
    /// Eigenvalues of the covariance (ascending). Both must be positive.
    pub fn cov_eigenvalues(&self) -> (f64, f64) {
        let a = self.sigma[0][0];
        let b = self.sigma[0][1];
        let c = self.sigma[1][1];
        let tr = a + c;
        let disc = ((a - c) * (a - c) + 4.0 * b * b).sqrt();
        (0.5 * (tr - disc), 0.5 * (tr + disc))
    }
}

/// All components of one class, plus caches derived from them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMixture {
    pub class_id: Class,
    pub components: Vec<MixtureComponent>,
    #[serde(skip)]
    cache: ClassCache,
}

/// Structure-of-arrays copy of the component parameters for the hot
/// evaluation loops, plus cumulative weights for sampling.
#[derive(Debug, Clone, Default)]
struct ClassCache {
    log_phi: Vec<f64>,
    mu0: Vec<f64>,
    mu1: Vec<f64>,
    s00: Vec<f64>,
    s01: Vec<f64>,
    s11: Vec<f64>,
    cum_phi: Vec<f64>,
}

impl ClassMixture {
    pub fn new(class_id: Class, components: Vec<MixtureComponent>) -> Self {
        let mut cm = ClassMixture {
            class_id,
            components,
            cache: ClassCache::default(),
        };
        cm.rebuild_cache();
        cm
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Number of distinct branches feeding this class.
    pub fn branch_count(&self) -> usize {
        self.components
            .iter()
            .map(|c| c.branch)
            .max()
            .map_or(0, |m| m as usize + 1)
    }

    fn rebuild_cache(&mut self) {
        let n = self.components.len();
        let mut cache = ClassCache {
            log_phi: Vec::with_capacity(n),
            mu0: Vec::with_capacity(n),
            mu1: Vec::with_capacity(n),
            s00: Vec::with_capacity(n),
            s01: Vec::with_capacity(n),
            s11: Vec::with_capacity(n),
            cum_phi: Vec::with_capacity(n),
        };
        let mut cum = 0.0;
        for c in &self.components {
            cache.log_phi.push(c.phi.ln());
            cache.mu0.push(c.mu[0]);
            cache.mu1.push(c.mu[1]);
            cache.s00.push(c.sigma[0][0]);
            cache.s01.push(c.sigma[0][1]);
            cache.s11.push(c.sigma[1][1]);
            cum += c.phi;
            cache.cum_phi.push(cum);
        }
        self.cache = cache;
    }
}

/// Geometry and weighting of the recursive branch construction. The paper
/// only pins the counts, so the shape knobs are exposed in configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BranchParams {
    /// Length of the root segment before standardization.
    pub root_length: f64,
    /// Child segment length as a fraction of its parent.
    pub length_ratio: f64,
    /// Base angle between a child and its parent, degrees.
    pub angle_deg: f64,
    /// Uniform jitter added to the base angle, degrees.
    pub angle_jitter_deg: f64,
    /// Component weight multiplier applied at each subdivision.
    pub weight_decay: f64,
    /// Longitudinal component std = segment length / this divisor.
    pub sigma_long_divisor: f64,
    /// Ratio of longitudinal std to transverse std.
    pub anisotropy: f64,
}

impl Default for BranchParams {
    fn default() -> Self {
        BranchParams {
            root_length: 1.0,
            length_ratio: 0.65,
            angle_deg: 30.0,
            angle_jitter_deg: 8.0,
            weight_decay: 0.5,
            sigma_long_divisor: 16.0,
            anisotropy: 6.0,
        }
    }
}

/// The ground-truth world: two class mixtures in a coordinate system where
/// the class-marginal mean is 0 and the per-axis std equals `sigma_data`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldModel {
    pub seed: u64,
    pub sigma_data: f64,
    pub classes: Vec<ClassMixture>,
}

/// Outcome of a score evaluation. `saturated` marks the far-tail fallback
/// where every component log-density overflowed to -inf and the score of the
/// nearest component (in Mahalanobis distance) was returned instead.
#[derive(Debug, Clone, Copy)]
pub struct ScoreResult {
    pub score: [f64; 2],
    pub saturated: bool,
}

impl WorldModel {
    /// Assemble a world from explicit per-class component lists and
    /// standardize it. Intended for tests and analytic toy worlds.
    pub fn from_components(
        seed: u64,
        sigma_data: f64,
        class_a: Vec<MixtureComponent>,
        class_b: Vec<MixtureComponent>,
    ) -> Result<WorldModel> {
        if class_a.is_empty() || class_b.is_empty() {
            return Err(Error::Construction(
                "each class needs at least one component".into(),
            ));
        }
        let world = WorldModel {
            seed,
            sigma_data,
            classes: vec![
                ClassMixture::new(Class::A, normalize_weights(class_a)),
                ClassMixture::new(Class::B, normalize_weights(class_b)),
            ],
        };
        standardize(&world)
    }

    /// A one-component-per-class world N(0, sigma_data^2 I); the init
    /// network is its exact denoiser.
    pub fn single_gaussian(sigma_data: f64) -> WorldModel {
        let comp = || MixtureComponent {
            phi: 1.0,
            mu: [0.0, 0.0],
            sigma: [[sigma_data * sigma_data, 0.0], [0.0, sigma_data * sigma_data]],
            branch: 0,
        };
        WorldModel {
            seed: 0,
            sigma_data,
            classes: vec![
                ClassMixture::new(Class::A, vec![comp()]),
                ClassMixture::new(Class::B, vec![comp()]),
            ],
        }
    }

    pub fn class(&self, class_id: Class) -> &ClassMixture {
        &self.classes[class_id.index()]
    }

    pub fn total_components(&self) -> usize {
        self.classes.iter().map(|c| c.len()).sum()
    }

    /// Class-marginal mean and per-axis variance, computed analytically from
    /// the mixture moments with equal class priors.
    pub fn pooled_moments(&self) -> ([f64; 2], [f64; 2]) {
        let mut mean = [0.0; 2];
        let mut raw2 = [0.0; 2];
        let class_w = 1.0 / self.classes.len() as f64;
        for cm in &self.classes {
            for c in &cm.components {
                for a in 0..2 {
                    mean[a] += class_w * c.phi * c.mu[a];
                    raw2[a] += class_w * c.phi * (c.sigma[a][a] + c.mu[a] * c.mu[a]);
                }
            }
        }
        let var = [raw2[0] - mean[0] * mean[0], raw2[1] - mean[1] * mean[1]];
        (mean, var)
    }

    /// Check every domain invariant, naming the first violated one.
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != 2 {
            return Err(Error::Invariant(format!(
                "expected 2 classes, found {}",
                self.classes.len()
            )));
        }
        for cm in &self.classes {
            if cm.is_empty() {
                return Err(Error::Invariant(format!("class {} is empty", cm.class_id)));
            }
            let wsum: f64 = cm.components.iter().map(|c| c.phi).sum();
            if (wsum - 1.0).abs() > 1e-12 {
                return Err(Error::Invariant(format!(
                    "class {} weights sum to {wsum}, expected 1 within 1e-12",
                    cm.class_id
                )));
            }
            for (i, c) in cm.components.iter().enumerate() {
                if !(c.phi > 0.0) {
                    return Err(Error::Invariant(format!(
                        "class {} component {i} has non-positive weight {}",
                        cm.class_id, c.phi
                    )));
                }
                if (c.sigma[0][1] - c.sigma[1][0]).abs() > 1e-15 {
                    return Err(Error::Invariant(format!(
                        "class {} component {i} covariance is not symmetric",
                        cm.class_id
                    )));
                }
                let (lo, _hi) = c.cov_eigenvalues();
                if !(lo > 0.0) {
                    return Err(Error::Invariant(format!(
                        "class {} component {i} covariance is not SPD (min eigenvalue {lo})",
                        cm.class_id
                    )));
                }
            }
        }
        let (mean, var) = self.pooled_moments();
        for a in 0..2 {
            if mean[a].abs() > 1e-9 {
                return Err(Error::Invariant(format!(
                    "pooled mean axis {a} is {} (|.| > 1e-9)",
                    mean[a]
                )));
            }
            let std = var[a].sqrt();
            if (std - self.sigma_data).abs() > 1e-9 {
                return Err(Error::Invariant(format!(
                    "pooled std axis {a} is {std}, expected {}",
                    self.sigma_data
                )));
            }
        }
        Ok(())
    }
}

fn normalize_weights(mut comps: Vec<MixtureComponent>) -> Vec<MixtureComponent> {
    let total: f64 = comps.iter().map(|c| c.phi).sum();
    for c in &mut comps {
        c.phi /= total;
    }
    comps
}

/// Build the fractal two-class world: class A is a branch tree grown from
/// the seed, class B an independently grown tree rotated 180 degrees about
/// the origin, then both are standardized jointly.
pub fn build_fractal_mixture(
    seed: u64,
    depth: u32,
    per_branch: usize,
    params: &BranchParams,
) -> Result<WorldModel> {
    if depth < 1 {
        return Err(Error::Construction("depth must be >= 1".into()));
    }
    if per_branch < 1 {
        return Err(Error::Construction("per_branch must be >= 1".into()));
    }
    if depth > MAX_DEPTH {
        return Err(Error::Capacity(format!(
            "depth {depth} exceeds the maximum of {MAX_DEPTH} (component count doubles per level)"
        )));
    }
    if !(params.weight_decay > 0.0)
        || !(params.length_ratio > 0.0)
        || !(params.sigma_long_divisor > 0.0)
        || !(params.anisotropy > 0.0)
    {
        return Err(Error::Construction(
            "branch parameters must be positive".into(),
        ));
    }

    let mut rng_a = ChaCha8Rng::seed_from_u64(seed);
    rng_a.set_stream(0);
    let comps_a = grow_tree(&mut rng_a, depth, per_branch, params);

    let mut rng_b = ChaCha8Rng::seed_from_u64(seed);
    rng_b.set_stream(1);
    let mut comps_b = grow_tree(&mut rng_b, depth, per_branch, params);
    for c in &mut comps_b {
        // 180-degree rotation about the origin; covariances are invariant.
        c.mu[0] = -c.mu[0];
        c.mu[1] = -c.mu[1];
    }

    let world = WorldModel {
        seed,
        sigma_data: 0.5,
        classes: vec![
            ClassMixture::new(Class::A, normalize_weights(comps_a)),
            ClassMixture::new(Class::B, normalize_weights(comps_b)),
        ],
    };
    standardize(&world)
}

struct Branch {
    start: [f64; 2],
    angle: f64,
    length: f64,
    level: u32,
}

fn grow_tree(
    rng: &mut ChaCha8Rng,
    depth: u32,
    per_branch: usize,
    p: &BranchParams,
) -> Vec<MixtureComponent> {
    let jitter = p.angle_jitter_deg.to_radians();
    let base = p.angle_deg.to_radians();
    let mut comps = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(Branch {
        start: [0.0, 0.0],
        angle: std::f64::consts::FRAC_PI_2,
        length: p.root_length,
        level: 0,
    });
    let mut branch_index: u32 = 0;
    while let Some(b) = queue.pop_front() {
        let dir = [b.angle.cos(), b.angle.sin()];
        let end = [b.start[0] + b.length * dir[0], b.start[1] + b.length * dir[1]];
        let s_long = b.length / p.sigma_long_divisor;
        let s_trans = s_long / p.anisotropy;
        let (vl, vt) = (s_long * s_long, s_trans * s_trans);
        let (c, s) = (dir[0], dir[1]);
        let sigma = [
            [vl * c * c + vt * s * s, (vl - vt) * c * s],
            [(vl - vt) * c * s, vl * s * s + vt * c * c],
        ];
        let w = p.weight_decay.powi(b.level as i32) / per_branch as f64;
        for k in 0..per_branch {
            let f = (k as f64 + 0.5) / per_branch as f64;
            comps.push(MixtureComponent {
                phi: w,
                mu: [
                    b.start[0] + f * (end[0] - b.start[0]),
                    b.start[1] + f * (end[1] - b.start[1]),
                ],
                sigma,
                branch: branch_index,
            });
        }
        if b.level < depth {
            let jl: f64 = rng.gen_range(-jitter..jitter);
            let jr: f64 = rng.gen_range(-jitter..jitter);
            queue.push_back(Branch {
                start: end,
                angle: b.angle + (base + jl),
                length: b.length * p.length_ratio,
                level: b.level + 1,
            });
            queue.push_back(Branch {
                start: end,
                angle: b.angle - (base + jr),
                length: b.length * p.length_ratio,
                level: b.level + 1,
            });
        }
        branch_index += 1;
    }
    comps
}

/// Apply one shared affine map (per-axis shift and scale) so the pooled
/// marginal mean is 0 and the per-axis std equals `world.sigma_data`.
///
/// A world whose moments already sit within 1e-12 of the target is returned
/// unchanged, making repeated standardization a bitwise no-op.
pub fn standardize(world: &WorldModel) -> Result<WorldModel> {
    for cm in &world.classes {
        if cm.is_empty() {
            return Err(Error::Construction(format!(
                "class {} has no components",
                cm.class_id
            )));
        }
    }
    let (mean, var) = world.pooled_moments();
    let target = world.sigma_data;
    let mut done = true;
    for a in 0..2 {
        if !(var[a] > 0.0) {
            return Err(Error::Construction(format!(
                "degenerate pooled variance on axis {a}: {}",
                var[a]
            )));
        }
        if mean[a].abs() > 1e-12 || (var[a].sqrt() - target).abs() > 1e-12 {
            done = false;
        }
    }
    if done {
        return Ok(world.clone());
    }
    let scale = [target / var[0].sqrt(), target / var[1].sqrt()];
    let mut out = world.clone();
    for cm in &mut out.classes {
        for c in &mut cm.components {
            for a in 0..2 {
                c.mu[a] = (c.mu[a] - mean[a]) * scale[a];
            }
            for a in 0..2 {
                for b in 0..2 {
                    c.sigma[a][b] *= scale[a] * scale[b];
                }
            }
        }
        cm.rebuild_cache();
    }
    Ok(out)
}

#[inline]
fn smoothed_cov(cache: &ClassCache, i: usize, sig2: f64) -> (f64, f64, f64, f64) {
    let a = cache.s00[i] + sig2;
    let b = cache.s01[i];
    let c = cache.s11[i] + sig2;
    let det = a * c - b * b;
    (a, b, c, det)
}

/// Per-component log phi_i + log N(x; mu_i, Sigma_i + sigma^2 I).
#[inline]
fn component_log_term(cache: &ClassCache, i: usize, x: [f64; 2], sig2: f64) -> f64 {
    let (a, b, c, det) = smoothed_cov(cache, i, sig2);
    let d0 = x[0] - cache.mu0[i];
    let d1 = x[1] - cache.mu1[i];
    let qf = (c * d0 * d0 - 2.0 * b * d0 * d1 + a * d1 * d1) / det;
    cache.log_phi[i] - LOG_TWO_PI - 0.5 * det.ln() - 0.5 * qf
}

/// Log of the smoothed mixture density, computed with a max-shifted
/// log-sum-exp over all components. Returns -inf where the density
/// underflows entirely.
pub fn log_density(world: &WorldModel, class_id: Class, x: [f64; 2], sigma: f64) -> f64 {
    debug_assert!(sigma >= 0.0);
    let cache = &world.class(class_id).cache;
    let sig2 = sigma * sigma;
    let n = cache.log_phi.len();
    let mut max = f64::NEG_INFINITY;
    for i in 0..n {
        let l = component_log_term(cache, i, x, sig2);
        if l > max {
            max = l;
        }
    }
    if !max.is_finite() {
        return f64::NEG_INFINITY;
    }
    // Terms more than 60 nats below the max cannot move the sum at f64
    // precision; skipping their exp keeps the hot loop cheap.
    let cutoff = max - 60.0;
    let mut sum = 0.0;
    for i in 0..n {
        let l = component_log_term(cache, i, x, sig2);
        if l >= cutoff {
            sum += (l - max).exp();
        }
    }
    max + sum.ln()
}

/// Smoothed mixture density p(x | c; sigma). Underflow returns 0.0.
pub fn density(world: &WorldModel, class_id: Class, x: [f64; 2], sigma: f64) -> f64 {
    log_density(world, class_id, x, sigma).exp()
}

/// Analytic score of the smoothed density: the responsibility-weighted sum
/// of per-component Gaussian scores. Equals the gradient of `log_density`.
pub fn score(world: &WorldModel, class_id: Class, x: [f64; 2], sigma: f64) -> [f64; 2] {
    score_with_status(world, class_id, x, sigma).score
}

/// Like [`score`], additionally reporting far-tail saturation.
pub fn score_with_status(
    world: &WorldModel,
    class_id: Class,
    x: [f64; 2],
    sigma: f64,
) -> ScoreResult {
    let cache = &world.class(class_id).cache;
    let sig2 = sigma * sigma;
    let n = cache.log_phi.len();
    let mut max = f64::NEG_INFINITY;
    for i in 0..n {
        let l = component_log_term(cache, i, x, sig2);
        if l > max {
            max = l;
        }
    }
    if !max.is_finite() {
        return ScoreResult {
            score: nearest_component_score(cache, x, sig2),
            saturated: true,
        };
    }
    let cutoff = max - 60.0;
    let mut den = 0.0;
    let mut num = [0.0; 2];
    for i in 0..n {
        let l = component_log_term(cache, i, x, sig2);
        if l < cutoff {
            continue;
        }
        let r = (l - max).exp();
        let (a, b, c, det) = smoothed_cov(cache, i, sig2);
        let d0 = cache.mu0[i] - x[0];
        let d1 = cache.mu1[i] - x[1];
        num[0] += r * (c * d0 - b * d1) / det;
        num[1] += r * (a * d1 - b * d0) / det;
        den += r;
    }
    ScoreResult {
        score: [num[0] / den, num[1] / den],
        saturated: false,
    }
}

/// Index of the component with the highest posterior responsibility for x
/// at the given noise level.
pub fn max_responsibility_component(
    world: &WorldModel,
    class_id: Class,
    x: [f64; 2],
    sigma: f64,
) -> usize {
    let cache = &world.class(class_id).cache;
    let sig2 = sigma * sigma;
    let mut best = 0usize;
    let mut best_l = f64::NEG_INFINITY;
    for i in 0..cache.log_phi.len() {
        let l = component_log_term(cache, i, x, sig2);
        if l > best_l {
            best_l = l;
            best = i;
        }
    }
    best
}

/// Fallback when every component log-density is -inf: the single-Gaussian
/// score of the component nearest in Mahalanobis distance, compared on a
/// log scale so astronomically distant probes still order correctly.
fn nearest_component_score(cache: &ClassCache, x: [f64; 2], sig2: f64) -> [f64; 2] {
    let n = cache.log_phi.len();
    let mut best = 0usize;
    let mut best_log_d2 = f64::INFINITY;
    for i in 0..n {
        let (a, b, c, det) = smoothed_cov(cache, i, sig2);
        let d0 = x[0] - cache.mu0[i];
        let d1 = x[1] - cache.mu1[i];
        let norm = d0.hypot(d1);
        if norm == 0.0 {
            best = i;
            break;
        }
        let (u0, u1) = (d0 / norm, d1 / norm);
        let unit_qf = (c * u0 * u0 - 2.0 * b * u0 * u1 + a * u1 * u1) / det;
        let log_d2 = 2.0 * norm.ln() + unit_qf.ln();
        if log_d2 < best_log_d2 {
            best_log_d2 = log_d2;
            best = i;
        }
    }
    let (a, b, c, det) = smoothed_cov(cache, best, sig2);
    let d0 = cache.mu0[best] - x[0];
    let d1 = cache.mu1[best] - x[1];
    [(c * d0 - b * d1) / det, (a * d1 - b * d0) / det]
}

/// Draw one sample from the smoothed class mixture: component index
/// proportional to phi, then a Cholesky draw from the smoothed Gaussian.
pub fn sample_one<R: Rng + ?Sized>(
    world: &WorldModel,
    class_id: Class,
    sigma: f64,
    rng: &mut R,
) -> Result<[f64; 2]> {
    let cache = &world.class(class_id).cache;
    let sig2 = sigma * sigma;
    let u: f64 = rng.gen();
    let idx = cache
        .cum_phi
        .partition_point(|&c| c <= u)
        .min(cache.cum_phi.len() - 1);
    let (a, b, c, _det) = smoothed_cov(cache, idx, sig2);
    if !(a > 0.0) {
        return Err(Error::Invariant(format!(
            "component {idx} smoothed covariance is not SPD"
        )));
    }
    let l11 = a.sqrt();
    let l21 = b / l11;
    let l22sq = c - l21 * l21;
    if !(l22sq > 0.0) {
        return Err(Error::Invariant(format!(
            "component {idx} smoothed covariance is not SPD"
        )));
    }
    let l22 = l22sq.sqrt();
    let z0: f64 = rng.sample(StandardNormal);
    let z1: f64 = rng.sample(StandardNormal);
    Ok([
        cache.mu0[idx] + l11 * z0,
        cache.mu1[idx] + l21 * z0 + l22 * z1,
    ])
}

/// Draw `count` samples; deterministic under a seeded RNG stream.
pub fn sample<R: Rng + ?Sized>(
    world: &WorldModel,
    class_id: Class,
    sigma: f64,
    rng: &mut R,
    count: usize,
) -> Result<Vec<[f64; 2]>> {
    (0..count)
        .map(|_| sample_one(world, class_id, sigma, rng))
        .collect()
}

/// Rectangular evaluation grid. Values are cell means sampled at (possibly
/// supersampled) cell centers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn square(extent: f64, n: usize) -> GridSpec {
        GridSpec {
            x_min: -extent,
            x_max: extent,
            y_min: -extent,
            y_max: extent,
            nx: n,
            ny: n,
        }
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    pub fn x_center(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx()
    }

    pub fn y_center(&self, j: usize) -> f64 {
        self.y_min + (j as f64 + 0.5) * self.dy()
    }
}

/// Smoothed class density evaluated over a grid, returned row-major with the
/// x index fastest: `vals[j * nx + i]`.
///
/// The fill is component-outer: each Gaussian accumulates over the cells of
/// its own +-8 std bounding box, with per-component supersampling so that
/// components much narrower than a cell still deposit their mass correctly.
pub fn density_grid(world: &WorldModel, class_id: Class, sigma: f64, grid: &GridSpec) -> Vec<f64> {
    let cm = world.class(class_id);
    let sig2 = sigma * sigma;
    let (dx, dy) = (grid.dx(), grid.dy());
    let mut vals = vec![0.0f64; grid.nx * grid.ny];
    for c in &cm.components {
        let (lo, hi) = c.cov_eigenvalues();
        let (lo, hi) = (lo + sig2, hi + sig2);
        let radius = 8.0 * hi.sqrt();
        let sub = ((dx.max(dy) / (0.75 * lo.sqrt())).ceil() as usize).clamp(1, 24);
        let i0 = (((c.mu[0] - radius) - grid.x_min) / dx).floor().max(0.0) as usize;
        let i1 = ((((c.mu[0] + radius) - grid.x_min) / dx).ceil() as usize).min(grid.nx);
        let j0 = (((c.mu[1] - radius) - grid.y_min) / dy).floor().max(0.0) as usize;
        let j1 = ((((c.mu[1] + radius) - grid.y_min) / dy).ceil() as usize).min(grid.ny);
        if i0 >= i1 || j0 >= j1 {
            continue;
        }
        let a = c.sigma[0][0] + sig2;
        let b = c.sigma[0][1];
        let d = c.sigma[1][1] + sig2;
        let det = a * d - b * b;
        let norm = c.phi / (std::f64::consts::TAU * det.sqrt()) / (sub * sub) as f64;
        let (inv_a, inv_b, inv_d) = (d / det, -b / det, a / det);
        let sdx = dx / sub as f64;
        let sdy = dy / sub as f64;
        for j in j0..j1 {
            let row = j * grid.nx;
            for i in i0..i1 {
                let mut acc = 0.0;
                for sj in 0..sub {
                    let py = grid.y_min + j as f64 * dy + (sj as f64 + 0.5) * sdy - c.mu[1];
                    for si in 0..sub {
                        let px = grid.x_min + i as f64 * dx + (si as f64 + 0.5) * sdx - c.mu[0];
                        let qf = inv_a * px * px + 2.0 * inv_b * px * py + inv_d * py * py;
                        acc += (-0.5 * qf).exp();
                    }
                }
                vals[row + i] += norm * acc;
            }
        }
    }
    vals
}

/// Largest density threshold tau such that the quadrature mass of
/// `{x : density(x) > tau}` at sigma = 0 reaches the requested quantile.
/// Defines the "99% contour" and the outlier classification.
pub fn mass_threshold(
    world: &WorldModel,
    class_id: Class,
    quantile: f64,
    grid: &GridSpec,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&quantile) {
        return Err(Error::Domain(format!(
            "quantile {quantile} outside [0, 1]"
        )));
    }
    if quantile >= 1.0 {
        return Ok(0.0);
    }
    let width = (grid.x_max - grid.x_min).min(grid.y_max - grid.y_min);
    if width < 6.0 * world.sigma_data {
        return Err(Error::Domain(format!(
            "grid must cover at least 6 pooled standard deviations per axis \
             (width {width} < {})",
            6.0 * world.sigma_data
        )));
    }
    let vals = density_grid(world, class_id, 0.0, grid);
    let cell = grid.cell_area();
    let total: f64 = vals.iter().sum::<f64>() * cell;
    if (total - 1.0).abs() > 1e-2 {
        return Err(Error::Resolution(format!(
            "grid mass {total} deviates from 1 by more than 1e-2; refine the grid"
        )));
    }
    let mut sorted = vals;
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap());
    let target = quantile * total;
    let mut acc = 0.0;
    for v in &sorted {
        acc += v * cell;
        if acc >= target {
            return Ok(*v);
        }
    }
    Ok(0.0)
}

// --- world.json -------------------------------------------------------

pub const WORLD_FORMAT: &str = "GLAB-WORLD/1";

#[derive(Serialize, Deserialize)]
struct WorldFile {
    format: String,
    seed: u64,
    sigma_data: f64,
    classes: Vec<ClassMixture>,
}

/// Serialize the world to the versioned `world.json` schema. Floats use
/// shortest round-trip decimal form, so loading reproduces them bitwise.
pub fn world_to_json(world: &WorldModel) -> Result<String> {
    let file = WorldFile {
        format: WORLD_FORMAT.to_string(),
        seed: world.seed,
        sigma_data: world.sigma_data,
        classes: world.classes.clone(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn world_from_json(text: &str) -> Result<WorldModel> {
    let file: WorldFile = serde_json::from_str(text)?;
    if file.format != WORLD_FORMAT {
        return Err(Error::Format(format!(
            "unknown world format {:?}, expected {WORLD_FORMAT:?}",
            file.format
        )));
    }
    let mut world = WorldModel {
        seed: file.seed,
        sigma_data: file.sigma_data,
        classes: file.classes,
    };
    for cm in &mut world.classes {
        cm.rebuild_cache();
    }
    Ok(world)
}

pub fn save_world(world: &WorldModel, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, world_to_json(world)?)?;
    Ok(())
}

pub fn load_world(path: &std::path::Path) -> Result<WorldModel> {
    world_from_json(&std::fs::read_to_string(path)?)
}
