//! Guidance combinators: turn one or two denoiser evaluations into a guided
//! denoiser.
//!
//! Every combinator is the same affine extrapolation `A + w (B - A)`:
//! internal guidance extrapolates the final head away from the intermediate
//! head, CFG extrapolates the conditional output away from the
//! unconditional one, and autoguidance extrapolates a well-trained model
//! away from an earlier snapshot of itself. At `w = 1` each combinator
//! returns `B` bitwise, which is what makes interval gating (weight 1
//! outside the interval) reproduce unguided sampling exactly.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::Class;
use crate::net::{self, ClassLabel, NetInput, NetParams};
use crate::sampler::Denoiser;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    Cfg,
    Autoguidance,
    Ig,
    IgCfg,
}

/// Which combinator to apply, its weight(s), and its active noise interval.
/// `sigma_high = None` means unbounded above. `w2` is the CFG weight of the
/// combined IG+CFG mode and is ignored elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceSpec {
    pub mode: GuidanceMode,
    pub w: f64,
    pub w2: f64,
    pub sigma_low: f64,
    pub sigma_high: Option<f64>,
    /// Checkpoint id of the weak model (Autoguidance only).
    pub aux_checkpoint: Option<String>,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        GuidanceSpec {
            mode: GuidanceMode::None,
            w: 1.0,
            w2: 1.0,
            sigma_low: 0.0,
            sigma_high: None,
            aux_checkpoint: None,
        }
    }
}

impl GuidanceSpec {
    pub fn validate(&self) -> Result<()> {
        let hi = self.sigma_high.unwrap_or(f64::INFINITY);
        if !(self.sigma_low < hi) {
            return Err(Error::Config(format!(
                "guidance interval needs sigma_low < sigma_high (got {} and {hi})",
                self.sigma_low
            )));
        }
        if !self.w.is_finite() || !self.w2.is_finite() {
            return Err(Error::Config("guidance weights must be finite".into()));
        }
        if self.mode == GuidanceMode::Autoguidance && self.aux_checkpoint.is_none() {
            return Err(Error::Config(
                "autoguidance requires an aux_checkpoint".into(),
            ));
        }
        Ok(())
    }

    /// Compact human-readable tag used in file names and reports.
    pub fn tag(&self) -> String {
        let gate = match self.sigma_high {
            Some(hi) => format!("_gate{:.3}-{:.3}", self.sigma_low, hi),
            None if self.sigma_low > 0.0 => format!("_gate{:.3}-inf", self.sigma_low),
            None => String::new(),
        };
        match self.mode {
            GuidanceMode::None => "none".to_string(),
            GuidanceMode::Cfg => format!("cfg_w{}{gate}", self.w),
            GuidanceMode::Autoguidance => format!("ag_w{}{gate}", self.w),
            GuidanceMode::Ig => format!("ig_w{}{gate}", self.w),
            GuidanceMode::IgCfg => format!("ig_cfg_w{}_w{}{gate}", self.w, self.w2),
        }
    }
}

/// A + w (B - A), returning B bitwise at w = 1.
#[inline]
fn extrapolate(a: [f64; 2], b: [f64; 2], w: f64) -> [f64; 2] {
    if w == 1.0 {
        return b;
    }
    [a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])]
}

/// Internal guidance: extrapolate the final-head output away from the
/// intermediate-head output.
pub fn internal_guidance(d_inter: [f64; 2], d_final: [f64; 2], w: f64) -> [f64; 2] {
    extrapolate(d_inter, d_final, w)
}

/// Classifier-free guidance: extrapolate the conditional output away from
/// the unconditional one.
pub fn cfg(d_uncond: [f64; 2], d_cond: [f64; 2], w: f64) -> [f64; 2] {
    extrapolate(d_uncond, d_cond, w)
}

/// Autoguidance: extrapolate the good model away from the bad one.
pub fn autoguidance(d_bad: [f64; 2], d_good: [f64; 2], w: f64) -> [f64; 2] {
    extrapolate(d_bad, d_good, w)
}

/// Piecewise-constant interval gate: weight `w` for sigma in
/// `(sigma_low, sigma_high]`, weight 1 (no guidance) outside.
pub fn interval_weight(sigma: f64, w: f64, sigma_low: f64, sigma_high: f64) -> f64 {
    if sigma > sigma_low && sigma <= sigma_high {
        w
    } else {
        1.0
    }
}

/// The main (EMA) model plus an optional weak auxiliary model, with a probe
/// counting trunk forward passes.
pub struct DenoiserBundle {
    pub main: NetParams,
    pub aux: Option<NetParams>,
    trunk_evals: AtomicU64,
}

impl DenoiserBundle {
    pub fn new(main: NetParams, aux: Option<NetParams>) -> DenoiserBundle {
        DenoiserBundle { main, aux, trunk_evals: AtomicU64::new(0) }
    }

    /// Trunk forward passes performed since construction or the last reset.
    pub fn trunk_eval_count(&self) -> u64 {
        self.trunk_evals.load(Ordering::Relaxed)
    }

    pub fn reset_eval_count(&self) {
        self.trunk_evals.store(0, Ordering::Relaxed);
    }

    /// Both heads' denoised outputs from one shared trunk pass.
    pub fn denoise_both(&self, x: [f64; 2], sigma: f64, label: ClassLabel) -> ([f64; 2], [f64; 2]) {
        self.trunk_evals.fetch_add(1, Ordering::Relaxed);
        net::denoise_both(&self.main, NetInput { x, sigma, label })
            .expect("sampler evaluates only at sigma > 0")
    }

    fn denoise_aux_final(&self, x: [f64; 2], sigma: f64, label: ClassLabel) -> [f64; 2] {
        let aux = self.aux.as_ref().expect("validated: aux model present");
        self.trunk_evals.fetch_add(1, Ordering::Relaxed);
        net::denoise_both(aux, NetInput { x, sigma, label })
            .expect("sampler evaluates only at sigma > 0")
            .1
    }
}

/// A guidance spec bound to a bundle; a pure denoiser usable by the sampler.
pub struct GuidedDenoiser<'a> {
    bundle: &'a DenoiserBundle,
    spec: GuidanceSpec,
}

/// Dispatch a spec over a bundle. Evaluation cost per call in trunk passes:
/// None = 1, IG = 1 (both heads share the trunk), CFG = 2, Autoguidance = 2,
/// IG+CFG = 2 (one per class branch). A gate that forces weight 1 skips the
/// second pass.
pub fn guided_denoiser<'a>(
    bundle: &'a DenoiserBundle,
    spec: GuidanceSpec,
) -> Result<GuidedDenoiser<'a>> {
    spec.validate()?;
    if spec.mode == GuidanceMode::Autoguidance && bundle.aux.is_none() {
        return Err(Error::Config(
            "autoguidance spec needs a bundle with an aux model".into(),
        ));
    }
    Ok(GuidedDenoiser { bundle, spec })
}

impl Denoiser for GuidedDenoiser<'_> {
    fn denoise(&self, x: [f64; 2], sigma: f64, class: Class) -> [f64; 2] {
        let label = ClassLabel::from(class);
        let spec = &self.spec;
        let hi = spec.sigma_high.unwrap_or(f64::INFINITY);
        match spec.mode {
            GuidanceMode::None => self.bundle.denoise_both(x, sigma, label).1,
            GuidanceMode::Ig => {
                let w = interval_weight(sigma, spec.w, spec.sigma_low, hi);
                let (d_i, d_f) = self.bundle.denoise_both(x, sigma, label);
                internal_guidance(d_i, d_f, w)
            }
            GuidanceMode::Cfg => {
                let w = interval_weight(sigma, spec.w, spec.sigma_low, hi);
                let d_cond = self.bundle.denoise_both(x, sigma, label).1;
                if w == 1.0 {
                    return d_cond;
                }
                let d_uncond = self.bundle.denoise_both(x, sigma, ClassLabel::Null).1;
                cfg(d_uncond, d_cond, w)
            }
            GuidanceMode::Autoguidance => {
                let w = interval_weight(sigma, spec.w, spec.sigma_low, hi);
                let d_good = self.bundle.denoise_both(x, sigma, label).1;
                if w == 1.0 {
                    return d_good;
                }
                let d_bad = self.bundle.denoise_aux_final(x, sigma, label);
                autoguidance(d_bad, d_good, w)
            }
            GuidanceMode::IgCfg => {
                // IG per class branch first, then CFG across the branches.
                let w1 = interval_weight(sigma, spec.w, spec.sigma_low, hi);
                let w2 = interval_weight(sigma, spec.w2, spec.sigma_low, hi);
                let (d_i, d_f) = self.bundle.denoise_both(x, sigma, label);
                let d_cond = internal_guidance(d_i, d_f, w1);
                if w2 == 1.0 {
                    return d_cond;
                }
                let (n_i, n_f) = self.bundle.denoise_both(x, sigma, ClassLabel::Null);
                let d_uncond = internal_guidance(n_i, n_f, w1);
                cfg(d_uncond, d_cond, w2)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetLayout;
    use proptest::prelude::*;

    #[test]
    fn combinator_identities() {
        let a = [0.3, -0.7];
        let b = [1.1, 0.4];
        assert_eq!(internal_guidance(a, b, 1.0), b);
        assert_eq!(internal_guidance(a, b, 0.0), a);
        assert_eq!(internal_guidance([0.0, 0.0], [1.0, 0.0], 2.0), [2.0, 0.0]);
        assert_eq!(cfg(a, b, 1.0), b);
        assert_eq!(cfg(b, b, 7.3), b);
        assert_eq!(autoguidance(a, b, 1.0), b);
        assert_eq!(autoguidance(b, b, 2.0), b);
    }

    #[test]
    fn interval_weight_boundaries() {
        // Half-open (low, high]: high included, low excluded.
        assert_eq!(interval_weight(0.8, 2.5, 0.3, 0.8), 2.5);
        assert_eq!(interval_weight(0.3, 2.5, 0.3, 0.8), 1.0);
        assert_eq!(interval_weight(0.5, 2.5, 0.3, 0.8), 2.5);
        assert_eq!(interval_weight(0.9, 2.5, 0.3, 0.8), 1.0);
        // Full interval reduces gated guidance to plain guidance.
        for sigma in [1e-4, 0.1, 3.0, 50.0] {
            assert_eq!(interval_weight(sigma, 2.0, 0.0, f64::INFINITY), 2.0);
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = GuidanceSpec { mode: GuidanceMode::Ig, w: 2.0, ..Default::default() };
        spec.validate().unwrap();
        spec.sigma_low = 3.0;
        spec.sigma_high = Some(1.0);
        assert!(spec.validate().is_err());
        let ag = GuidanceSpec {
            mode: GuidanceMode::Autoguidance,
            w: 2.0,
            ..Default::default()
        };
        assert!(ag.validate().is_err(), "autoguidance needs aux checkpoint");
    }

    #[test]
    fn spec_serialization_round_trip() {
        let spec = GuidanceSpec {
            mode: GuidanceMode::IgCfg,
            w: 1.0,
            w2: 1.5,
            sigma_low: 1.5,
            sigma_high: Some(5.0),
            aux_checkpoint: None,
        };
        let text = serde_json::to_string(&spec).unwrap();
        let back: GuidanceSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }

    fn bundle() -> DenoiserBundle {
        // Distinct head gains so the heads (and therefore the guidance
        // modes) actually disagree.
        let mut main = NetParams::init(NetLayout::new(64, 0.5), 21);
        let g = main.layout.gains();
        main.data[g.offset] = 0.15;
        main.data[g.offset + 1] = 0.45;
        let mut aux = NetParams::init(NetLayout::new(64, 0.5), 22);
        let g = aux.layout.gains();
        aux.data[g.offset + 1] = 0.4;
        DenoiserBundle::new(main, Some(aux))
    }

    #[test]
    fn trunk_eval_counts_per_mode() {
        let b = bundle();
        let x = [0.4, -0.2];
        let cases = [
            (GuidanceMode::None, 1.0, 1u64),
            (GuidanceMode::Ig, 2.0, 1),
            (GuidanceMode::Cfg, 2.5, 2),
            (GuidanceMode::Autoguidance, 2.0, 2),
            (GuidanceMode::IgCfg, 1.5, 2),
        ];
        for (mode, w, expected) in cases {
            let spec = GuidanceSpec {
                mode,
                w,
                w2: 1.5,
                aux_checkpoint: matches!(mode, GuidanceMode::Autoguidance)
                    .then(|| "aux".to_string()),
                ..Default::default()
            };
            let den = guided_denoiser(&b, spec).unwrap();
            b.reset_eval_count();
            den.denoise(x, 0.7, Class::A);
            assert_eq!(b.trunk_eval_count(), expected, "mode {mode:?}");
        }
    }

    #[test]
    fn ig_at_weight_one_is_bitwise_unguided() {
        let b = bundle();
        let unguided = guided_denoiser(&b, GuidanceSpec::default()).unwrap();
        let ig1 = guided_denoiser(
            &b,
            GuidanceSpec { mode: GuidanceMode::Ig, w: 1.0, ..Default::default() },
        )
        .unwrap();
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        for _ in 0..1000 {
            let x = [next(), next()];
            let sigma = 0.01 + next().abs();
            let a = unguided.denoise(x, sigma, Class::B);
            let c = ig1.denoise(x, sigma, Class::B);
            assert_eq!(a[0].to_bits(), c[0].to_bits());
            assert_eq!(a[1].to_bits(), c[1].to_bits());
        }
    }

    #[test]
    fn gate_outside_interval_is_bitwise_unguided() {
        let b = bundle();
        let unguided = guided_denoiser(&b, GuidanceSpec::default()).unwrap();
        let gated = guided_denoiser(
            &b,
            GuidanceSpec {
                mode: GuidanceMode::Ig,
                w: 2.0,
                sigma_low: 0.3,
                sigma_high: Some(5.0),
                ..Default::default()
            },
        )
        .unwrap();
        // sigma below the interval: weight 1, identical to unguided.
        let x = [1.2, -0.5];
        let a = unguided.denoise(x, 0.1, Class::A);
        let g = gated.denoise(x, 0.1, Class::A);
        assert_eq!(a[0].to_bits(), g[0].to_bits());
        assert_eq!(a[1].to_bits(), g[1].to_bits());
        // inside (including the upper boundary): differs.
        let g_hi = gated.denoise(x, 5.0, Class::A);
        let a_hi = unguided.denoise(x, 5.0, Class::A);
        assert_ne!(g_hi[0].to_bits(), a_hi[0].to_bits());
    }

    #[test]
    fn autoguidance_equal_models_is_identity() {
        let main = NetParams::init(NetLayout::new(64, 0.5), 30);
        let b = DenoiserBundle::new(main.clone(), Some(main));
        let spec = GuidanceSpec {
            mode: GuidanceMode::Autoguidance,
            w: 2.0,
            aux_checkpoint: Some("self".into()),
            ..Default::default()
        };
        let den = guided_denoiser(&b, spec).unwrap();
        let plain = guided_denoiser(&b, GuidanceSpec::default()).unwrap();
        let x = [0.2, 0.9];
        let a = den.denoise(x, 0.5, Class::A);
        let c = plain.denoise(x, 0.5, Class::A);
        assert_eq!(a[0].to_bits(), c[0].to_bits());
        assert_eq!(a[1].to_bits(), c[1].to_bits());
    }

    proptest! {
        /// Affine consistency: combinators commute with rigid rotations
        /// applied jointly to both inputs.
        #[test]
        fn combinators_commute_with_rotations(
            ax in -3.0f64..3.0, ay in -3.0f64..3.0,
            bx in -3.0f64..3.0, by in -3.0f64..3.0,
            w in -1.0f64..4.0, theta in 0.0f64..std::f64::consts::TAU,
        ) {
            let rot = |v: [f64; 2]| {
                let (s, c) = theta.sin_cos();
                [c * v[0] - s * v[1], s * v[0] + c * v[1]]
            };
            let lhs = rot(extrapolate([ax, ay], [bx, by], w));
            let rhs = extrapolate(rot([ax, ay]), rot([bx, by]), w);
            let scale = lhs[0].abs().max(lhs[1].abs()).max(1.0);
            prop_assert!((lhs[0] - rhs[0]).abs() <= 1e-12 * scale);
            prop_assert!((lhs[1] - rhs[1]).abs() <= 1e-12 * scale);
        }

        /// At w = 1 every combinator returns its second argument bitwise.
        #[test]
        fn weight_one_returns_b_bitwise(
            ax in -1e3f64..1e3, ay in -1e3f64..1e3,
            bx in -1e3f64..1e3, by in -1e3f64..1e3,
        ) {
            let out = extrapolate([ax, ay], [bx, by], 1.0);
            prop_assert_eq!(out[0].to_bits(), bx.to_bits());
            prop_assert_eq!(out[1].to_bits(), by.to_bits());
        }
    }
}
