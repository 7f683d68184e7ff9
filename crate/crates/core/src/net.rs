//! Magnitude-preserving MLP denoiser with an energy head after the final
//! hidden layer and a second "weak" head after the first hidden layer.
//!
//! The network outputs a scalar energy `G`, the log of an unnormalized
//! density. Score and denoised sample are derived from `G` by exact
//! differentiation with respect to the input:
//!
//! ```text
//! G(x; sigma, c) = -1/2 ||x*||^2 - g_head / (sigma n) * sum_i F_i(x*, 1/4 log sigma, c)^2
//! x* = x / sqrt(sigma^2 + sigma_data^2)
//! score = grad_x G,   D = x + sigma^2 * score
//! ```
//!
//! With the learned gains `g` initialized to zero the second term vanishes
//! and `G` is exactly the Gaussian energy, so the init network is the
//! optimal first-order denoiser.
//!
//! Magnitude preservation follows the EDM2 recipe: every weight row is
//! forced back to unit Euclidean norm after each optimizer step, activations
//! are SiLU scaled by 1/0.596, and there are no biases besides the
//! constant-1 input channel.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffkit::{self, DualScalar, NodeId, ParamSeg, Tape};
use crate::error::{Error, Result};
use crate::mixture::Class;


/// SiLU output is divided by 0.596 to restore unit variance.
pub const MP_SILU_GAIN: f64 = 1.0 / 0.596;

/// Which energy head to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Intermediate,
    Final,
}

/// Conditioning label: the two data classes plus the null label used for
/// classifier-free guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassLabel {
    A,
    B,
    Null,
}

impl ClassLabel {
    pub fn index(self) -> usize {
        match self {
            ClassLabel::A => 0,
            ClassLabel::B => 1,
            ClassLabel::Null => 2,
        }
    }
}

impl From<Class> for ClassLabel {
    fn from(c: Class) -> ClassLabel {
        match c {
            Class::A => ClassLabel::A,
            Class::B => ClassLabel::B,
        }
    }
}

/// One evaluation point.
#[derive(Debug, Clone, Copy)]
pub struct NetInput {
    pub x: [f64; 2],
    pub sigma: f64,
    pub label: ClassLabel,
}

/// Shapes and flat-vector segment offsets of all weights. The intermediate
/// head always reads the representation after hidden layer 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetLayout {
    pub width: usize,
    pub in_dim: usize,
    pub hidden_layers: usize,
    pub n_classes: usize,
    pub sigma_data: f64,
}

pub const HEAD_LAYER: usize = 1;

impl NetLayout {
    pub fn new(width: usize, sigma_data: f64) -> NetLayout {
        NetLayout {
            width,
            in_dim: 4,
            hidden_layers: 4,
            n_classes: 3,
            sigma_data,
        }
    }

    pub fn w_in(&self) -> ParamSeg {
        ParamSeg { offset: 0, rows: self.width, cols: self.in_dim }
    }

    pub fn w_hidden(&self, layer: usize) -> ParamSeg {
        debug_assert!(layer < self.hidden_layers);
        let base = self.w_in().len();
        ParamSeg {
            offset: base + layer * self.width * self.width,
            rows: self.width,
            cols: self.width,
        }
    }

    pub fn w_head(&self, head: Head) -> ParamSeg {
        let base = self.w_in().len() + self.hidden_layers * self.width * self.width;
        let idx = match head {
            Head::Intermediate => 0,
            Head::Final => 1,
        };
        ParamSeg {
            offset: base + idx * self.width * self.width,
            rows: self.width,
            cols: self.width,
        }
    }

    /// Two learned output gains, order [g_intermediate, g_final].
    pub fn gains(&self) -> ParamSeg {
        let base = self.w_in().len() + (self.hidden_layers + 2) * self.width * self.width;
        ParamSeg { offset: base, rows: 2, cols: 1 }
    }

    pub fn gain(&self, head: Head) -> ParamSeg {
        let g = self.gains();
        let idx = match head {
            Head::Intermediate => 0,
            Head::Final => 1,
        };
        ParamSeg { offset: g.offset + idx, rows: 1, cols: 1 }
    }

    pub fn embed(&self) -> ParamSeg {
        let g = self.gains();
        ParamSeg {
            offset: g.offset + g.len(),
            rows: self.n_classes,
            cols: self.width,
        }
    }

    pub fn embed_row(&self, label: ClassLabel) -> ParamSeg {
        let e = self.embed();
        ParamSeg {
            offset: e.offset + label.index() * self.width,
            rows: 1,
            cols: self.width,
        }
    }

    pub fn total_len(&self) -> usize {
        let e = self.embed();
        e.offset + e.len()
    }

    /// All row-normalized segments: every weight matrix plus the embedding
    /// table (each embedding is one row).
    pub fn row_normalized_segments(&self) -> Vec<ParamSeg> {
        let mut segs = vec![self.w_in()];
        for l in 0..self.hidden_layers {
            segs.push(self.w_hidden(l));
        }
        segs.push(self.w_head(Head::Intermediate));
        segs.push(self.w_head(Head::Final));
        segs.push(self.embed());
        segs
    }
}

/// All weights as one flat vector plus the layout describing it.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub layout: NetLayout,
    pub data: Vec<f64>,
}

impl NetParams {
    /// Random init: unit-norm rows everywhere, gains at zero.
    pub fn init(layout: NetLayout, seed: u64) -> NetParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; layout.total_len()];
        let segs = layout.row_normalized_segments();
        for seg in segs {
            for r in 0..seg.rows {
                let row = &mut data[seg.offset + r * seg.cols..seg.offset + (r + 1) * seg.cols];
                for v in row.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                normalize_row(row);
            }
        }
        NetParams { layout, data }
    }

    pub fn seg(&self, seg: ParamSeg) -> &[f64] {
        &self.data[seg.offset..seg.offset + seg.len()]
    }

    pub fn gain_value(&self, head: Head) -> f64 {
        self.data[self.layout.gain(head).offset]
    }

    /// Forced weight normalization: rescale every weight row and embedding
    /// row back to unit Euclidean norm.
    pub fn normalize_rows(&mut self) {
        for seg in self.layout.row_normalized_segments() {
            for r in 0..seg.rows {
                let row =
                    &mut self.data[seg.offset + r * seg.cols..seg.offset + (r + 1) * seg.cols];
                normalize_row(row);
            }
        }
    }

    /// Largest deviation of any normalized row from unit norm.
    pub fn max_row_norm_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for seg in self.layout.row_normalized_segments() {
            for r in 0..seg.rows {
                let row = &self.data[seg.offset + r * seg.cols..seg.offset + (r + 1) * seg.cols];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.max((norm - 1.0).abs());
            }
        }
        worst
    }
}

fn normalize_row(row: &mut [f64]) {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
}

/// EDM input preconditioning: `x* = x / sqrt(sigma^2 + sigma_data^2)`.
pub fn precondition_input(x: [f64; 2], sigma: f64, sigma_data: f64) -> [f64; 2] {
    let inv = 1.0 / (sigma * sigma + sigma_data * sigma_data).sqrt();
    [x[0] * inv, x[1] * inv]
}

/// Both head energies from one trunk pass, in dual-scalar form.
#[derive(Debug, Clone, Copy)]
pub struct EnergyPair {
    pub intermediate: DualScalar,
    pub final_head: DualScalar,
}

impl EnergyPair {
    pub fn head(&self, head: Head) -> DualScalar {
        match head {
            Head::Intermediate => self.intermediate,
            Head::Final => self.final_head,
        }
    }
}

fn affine_dual(params: &NetParams, seg: ParamSeg, input: &[DualScalar], out: &mut [DualScalar]) {
    let w = params.seg(seg);
    for (j, o) in out.iter_mut().enumerate().take(seg.rows) {
        let row = &w[j * seg.cols..(j + 1) * seg.cols];
        // Three independent accumulator chains, same per-lane operation
        // order as the tape's affine.
        let (mut v, mut t0, mut t1) = (0.0f64, 0.0f64, 0.0f64);
        for (k, &wk) in row.iter().enumerate() {
            let u = input[k];
            v += wk * u.value;
            t0 += wk * u.tangents[0];
            t1 += wk * u.tangents[1];
        }
        *o = DualScalar { value: v, tangents: [t0, t1] };
    }
}

/// Shared-trunk forward pass producing both head energies. The arithmetic
/// mirrors [`energies_on_tape`] operation for operation.
pub fn energy_pair_dual(
    params: &NetParams,
    x: [DualScalar; 2],
    sigma: f64,
    label: ClassLabel,
) -> Result<EnergyPair> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!(
            "energy requires sigma > 0 (got {sigma})"
        )));
    }
    let lay = &params.layout;
    let n = lay.width;
    let inv = 1.0 / (sigma * sigma + lay.sigma_data * lay.sigma_data).sqrt();
    let xs = [x[0].scale(inv), x[1].scale(inv)];
    let norm2 = xs[0].square().add(xs[1].square());
    let input = [
        xs[0],
        xs[1],
        DualScalar::constant(0.25 * sigma.ln()),
        DualScalar::constant(1.0),
    ];

    let mut a = vec![DualScalar::constant(0.0); n];
    let mut pre = vec![DualScalar::constant(0.0); n];
    affine_dual(params, lay.w_in(), &input, &mut pre);
    let embed = params.seg(lay.embed_row(label));
    for j in 0..n {
        pre[j] = pre[j].add(DualScalar::constant(embed[j]));
        a[j] = pre[j].silu().scale(MP_SILU_GAIN);
    }
    let mut a_inter = vec![DualScalar::constant(0.0); n];
    for l in 0..lay.hidden_layers {
        affine_dual(params, lay.w_hidden(l), &a.clone(), &mut pre);
        for j in 0..n {
            a[j] = pre[j].silu().scale(MP_SILU_GAIN);
        }
        if l + 1 == HEAD_LAYER {
            a_inter.copy_from_slice(&a);
        }
    }

    let c2 = -1.0 / (sigma * n as f64);
    let mut f = vec![DualScalar::constant(0.0); n];
    let mut head_energy = |head: Head, feat_src: &[DualScalar]| -> DualScalar {
        affine_dual(params, lay.w_head(head), feat_src, &mut f);
        let mut s = DualScalar::constant(0.0);
        for fj in &f {
            s = s.add(fj.square());
        }
        let g = params.gain_value(head);
        norm2.scale(-0.5).add(s.scale(g).scale(c2))
    };
    let e_i = head_energy(Head::Intermediate, &a_inter);
    let e_f = head_energy(Head::Final, &a);
    Ok(EnergyPair { intermediate: e_i, final_head: e_f })
}

/// Feature vector of the requested head (values only).
pub fn features(params: &NetParams, input: NetInput, head: Head) -> Result<Vec<f64>> {
    let lay = &params.layout;
    let n = lay.width;
    let inv = 1.0 / (input.sigma * input.sigma + lay.sigma_data * lay.sigma_data).sqrt();
    let xs = [
        DualScalar::input(input.x[0], 0).scale(inv),
        DualScalar::input(input.x[1], 1).scale(inv),
    ];
    let in4 = [
        xs[0],
        xs[1],
        DualScalar::constant(0.25 * input.sigma.ln()),
        DualScalar::constant(1.0),
    ];
    let mut a = vec![DualScalar::constant(0.0); n];
    let mut pre = vec![DualScalar::constant(0.0); n];
    affine_dual(params, lay.w_in(), &in4, &mut pre);
    let embed = params.seg(lay.embed_row(input.label));
    for j in 0..n {
        pre[j] = pre[j].add(DualScalar::constant(embed[j]));
        a[j] = pre[j].silu().scale(MP_SILU_GAIN);
    }
    let read_layer = match head {
        Head::Intermediate => HEAD_LAYER,
        Head::Final => lay.hidden_layers,
    };
    for l in 0..read_layer {
        affine_dual(params, lay.w_hidden(l), &a.clone(), &mut pre);
        for j in 0..n {
            a[j] = pre[j].silu().scale(MP_SILU_GAIN);
        }
    }
    let mut f = vec![DualScalar::constant(0.0); n];
    affine_dual(params, lay.w_head(head), &a, &mut f);
    Ok(f.iter().map(|d| d.value).collect())
}

/// Per-layer trunk activations (values), for magnitude diagnostics.
pub fn trunk_activations(params: &NetParams, input: NetInput) -> Result<Vec<Vec<f64>>> {
    let lay = &params.layout;
    let n = lay.width;
    let inv = 1.0 / (input.sigma * input.sigma + lay.sigma_data * lay.sigma_data).sqrt();
    let in4 = [
        DualScalar::input(input.x[0], 0).scale(inv),
        DualScalar::input(input.x[1], 1).scale(inv),
        DualScalar::constant(0.25 * input.sigma.ln()),
        DualScalar::constant(1.0),
    ];
    let mut out = Vec::new();
    let mut a = vec![DualScalar::constant(0.0); n];
    let mut pre = vec![DualScalar::constant(0.0); n];
    affine_dual(params, lay.w_in(), &in4, &mut pre);
    let embed = params.seg(lay.embed_row(input.label));
    for j in 0..n {
        pre[j] = pre[j].add(DualScalar::constant(embed[j]));
        a[j] = pre[j].silu().scale(MP_SILU_GAIN);
    }
    out.push(a.iter().map(|d| d.value).collect());
    for l in 0..lay.hidden_layers {
        affine_dual(params, lay.w_hidden(l), &a.clone(), &mut pre);
        for j in 0..n {
            a[j] = pre[j].silu().scale(MP_SILU_GAIN);
        }
        out.push(a.iter().map(|d| d.value).collect());
    }
    Ok(out)
}

/// Scalar energy G of one head.
pub fn energy(params: &NetParams, input: NetInput, head: Head) -> Result<f64> {
    let pair = energy_pair_dual(
        params,
        [DualScalar::input(input.x[0], 0), DualScalar::input(input.x[1], 1)],
        input.sigma,
        input.label,
    )?;
    Ok(pair.head(head).value)
}

/// Exact input-gradient of the energy via the forward-mode engine.
pub fn model_score(params: &NetParams, input: NetInput, head: Head) -> Result<[f64; 2]> {
    if !(input.sigma > 0.0) {
        return Err(Error::Domain(format!(
            "model_score requires sigma > 0 (got {})",
            input.sigma
        )));
    }
    let (_, grad) = diffkit::input_gradient(
        |x0, x1| {
            energy_pair_dual(params, [x0, x1], input.sigma, input.label)
                .expect("sigma checked above")
                .head(head)
        },
        input.x,
    );
    Ok(grad)
}

/// Denoised estimate D = x + sigma^2 * score.
pub fn denoise(params: &NetParams, input: NetInput, head: Head) -> Result<[f64; 2]> {
    let s = model_score(params, input, head)?;
    let s2 = input.sigma * input.sigma;
    Ok([input.x[0] + s2 * s[0], input.x[1] + s2 * s[1]])
}

/// Both heads' denoised estimates from a single trunk pass.
pub fn denoise_both(params: &NetParams, input: NetInput) -> Result<([f64; 2], [f64; 2])> {
    let pair = energy_pair_dual(
        params,
        [DualScalar::input(input.x[0], 0), DualScalar::input(input.x[1], 1)],
        input.sigma,
        input.label,
    )?;
    let s2 = input.sigma * input.sigma;
    let d = |e: DualScalar| {
        [
            input.x[0] + s2 * e.tangents[0],
            input.x[1] + s2 * e.tangents[1],
        ]
    };
    Ok((d(pair.intermediate), d(pair.final_head)))
}

/// Record both head energies on a gradient tape (shared trunk). Returns
/// (intermediate, final) energy nodes. The arithmetic mirrors
/// [`energy_pair_dual`] operation for operation.
pub fn energies_on_tape(
    tape: &mut Tape<'_>,
    layout: &NetLayout,
    x: [f64; 2],
    sigma: f64,
    label: ClassLabel,
) -> Result<(NodeId, NodeId)> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!(
            "energy requires sigma > 0 (got {sigma})"
        )));
    }
    let n = layout.width;
    let inv = 1.0 / (sigma * sigma + layout.sigma_data * layout.sigma_data).sqrt();
    let xi = tape.input_x(x);
    let xs = tape.scale(xi, inv);
    let xsq = tape.square(xs);
    let norm2 = tape.sum(xsq);
    let tail = tape.constant(&[0.25 * sigma.ln(), 1.0]);
    let in4 = tape.concat(xs, tail);

    let pre0 = tape.affine(layout.w_in(), in4);
    let pre0 = tape.add_param(layout.embed_row(label), pre0);
    let s0 = tape.silu(pre0);
    let mut a = tape.scale(s0, MP_SILU_GAIN);
    let mut a_inter = a;
    for l in 0..layout.hidden_layers {
        let pre = tape.affine(layout.w_hidden(l), a);
        let s = tape.silu(pre);
        a = tape.scale(s, MP_SILU_GAIN);
        if l + 1 == HEAD_LAYER {
            a_inter = a;
        }
    }

    let c2 = -1.0 / (sigma * n as f64);
    let head_energy = |tape: &mut Tape<'_>, head: Head, src: NodeId| -> NodeId {
        let f = tape.affine(layout.w_head(head), src);
        let fsq = tape.square(f);
        let s = tape.sum(fsq);
        let g = tape.param_leaf(layout.gain(head));
        let gs = tape.mul(g, s);
        let term2 = tape.scale(gs, c2);
        let term1 = tape.scale(norm2, -0.5);
        tape.add(term1, term2)
    };
    let e_i = head_energy(tape, Head::Intermediate, a_inter);
    let e_f = head_energy(tape, Head::Final, a);
    Ok((e_i, e_f))
}

// --- checkpoint format -------------------------------------------------

pub const CKPT_MAGIC: &[u8; 12] = b"GLAB-CKPT/1\0";

/// Fixed declared array order: the raw parameter set then the EMA set.
fn array_names(layout: &NetLayout) -> Vec<(String, usize)> {
    let mut names = Vec::new();
    for prefix in ["params", "ema"] {
        names.push((format!("{prefix}.w_in"), layout.w_in().len()));
        for l in 0..layout.hidden_layers {
            names.push((format!("{prefix}.w_h{}", l + 1), layout.w_hidden(l).len()));
        }
        names.push((
            format!("{prefix}.head_inter"),
            layout.w_head(Head::Intermediate).len(),
        ));
        names.push((
            format!("{prefix}.head_final"),
            layout.w_head(Head::Final).len(),
        ));
        names.push((format!("{prefix}.gains"), layout.gains().len()));
        names.push((format!("{prefix}.embed"), layout.embed().len()));
    }
    names
}

fn param_set_slices<'a>(p: &'a NetParams) -> Vec<&'a [f64]> {
    let lay = &p.layout;
    let mut out = vec![p.seg(lay.w_in())];
    for l in 0..lay.hidden_layers {
        out.push(p.seg(lay.w_hidden(l)));
    }
    out.push(p.seg(lay.w_head(Head::Intermediate)));
    out.push(p.seg(lay.w_head(Head::Final)));
    out.push(p.seg(lay.gains()));
    out.push(p.seg(lay.embed()));
    out
}

/// Write a checkpoint holding the raw and EMA parameter sets.
pub fn save_checkpoint(
    path: &std::path::Path,
    params: &NetParams,
    ema: &NetParams,
) -> Result<()> {
    assert_eq!(params.layout, ema.layout, "raw and EMA layouts must match");
    let lay = &params.layout;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(lay.width as u32).to_le_bytes());
    buf.extend_from_slice(&(lay.width as u32).to_le_bytes()); // n == width
    buf.extend_from_slice(&(lay.hidden_layers as u32).to_le_bytes());
    buf.extend_from_slice(&(HEAD_LAYER as u32).to_le_bytes());
    buf.extend_from_slice(&lay.sigma_data.to_le_bytes());
    let names = array_names(lay);
    buf.extend_from_slice(&(names.len() as u32).to_le_bytes());
    let slices: Vec<&[f64]> = param_set_slices(params)
        .into_iter()
        .chain(param_set_slices(ema))
        .collect();
    for ((name, len), slice) in names.iter().zip(&slices) {
        assert_eq!(*len, slice.len());
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(slice.len() as u64).to_le_bytes());
        for v in *slice {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Load a checkpoint, returning (params, ema). Rejects unknown magic and
/// any dimension or array-order mismatch.
pub fn load_checkpoint(path: &std::path::Path) -> Result<(NetParams, NetParams)> {
    let buf = std::fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 12)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format(format!(
            "unknown checkpoint magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let rd_u32 = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    let width = rd_u32(&mut pos)? as usize;
    let n = rd_u32(&mut pos)? as usize;
    let depth = rd_u32(&mut pos)? as usize;
    let head_layer = rd_u32(&mut pos)? as usize;
    let sigma_data = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    if n != width || depth != 4 || head_layer != HEAD_LAYER {
        return Err(Error::Format(format!(
            "unsupported checkpoint dimensions (width {width}, n {n}, depth {depth}, head_layer {head_layer})"
        )));
    }
    let layout = NetLayout::new(width, sigma_data);
    let names = array_names(&layout);
    let count = rd_u32(&mut pos)? as usize;
    if count != names.len() {
        return Err(Error::Format(format!(
            "expected {} arrays, found {count}",
            names.len()
        )));
    }
    let mut sets = vec![
        NetParams { layout: layout.clone(), data: vec![0.0; layout.total_len()] },
        NetParams { layout: layout.clone(), data: vec![0.0; layout.total_len()] },
    ];
    let per_set = names.len() / 2;
    for (idx, (name, len)) in names.iter().enumerate() {
        let nlen = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let got = String::from_utf8_lossy(take(&mut pos, nlen)?).into_owned();
        if got != *name {
            return Err(Error::Format(format!(
                "array {idx}: expected {name:?}, found {got:?}"
            )));
        }
        let alen = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        if alen != *len {
            return Err(Error::Format(format!(
                "array {name}: expected {len} values, found {alen}"
            )));
        }
        let set = &mut sets[idx / per_set];
        let seg_order = [
            set.layout.w_in(),
            set.layout.w_hidden(0),
            set.layout.w_hidden(1),
            set.layout.w_hidden(2),
            set.layout.w_hidden(3),
            set.layout.w_head(Head::Intermediate),
            set.layout.w_head(Head::Final),
            set.layout.gains(),
            set.layout.embed(),
        ];
        let seg = seg_order[idx % per_set];
        for i in 0..alen {
            set.data[seg.offset + i] =
                f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        }
    }
    if pos != buf.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    let ema = sets.pop().unwrap();
    let params = sets.pop().unwrap();
    Ok((params, ema))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_params(seed: u64) -> NetParams {
        NetParams::init(NetLayout::new(64, 0.5), seed)
    }

    #[test]
    fn layout_has_expected_size() {
        let lay = NetLayout::new(64, 0.5);
        // 64x4 input + 4 hidden 64x64 + two heads 64x64 + 2 gains + 3x64 embed.
        assert_eq!(lay.total_len(), 256 + 4 * 4096 + 2 * 4096 + 2 + 192);
    }

    #[test]
    fn init_rows_are_unit_norm_and_gains_zero() {
        let p = test_params(1);
        assert!(p.max_row_norm_error() < 1e-12);
        assert_eq!(p.gain_value(Head::Intermediate), 0.0);
        assert_eq!(p.gain_value(Head::Final), 0.0);
    }

    #[test]
    fn precondition_examples() {
        assert_eq!(precondition_input([1.0, 0.0], 0.0, 0.5), [2.0, 0.0]);
        let xs = precondition_input([1.0, 1.0], 0.75f64.sqrt(), 0.5);
        assert!((xs[0] - 1.0).abs() < 1e-15 && (xs[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn energy_at_init_is_gaussian() {
        let p = test_params(2);
        let input = NetInput { x: [1.0, 1.0], sigma: 0.75f64.sqrt(), label: ClassLabel::A };
        let g = energy(&p, input, Head::Final).unwrap();
        assert!((g + 1.0).abs() < 1e-12, "G = {g}");
    }

    #[test]
    fn energy_rejects_sigma_zero() {
        let p = test_params(2);
        let input = NetInput { x: [0.0, 0.0], sigma: 0.0, label: ClassLabel::A };
        assert!(matches!(
            energy(&p, input, Head::Final),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn energy_bounded_by_gaussian_term_for_nonnegative_gain() {
        let mut p = test_params(3);
        let gains = p.layout.gains();
        p.data[gains.offset] = 0.3;
        p.data[gains.offset + 1] = 1.7;
        for &(x, sigma) in &[([0.2, -0.4], 0.1), ([1.5, 0.7], 1.0), ([-2.0, 0.3], 3.0)] {
            let xs = precondition_input(x, sigma, 0.5);
            let cap = -0.5 * (xs[0] * xs[0] + xs[1] * xs[1]);
            for head in [Head::Intermediate, Head::Final] {
                let g = energy(&p, NetInput { x, sigma, label: ClassLabel::B }, head).unwrap();
                assert!(g <= cap + 1e-15);
            }
        }
    }

    #[test]
    fn features_ignore_gains() {
        let p0 = test_params(4);
        let mut p1 = p0.clone();
        let gains = p1.layout.gains();
        p1.data[gains.offset] = 5.0;
        p1.data[gains.offset + 1] = -2.0;
        let input = NetInput { x: [0.3, -0.8], sigma: 0.4, label: ClassLabel::A };
        for head in [Head::Intermediate, Head::Final] {
            let f0 = features(&p0, input, head).unwrap();
            let f1 = features(&p1, input, head).unwrap();
            assert_eq!(f0, f1);
        }
    }

    #[test]
    fn features_are_homogeneous_without_bias_channels() {
        // Zero input-layer weights and zero embeddings: every activation is
        // the bias-free image of zeros, so head features are exactly zero.
        let mut p = test_params(5);
        let w_in = p.layout.w_in();
        for v in &mut p.data[w_in.offset..w_in.offset + w_in.len()] {
            *v = 0.0;
        }
        let emb = p.layout.embed();
        for v in &mut p.data[emb.offset..emb.offset + emb.len()] {
            *v = 0.0;
        }
        let input = NetInput { x: [0.7, -0.2], sigma: 1.0, label: ClassLabel::Null };
        for head in [Head::Intermediate, Head::Final] {
            let f = features(&p, input, head).unwrap();
            assert!(f.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn score_at_init_matches_linear_denoiser() {
        let p = test_params(6);
        let input = NetInput { x: [1.0, 1.0], sigma: 0.5, label: ClassLabel::A };
        let s = model_score(&p, input, Head::Final).unwrap();
        assert!((s[0] + 2.0).abs() < 1e-12 && (s[1] + 2.0).abs() < 1e-12);

        let d = denoise(
            &p,
            NetInput { x: [2.0, 0.0], sigma: 0.5, label: ClassLabel::A },
            Head::Final,
        )
        .unwrap();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);
    }

    #[test]
    fn init_denoise_identical_across_heads() {
        let p = test_params(7);
        for &(x, sigma) in &[([0.4, -1.2], 0.07), ([2.0, 1.0], 1.3), ([-0.3, 0.02], 4.0)] {
            let input = NetInput { x, sigma, label: ClassLabel::B };
            let di = denoise(&p, input, Head::Intermediate).unwrap();
            let df = denoise(&p, input, Head::Final).unwrap();
            assert_eq!(di[0].to_bits(), df[0].to_bits());
            assert_eq!(di[1].to_bits(), df[1].to_bits());
        }
    }

    #[test]
    fn denoise_shrinks_toward_x_at_tiny_sigma() {
        let mut p = test_params(8);
        let gains = p.layout.gains();
        p.data[gains.offset] = 0.2;
        p.data[gains.offset + 1] = 0.2;
        let sigma = 0.002;
        let input = NetInput { x: [0.9, -0.4], sigma, label: ClassLabel::A };
        let s = model_score(&p, input, Head::Final).unwrap();
        let d = denoise(&p, input, Head::Final).unwrap();
        let moved = ((d[0] - input.x[0]).powi(2) + (d[1] - input.x[1]).powi(2)).sqrt();
        let bound = sigma * sigma * (s[0] * s[0] + s[1] * s[1]).sqrt();
        assert!(moved <= bound + 1e-18);
    }

    #[test]
    fn score_matches_finite_differences_of_energy() {
        use rand::Rng;
        let mut p = test_params(9);
        // Non-trivial gains so the network term participates.
        let gains = p.layout.gains();
        p.data[gains.offset] = 0.37;
        p.data[gains.offset + 1] = 0.81;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = 1e-6;
        let labels = [ClassLabel::A, ClassLabel::B, ClassLabel::Null];
        for _ in 0..200 {
            let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let sigma = (rng.gen_range(-2.0..1.0) as f64).exp();
            let label = labels[rng.gen_range(0..3)];
            let input = NetInput { x, sigma, label };
            let s = model_score(&p, input, Head::Final).unwrap();
            for axis in 0..2 {
                let mut xp = x;
                xp[axis] += h;
                let ep = energy(&p, NetInput { x: xp, sigma, label }, Head::Final).unwrap();
                let mut xm = x;
                xm[axis] -= h;
                let em = energy(&p, NetInput { x: xm, sigma, label }, Head::Final).unwrap();
                let fd = (ep - em) / (2.0 * h);
                assert!(
                    (s[axis] - fd).abs() / fd.abs().max(1.0) < 1e-7,
                    "axis {axis}: {} vs {fd}",
                    s[axis]
                );
            }
        }
    }

    #[test]
    fn head_weight_isolation() {
        let p0 = test_params(11);
        let input = NetInput { x: [0.6, 0.1], sigma: 0.3, label: ClassLabel::A };
        let e0 = energy(&p0, input, Head::Intermediate).unwrap();
        let f0 = features(&p0, input, Head::Intermediate).unwrap();

        // Perturb the final head weights and g_f.
        let mut p1 = p0.clone();
        let hf = p1.layout.w_head(Head::Final);
        p1.data[hf.offset + 5] += 0.25;
        p1.data[p1.layout.gain(Head::Final).offset] = 0.9;
        let e1 = energy(&p1, input, Head::Intermediate).unwrap();
        assert_eq!(e0.to_bits(), e1.to_bits());

        // Perturb trunk layers 2..4: intermediate features unchanged.
        let mut p2 = p0.clone();
        for l in 1..4 {
            let seg = p2.layout.w_hidden(l);
            p2.data[seg.offset + 17] += 0.5;
        }
        let f2 = features(&p2, input, Head::Intermediate).unwrap();
        assert_eq!(f0, f2);
    }

    #[test]
    fn magnitude_preserved_at_init() {
        let p = test_params(12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for &sigma in &[0.05f64, 0.3, 1.0, 4.0] {
            // Unit-variance inputs: x ~ N(0, (sigma^2 + sigma_data^2) I)
            // makes the preconditioned x* exactly unit-variance per axis.
            let scale = (sigma * sigma + 0.25).sqrt();
            let xs: Vec<[f64; 2]> = (0..256)
                .map(|_| {
                    let z0: f64 = rng.sample(StandardNormal);
                    let z1: f64 = rng.sample(StandardNormal);
                    [scale * z0, scale * z1]
                })
                .collect();
            let mut sums = vec![(0.0f64, 0.0f64, 0usize); 5];
            for x in xs {
                let acts =
                    trunk_activations(&p, NetInput { x, sigma, label: ClassLabel::A }).unwrap();
                for (l, layer) in acts.iter().enumerate() {
                    for v in layer {
                        sums[l].0 += v;
                        sums[l].1 += v * v;
                        sums[l].2 += 1;
                    }
                }
            }
            for (l, (s, s2, n)) in sums.iter().enumerate() {
                let mean = s / *n as f64;
                let std = (s2 / *n as f64 - mean * mean).sqrt();
                assert!(
                    (0.7..=1.4).contains(&std),
                    "sigma {sigma} layer {l}: std {std}"
                );
            }
        }
    }

    #[test]
    fn tape_and_dual_paths_agree() {
        let mut p = test_params(14);
        let gains = p.layout.gains();
        p.data[gains.offset] = 0.22;
        p.data[gains.offset + 1] = 0.64;
        for &(x, sigma, label) in &[
            ([0.5, -0.9], 0.21, ClassLabel::A),
            ([1.4, 0.3], 1.7, ClassLabel::Null),
            ([-0.2, 0.05], 0.04, ClassLabel::B),
        ] {
            let mut tape = Tape::new(&p.data);
            let (ei, ef) = energies_on_tape(&mut tape, &p.layout, x, sigma, label).unwrap();
            let pair = energy_pair_dual(
                &p,
                [DualScalar::input(x[0], 0), DualScalar::input(x[1], 1)],
                sigma,
                label,
            )
            .unwrap();
            assert_eq!(tape.scalar_value(ei).to_bits(), pair.intermediate.value.to_bits());
            assert_eq!(tape.scalar_value(ef).to_bits(), pair.final_head.value.to_bits());
            let ti = tape.scalar_tangents(ei);
            let tf = tape.scalar_tangents(ef);
            assert_eq!(ti[0].to_bits(), pair.intermediate.tangents[0].to_bits());
            assert_eq!(ti[1].to_bits(), pair.intermediate.tangents[1].to_bits());
            assert_eq!(tf[0].to_bits(), pair.final_head.tangents[0].to_bits());
            assert_eq!(tf[1].to_bits(), pair.final_head.tangents[1].to_bits());
        }
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.glabckpt");
        let params = test_params(15);
        let mut ema = test_params(16);
        ema.data[3] = 0.123456789;
        save_checkpoint(&path, &params, &ema).unwrap();
        let (p2, e2) = load_checkpoint(&path).unwrap();
        assert_eq!(params.data, p2.data);
        assert_eq!(ema.data, e2.data);
        assert_eq!(params.layout, p2.layout);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.glabckpt");
        let params = test_params(17);
        save_checkpoint(&path, &params, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[10] = b'9';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_rejects_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dim.glabckpt");
        let params = test_params(18);
        save_checkpoint(&path, &params, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Header width field.
        bytes[12] = 63;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
