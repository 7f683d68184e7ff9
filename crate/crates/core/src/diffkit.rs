//! Differentiation engine for the energy model: exact first derivatives of a
//! scalar network output with respect to its 2-D input, and derivatives of
//! quantities built from those input-gradients with respect to all
//! parameters.
//!
//! Strategy: forward mode in the two input coordinates nested inside reverse
//! mode in the parameters. Every recorded value carries three lanes
//! `(value, d/dx0, d/dx1)`; the reverse sweep propagates adjoints for all
//! three lanes, so a loss that consumes an input-gradient (via
//! [`Tape::tangent_row`]) pulls the mixed second derivatives
//! `d^2 f / (d theta d x)` back into the parameter gradient.
//!
//! The primitive set is closed: affine maps against parameter segments,
//! Hadamard multiply, SiLU, square, reduce-sum, and constant scale (plus the
//! structural leaves, concat, add/sub, tangent extraction, and
//! stop-gradient). Anything else simply cannot be recorded, which is what
//! keeps the second-order rules auditable.

use serde::{Deserialize, Serialize};

/// One scalar with its two input-directional derivatives. Plain forward-mode
/// arithmetic, used for inference where no parameter gradient is needed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualScalar {
    pub value: f64,
    pub tangents: [f64; 2],
}

impl DualScalar {
    pub fn constant(value: f64) -> DualScalar {
        DualScalar { value, tangents: [0.0, 0.0] }
    }

    /// Input coordinate `axis` of the 2-D input: unit tangent in its lane.
    pub fn input(value: f64, axis: usize) -> DualScalar {
        let mut tangents = [0.0, 0.0];
        tangents[axis] = 1.0;
        DualScalar { value, tangents }
    }

    pub fn add(self, o: DualScalar) -> DualScalar {
        DualScalar {
            value: self.value + o.value,
            tangents: [self.tangents[0] + o.tangents[0], self.tangents[1] + o.tangents[1]],
        }
    }

    pub fn sub(self, o: DualScalar) -> DualScalar {
        DualScalar {
            value: self.value - o.value,
            tangents: [self.tangents[0] - o.tangents[0], self.tangents[1] - o.tangents[1]],
        }
    }

    pub fn mul(self, o: DualScalar) -> DualScalar {
        DualScalar {
            value: self.value * o.value,
            tangents: [
                self.value * o.tangents[0] + self.tangents[0] * o.value,
                self.value * o.tangents[1] + self.tangents[1] * o.value,
            ],
        }
    }

    pub fn square(self) -> DualScalar {
        DualScalar {
            value: self.value * self.value,
            tangents: [
                2.0 * self.value * self.tangents[0],
                2.0 * self.value * self.tangents[1],
            ],
        }
    }

    pub fn scale(self, c: f64) -> DualScalar {
        DualScalar {
            value: c * self.value,
            tangents: [c * self.tangents[0], c * self.tangents[1]],
        }
    }

    pub fn silu(self) -> DualScalar {
        let (s, ds, _) = silu_derivatives(self.value);
        DualScalar {
            value: s,
            tangents: [ds * self.tangents[0], ds * self.tangents[1]],
        }
    }
}

/// SiLU and its first two derivatives in closed form.
/// s(z) = z sigmoid(z); s' = sig (1 + z (1 - sig)); s'' = sig (1-sig) (2 + z (1 - 2 sig)).
#[inline]
pub fn silu_derivatives(z: f64) -> (f64, f64, f64) {
    let sig = 1.0 / (1.0 + (-z).exp());
    let s = z * sig;
    let ds = sig * (1.0 + z * (1.0 - sig));
    let dds = sig * (1.0 - sig) * (2.0 + z * (1.0 - 2.0 * sig));
    (s, ds, dds)
}

/// Exact gradient of a scalar-valued function with respect to its 2-D input,
/// by forward-mode evaluation with two tangent lanes.
pub fn input_gradient<F>(eval: F, x: [f64; 2]) -> (f64, [f64; 2])
where
    F: FnOnce(DualScalar, DualScalar) -> DualScalar,
{
    let out = eval(DualScalar::input(x[0], 0), DualScalar::input(x[1], 1));
    (out.value, out.tangents)
}

/// A slice of the flat parameter vector: `rows x cols` matrix stored
/// row-major at `offset` (vectors have `cols == 1` semantics via rows*cols).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSeg {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSeg {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    /// 2-D input with identity tangent seeding.
    InputX,
    /// Constant vector, zero tangents. Values live in the arena only.
    Const,
    /// Value lanes read from a parameter segment, zero tangents.
    ParamLeaf { seg: ParamSeg },
    /// y = W u with W a parameter segment.
    Affine { seg: ParamSeg, input: NodeId },
    /// y = u + p with p a parameter vector (class embedding add).
    AddParam { seg: ParamSeg, input: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    /// Hadamard product.
    Mul { a: NodeId, b: NodeId },
    Square { input: NodeId },
    Silu { input: NodeId },
    Scale { input: NodeId, c: f64 },
    /// Reduce-sum to a single element.
    Sum { input: NodeId },
    Concat { a: NodeId, b: NodeId },
    /// Value lane := tangent lane `lane` of the input; own tangents zero.
    TangentRow { input: NodeId, lane: usize },
    /// Identity forward, zero pullback.
    StopGradient {
        #[allow(dead_code)]
        input: NodeId,
    },
}

#[derive(Debug, Clone, Copy)]
struct NodeRec {
    op: Op,
    /// Range of this node's triples in the value arena.
    start: usize,
    len: usize,
}

/// Recorded operation graph over parameter-dependent triple-lane values.
/// Eager: values are computed as operations are pushed. Single-use per
/// recording; [`Tape::clear`] recycles the allocations for the next one.
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<NodeRec>,
    vals: Vec<[f64; 3]>,
    adj: Vec<[f64; 3]>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Tape<'p> {
        Tape { params, nodes: Vec::new(), vals: Vec::new(), adj: Vec::new() }
    }

    /// Drop the recording but keep the allocations, and point the tape at a
    /// (possibly different) parameter vector for the next recording.
    pub fn clear(&mut self, params: &'p [f64]) {
        self.params = params;
        self.nodes.clear();
        self.vals.clear();
    }

    pub fn node_len(&self, id: NodeId) -> usize {
        self.nodes[id.0].len
    }

    /// Value lane of a node.
    pub fn value(&self, id: NodeId) -> Vec<f64> {
        let n = self.nodes[id.0];
        self.vals[n.start..n.start + n.len].iter().map(|t| t[0]).collect()
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].len, 1);
        self.vals[self.nodes[id.0].start][0]
    }

    /// Tangent lanes of a scalar node, i.e. its gradient with respect to
    /// the 2-D input.
    pub fn scalar_tangents(&self, id: NodeId) -> [f64; 2] {
        debug_assert_eq!(self.nodes[id.0].len, 1);
        let t = self.vals[self.nodes[id.0].start];
        [t[1], t[2]]
    }

    fn push(&mut self, op: Op, len: usize) -> NodeId {
        let start = self.vals.len();
        self.vals.resize(start + len, [0.0; 3]);
        self.nodes.push(NodeRec { op, start, len });
        NodeId(self.nodes.len() - 1)
    }

    fn seg_slice(&self, seg: ParamSeg) -> &'p [f64] {
        &self.params[seg.offset..seg.offset + seg.len()]
    }

    pub fn input_x(&mut self, x: [f64; 2]) -> NodeId {
        let id = self.push(Op::InputX, 2);
        let s = self.nodes[id.0].start;
        self.vals[s] = [x[0], 1.0, 0.0];
        self.vals[s + 1] = [x[1], 0.0, 1.0];
        id
    }

    pub fn constant(&mut self, v: &[f64]) -> NodeId {
        let id = self.push(Op::Const, v.len());
        let s = self.nodes[id.0].start;
        for (i, &x) in v.iter().enumerate() {
            self.vals[s + i] = [x, 0.0, 0.0];
        }
        id
    }

    pub fn param_leaf(&mut self, seg: ParamSeg) -> NodeId {
        let id = self.push(Op::ParamLeaf { seg }, seg.len());
        let s = self.nodes[id.0].start;
        let p = self.seg_slice(seg);
        for (i, &x) in p.iter().enumerate() {
            self.vals[s + i] = [x, 0.0, 0.0];
        }
        id
    }

    pub fn affine(&mut self, seg: ParamSeg, input: NodeId) -> NodeId {
        let in_rec = self.nodes[input.0];
        assert_eq!(in_rec.len, seg.cols, "affine shape mismatch");
        let id = self.push(Op::Affine { seg, input }, seg.rows);
        let out_start = self.nodes[id.0].start;
        let w = self.seg_slice(seg);
        for j in 0..seg.rows {
            let row = &w[j * seg.cols..(j + 1) * seg.cols];
            let mut acc = [0.0f64; 3];
            for (k, &wk) in row.iter().enumerate() {
                let u = self.vals[in_rec.start + k];
                acc[0] += wk * u[0];
                acc[1] += wk * u[1];
                acc[2] += wk * u[2];
            }
            self.vals[out_start + j] = acc;
        }
        id
    }

    pub fn add_param(&mut self, seg: ParamSeg, input: NodeId) -> NodeId {
        let in_rec = self.nodes[input.0];
        assert_eq!(in_rec.len, seg.len(), "add_param shape mismatch");
        let id = self.push(Op::AddParam { seg, input }, in_rec.len);
        let out = self.nodes[id.0].start;
        let p = self.seg_slice(seg);
        for i in 0..in_rec.len {
            let u = self.vals[in_rec.start + i];
            self.vals[out + i] = [u[0] + p[i], u[1], u[2]];
        }
        id
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId) -> NodeId {
        let (ra, rb) = (self.nodes[a.0], self.nodes[b.0]);
        assert_eq!(ra.len, rb.len, "elementwise shape mismatch");
        let id = self.push(op, ra.len);
        let out = self.nodes[id.0].start;
        for i in 0..ra.len {
            let x = self.vals[ra.start + i];
            let y = self.vals[rb.start + i];
            self.vals[out + i] = match op {
                Op::Add { .. } => [x[0] + y[0], x[1] + y[1], x[2] + y[2]],
                Op::Sub { .. } => [x[0] - y[0], x[1] - y[1], x[2] - y[2]],
                Op::Mul { .. } => [
                    x[0] * y[0],
                    x[0] * y[1] + x[1] * y[0],
                    x[0] * y[2] + x[2] * y[0],
                ],
                _ => unreachable!(),
            };
        }
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Add { a, b }, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Sub { a, b }, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Mul { a, b }, a, b)
    }

    pub fn square(&mut self, input: NodeId) -> NodeId {
        let rec = self.nodes[input.0];
        let id = self.push(Op::Square { input }, rec.len);
        let out = self.nodes[id.0].start;
        for i in 0..rec.len {
            let u = self.vals[rec.start + i];
            self.vals[out + i] = [u[0] * u[0], 2.0 * u[0] * u[1], 2.0 * u[0] * u[2]];
        }
        id
    }

    pub fn silu(&mut self, input: NodeId) -> NodeId {
        let rec = self.nodes[input.0];
        let id = self.push(Op::Silu { input }, rec.len);
        let out = self.nodes[id.0].start;
        for i in 0..rec.len {
            let u = self.vals[rec.start + i];
            let (s, ds, _) = silu_derivatives(u[0]);
            self.vals[out + i] = [s, ds * u[1], ds * u[2]];
        }
        id
    }

    pub fn scale(&mut self, input: NodeId, c: f64) -> NodeId {
        let rec = self.nodes[input.0];
        let id = self.push(Op::Scale { input, c }, rec.len);
        let out = self.nodes[id.0].start;
        for i in 0..rec.len {
            let u = self.vals[rec.start + i];
            self.vals[out + i] = [c * u[0], c * u[1], c * u[2]];
        }
        id
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let rec = self.nodes[input.0];
        let id = self.push(Op::Sum { input }, 1);
        let out = self.nodes[id.0].start;
        let mut acc = [0.0f64; 3];
        for i in 0..rec.len {
            let u = self.vals[rec.start + i];
            acc[0] += u[0];
            acc[1] += u[1];
            acc[2] += u[2];
        }
        self.vals[out] = acc;
        id
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, rb) = (self.nodes[a.0], self.nodes[b.0]);
        let id = self.push(Op::Concat { a, b }, ra.len + rb.len);
        let out = self.nodes[id.0].start;
        for i in 0..ra.len {
            self.vals[out + i] = self.vals[ra.start + i];
        }
        for i in 0..rb.len {
            self.vals[out + ra.len + i] = self.vals[rb.start + i];
        }
        id
    }

    /// Extract tangent lane `lane` of a node as a plain value vector. The
    /// result is what makes input-gradients first-class loss ingredients.
    pub fn tangent_row(&mut self, input: NodeId, lane: usize) -> NodeId {
        assert!(lane < 2);
        let rec = self.nodes[input.0];
        let id = self.push(Op::TangentRow { input, lane }, rec.len);
        let out = self.nodes[id.0].start;
        for i in 0..rec.len {
            self.vals[out + i] = [self.vals[rec.start + i][1 + lane], 0.0, 0.0];
        }
        id
    }

    /// Value passes through unchanged; the reverse sweep treats the input as
    /// a constant (zero pullback).
    pub fn stop_gradient(&mut self, input: NodeId) -> NodeId {
        let rec = self.nodes[input.0];
        let id = self.push(Op::StopGradient { input }, rec.len);
        let out = self.nodes[id.0].start;
        for i in 0..rec.len {
            self.vals[out + i] = self.vals[rec.start + i];
        }
        id
    }

    /// Reverse sweep from a scalar root. Accumulates `seed * d root / d theta`
    /// into `grad`, which must have the full parameter vector length.
    /// Each node is visited exactly once in reverse recording order.
    pub fn backward_into(&mut self, root: NodeId, seed: f64, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer length");
        assert_eq!(self.nodes[root.0].len, 1, "backward root must be scalar");
        self.adj.clear();
        self.adj.resize(self.vals.len(), [0.0; 3]);
        self.adj[self.nodes[root.0].start][0] = seed;

        for idx in (0..=root.0).rev() {
            let rec = self.nodes[idx];
            match rec.op {
                Op::InputX | Op::Const => {}
                Op::ParamLeaf { seg } => {
                    for i in 0..rec.len {
                        grad[seg.offset + i] += self.adj[rec.start + i][0];
                    }
                }
                Op::Affine { seg, input } => {
                    let in_rec = self.nodes[input.0];
                    let w = &self.params[seg.offset..seg.offset + seg.len()];
                    for j in 0..seg.rows {
                        let g = self.adj[rec.start + j];
                        if g == [0.0; 3] {
                            continue;
                        }
                        let row = &w[j * seg.cols..(j + 1) * seg.cols];
                        let grow = &mut grad[seg.offset + j * seg.cols..seg.offset + (j + 1) * seg.cols];
                        for k in 0..seg.cols {
                            let u = self.vals[in_rec.start + k];
                            grow[k] += g[0] * u[0] + g[1] * u[1] + g[2] * u[2];
                            let ua = &mut self.adj[in_rec.start + k];
                            ua[0] += row[k] * g[0];
                            ua[1] += row[k] * g[1];
                            ua[2] += row[k] * g[2];
                        }
                    }
                }
                Op::AddParam { seg, input } => {
                    let in_rec = self.nodes[input.0];
                    for i in 0..rec.len {
                        let g = self.adj[rec.start + i];
                        grad[seg.offset + i] += g[0];
                        let ua = &mut self.adj[in_rec.start + i];
                        ua[0] += g[0];
                        ua[1] += g[1];
                        ua[2] += g[2];
                    }
                }
                Op::Add { a, b } => {
                    let (ra, rb) = (self.nodes[a.0], self.nodes[b.0]);
                    for i in 0..rec.len {
                        let g = self.adj[rec.start + i];
                        for (l, gl) in g.iter().enumerate() {
                            self.adj[ra.start + i][l] += gl;
                            self.adj[rb.start + i][l] += gl;
                        }
                    }
                }
                Op::Sub { a, b } => {
                    let (ra, rb) = (self.nodes[a.0], self.nodes[b.0]);
                    for i in 0..rec.len {
                        let g = self.adj[rec.start + i];
                        for (l, gl) in g.iter().enumerate() {
                            self.adj[ra.start + i][l] += gl;
                            self.adj[rb.start + i][l] -= gl;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (ra, rb) = (self.nodes[a.0], self.nodes[b.0]);
                    for i in 0..rec.len {
                        let g = self.adj[rec.start + i];
                        let x = self.vals[ra.start + i];
                        let y = self.vals[rb.start + i];
                        let xa = &mut self.adj[ra.start + i];
                        xa[0] += g[0] * y[0] + g[1] * y[1] + g[2] * y[2];
                        xa[1] += g[1] * y[0];
                        xa[2] += g[2] * y[0];
                        let ya = &mut self.adj[rb.start + i];
                        ya[0] += g[0] * x[0] + g[1] * x[1] + g[2] * x[2];
                        ya[1] += g[1] * x[0];
                        ya[2] += g[2] * x[0];
                    }
                }
                Op::Square { input } => {
                    let in_rec = self.nodes[input.0];
                    for i in 0..rec.len {
                        let g = self.adj[rec.start + i];
                        let u = self.vals[in_rec.start + i];
                        let ua = &mut self.adj[in_rec.start + i];
                        ua[0] += 2.0 * (g[0] * u[0] + g[1] * u[1] + g[2] * u[2]);
                        ua[1] += 2.0 * g[1] * u[0];
                        ua[2] += 2.0 * g[2] * u[0];
                    }
                }
                Op::Silu { input } => {
                    let in_rec = self.nodes[input.0];
                    for i in 0..rec.len {
                        let g = self.adj[rec.start + i];
                        let u = self.vals[in_rec.start + i];
                        let (_, ds, dds) = silu_derivatives(u[0]);
                        let ua = &mut self.adj[in_rec.start + i];
                        ua[0] += g[0] * ds + dds * (g[1] * u[1] + g[2] * u[2]);
                        ua[1] += g[1] * ds;
                        ua[2] += g[2] * ds;
                    }
                }
                Op::Scale { input, c } => {
                    let in_rec = self.nodes[input.0];
                    for i in 0..rec.len {
                        let g = self.adj[rec.start + i];
                        let ua = &mut self.adj[in_rec.start + i];
                        ua[0] += c * g[0];
                        ua[1] += c * g[1];
                        ua[2] += c * g[2];
                    }
                }
                Op::Sum { input } => {
                    let in_rec = self.nodes[input.0];
                    let g = self.adj[rec.start];
                    for i in 0..in_rec.len {
                        let ua = &mut self.adj[in_rec.start + i];
                        ua[0] += g[0];
                        ua[1] += g[1];
                        ua[2] += g[2];
                    }
                }
                Op::Concat { a, b } => {
                    let (ra, rb) = (self.nodes[a.0], self.nodes[b.0]);
                    for i in 0..ra.len {
                        let g = self.adj[rec.start + i];
                        for (l, gl) in g.iter().enumerate() {
                            self.adj[ra.start + i][l] += gl;
                        }
                    }
                    for i in 0..rb.len {
                        let g = self.adj[rec.start + ra.len + i];
                        for (l, gl) in g.iter().enumerate() {
                            self.adj[rb.start + i][l] += gl;
                        }
                    }
                }
                Op::TangentRow { input, lane } => {
                    let in_rec = self.nodes[input.0];
                    for i in 0..rec.len {
                        // Adjoint of the extracted value flows into the
                        // source's tangent-lane adjoint.
                        self.adj[in_rec.start + i][1 + lane] += self.adj[rec.start + i][0];
                    }
                }
                Op::StopGradient { .. } => {}
            }
        }
    }

    /// Gradient of a scalar node with respect to every parameter.
    pub fn param_gradient(&mut self, root: NodeId) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(root, 1.0, &mut grad);
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_quadratic_form() {
        // f(x) = -1/2 ||x||^2 at (1, 2).
        let (v, g) = input_gradient(
            |x0, x1| x0.square().add(x1.square()).scale(-0.5),
            [1.0, 2.0],
        );
        assert_eq!(v, -2.5);
        assert_eq!(g, [-1.0, -2.0]);
    }

    #[test]
    fn dual_constant_has_zero_gradient() {
        let (v, g) = input_gradient(|_x0, _x1| DualScalar::constant(3.5), [0.3, -0.7]);
        assert_eq!(v, 3.5);
        assert_eq!(g, [0.0, 0.0]);
    }

    #[test]
    fn dual_product_and_chain_rules_on_polynomials() {
        // p(x, y) = (x^2 + y) * (x - 3 y^2); dp/dx = 2x (x-3y^2) + (x^2+y),
        // dp/dy = (x - 3y^2) - 6 y (x^2 + y).
        for &(x, y) in &[(0.7, -1.3), (2.0, 0.5), (-0.1, 0.9)] {
            let (v, g) = input_gradient(
                |x0, x1| {
                    let a = x0.square().add(x1);
                    let b = x0.sub(x1.square().scale(3.0));
                    a.mul(b)
                },
                [x, y],
            );
            let a = x * x + y;
            let b = x - 3.0 * y * y;
            assert!((v - a * b).abs() < 1e-12);
            assert!((g[0] - (2.0 * x * b + a)).abs() < 1e-12);
            assert!((g[1] - (b - 6.0 * y * a)).abs() < 1e-12);
        }
    }

    #[test]
    fn silu_derivatives_match_finite_differences() {
        let h = 1e-6;
        for &z in &[-3.0, -0.5, 0.0, 0.4, 2.5] {
            let (_, ds, dds) = silu_derivatives(z);
            let (sp, _, _) = silu_derivatives(z + h);
            let (sm, _, _) = silu_derivatives(z - h);
            assert!((ds - (sp - sm) / (2.0 * h)).abs() < 1e-8);
            let (_, dsp, _) = silu_derivatives(z + h);
            let (_, dsm, _) = silu_derivatives(z - h);
            assert!((dds - (dsp - dsm) / (2.0 * h)).abs() < 1e-8);
        }
    }

    /// theta scalar; loss = || grad_x(-1/2 ||x||^2 * theta) ||^2 = theta^2 ||x||^2.
    /// At theta = 1, x = (1, 0): dloss/dtheta = 2.
    #[test]
    fn tape_mixed_second_derivative_hand_case() {
        let params = [1.0f64];
        let seg = ParamSeg { offset: 0, rows: 1, cols: 1 };
        let mut tape = Tape::new(&params);
        let x = tape.input_x([1.0, 0.0]);
        let sq = tape.square(x);
        let s = tape.sum(sq);
        let half = tape.scale(s, -0.5);
        let theta = tape.param_leaf(seg);
        let f = tape.mul(half, theta);
        let g0 = tape.tangent_row(f, 0);
        let g1 = tape.tangent_row(f, 1);
        let g = tape.concat(g0, g1);
        let gsq = tape.square(g);
        let loss = tape.sum(gsq);
        assert!((tape.scalar_value(loss) - 1.0).abs() < 1e-15);
        let grad = tape.param_gradient(loss);
        assert!((grad[0] - 2.0).abs() < 1e-12, "grad {grad:?}");
    }

    #[test]
    fn tape_detached_parameter_gets_zero_gradient() {
        let params = [0.7f64, -1.2];
        let seg0 = ParamSeg { offset: 0, rows: 1, cols: 1 };
        let mut tape = Tape::new(&params);
        let p0 = tape.param_leaf(seg0);
        let loss = tape.square(p0);
        let loss = tape.sum(loss);
        let grad = tape.param_gradient(loss);
        assert!((grad[0] - 2.0 * 0.7).abs() < 1e-15);
        assert_eq!(grad[1], 0.0);
    }

    #[test]
    fn stop_gradient_is_identity_forward_and_zero_backward() {
        let params = [0.9f64];
        let seg = ParamSeg { offset: 0, rows: 1, cols: 1 };
        let mut tape = Tape::new(&params);
        let p = tape.param_leaf(seg);
        let sq = tape.square(p);
        let sg = tape.stop_gradient(sq);
        assert_eq!(tape.scalar_value(sg).to_bits(), (0.9f64 * 0.9).to_bits());
        let root = tape.sum(sg);
        let grad = tape.param_gradient(root);
        assert_eq!(grad[0], 0.0);
    }

    #[test]
    fn tape_replay_is_bitwise_deterministic() {
        let params: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let w = ParamSeg { offset: 0, rows: 3, cols: 4 };
        let build = |tape: &mut Tape| {
            let x = tape.input_x([0.4, -0.9]);
            let pad = tape.constant(&[0.25, 1.0]);
            let u = tape.concat(x, pad);
            let h = tape.affine(w, u);
            let h = tape.silu(h);
            let hsq = tape.square(h);
            let s = tape.sum(hsq);
            let g0 = tape.tangent_row(s, 0);
            let g1 = tape.tangent_row(s, 1);
            let g = tape.concat(g0, g1);
            let gsq = tape.square(g);
            tape.sum(gsq)
        };
        let mut t1 = Tape::new(&params);
        let r1 = build(&mut t1);
        let v1 = tape_value_and_grad(&mut t1, r1);
        let mut t2 = Tape::new(&params);
        let r2 = build(&mut t2);
        let v2 = tape_value_and_grad(&mut t2, r2);
        assert_eq!(v1.0.to_bits(), v2.0.to_bits());
        for (a, b) in v1.1.iter().zip(&v2.1) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    fn tape_value_and_grad(tape: &mut Tape, root: NodeId) -> (f64, Vec<f64>) {
        (tape.scalar_value(root), tape.param_gradient(root))
    }

    /// Finite-difference check of the full parameter gradient of a loss that
    /// consumes the input-gradient, on a random two-layer network.
    #[test]
    fn tape_param_gradient_matches_finite_differences() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let w1 = ParamSeg { offset: 0, rows: 5, cols: 4 };
        let w2 = ParamSeg { offset: 20, rows: 1, cols: 5 };
        let total = 25;
        let params: Vec<f64> = (0..total).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = [0.3, -0.8];

        let eval = |p: &[f64]| -> (f64, Vec<f64>) {
            let mut tape = Tape::new(p);
            let xi = tape.input_x(x);
            let pad = tape.constant(&[0.5, 1.0]);
            let u = tape.concat(xi, pad);
            let h1 = tape.affine(w1, u);
            let a1 = tape.silu(h1);
            let out = tape.affine(w2, a1);
            // Loss mixes the value and the input-gradient of the output.
            let g0 = tape.tangent_row(out, 0);
            let g1 = tape.tangent_row(out, 1);
            let g = tape.concat(g0, g1);
            let gsq = tape.square(g);
            let gs = tape.sum(gsq);
            let vsq = tape.square(out);
            let vs = tape.sum(vsq);
            let loss = tape.add(gs, vs);
            (tape.scalar_value(loss), tape.param_gradient(loss))
        };

        let (_, grad) = eval(&params);
        let h = 1e-6;
        for k in 0..total {
            let mut pp = params.clone();
            pp[k] += h;
            let (lp, _) = eval(&pp);
            pp[k] -= 2.0 * h;
            let (lm, _) = eval(&pp);
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(1.0);
            assert!(
                (grad[k] - fd).abs() / denom < 1e-6,
                "param {k}: analytic {} vs fd {fd}",
                grad[k]
            );
        }
    }

    /// Symmetry of mixed second derivatives: d/dtheta [grad_x f . u] computed
    /// by the tape equals the finite difference over theta of the exact
    /// input-gradient.
    #[test]
    fn forward_over_reverse_symmetry() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let w1 = ParamSeg { offset: 0, rows: 6, cols: 4 };
        let w2 = ParamSeg { offset: 24, rows: 1, cols: 6 };
        let total = 30;
        let params: Vec<f64> = (0..total).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = [-0.4, 0.6];
        let u = [0.8, -0.3];

        // Route 1: tape gradient of grad_x f . u.
        let mut tape = Tape::new(&params);
        let xi = tape.input_x(x);
        let pad = tape.constant(&[0.1, 1.0]);
        let inp = tape.concat(xi, pad);
        let h1 = tape.affine(w1, inp);
        let a1 = tape.silu(h1);
        let out = tape.affine(w2, a1);
        let g0 = tape.tangent_row(out, 0);
        let g1 = tape.tangent_row(out, 1);
        let g0u = tape.scale(g0, u[0]);
        let g1u = tape.scale(g1, u[1]);
        let dot = tape.add(g0u, g1u);
        let root = tape.sum(dot);
        let analytic = tape.param_gradient(root);

        // Route 2: finite differences over theta of the forward-mode
        // input-gradient.
        let grad_x = |p: &[f64]| -> [f64; 2] {
            input_gradient(
                |x0, x1| {
                    // Same network, dual-scalar path.
                    let inp = [x0, x1, DualScalar::constant(0.1), DualScalar::constant(1.0)];
                    let mut a1 = [DualScalar::constant(0.0); 6];
                    for j in 0..6 {
                        let mut acc = DualScalar::constant(0.0);
                        for (k, xin) in inp.iter().enumerate() {
                            acc = acc.add(xin.scale(p[j * 4 + k]));
                        }
                        a1[j] = acc.silu();
                    }
                    let mut out = DualScalar::constant(0.0);
                    for (j, a) in a1.iter().enumerate() {
                        out = out.add(a.scale(p[24 + j]));
                    }
                    out
                },
                x,
            )
            .1
        };
        let h = 1e-6;
        for k in 0..total {
            let mut pp = params.to_vec();
            pp[k] += h;
            let gp = grad_x(&pp);
            pp[k] -= 2.0 * h;
            let gm = grad_x(&pp);
            let fd = ((gp[0] - gm[0]) * u[0] + (gp[1] - gm[1]) * u[1]) / (2.0 * h);
            assert!(
                (analytic[k] - fd).abs() < 1e-8 * fd.abs().max(1.0),
                "param {k}: {} vs {fd}",
                analytic[k]
            );
        }
    }
}
