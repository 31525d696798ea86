//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes hold their
//! forward value plus whatever the backward rule needs; [`Graph::backward`]
//! walks the tape in reverse and returns cotangents for every node that
//! depends on a parameter.

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_into, row_moments, softmax_row, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    Mean(Var),
    Sum(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    EntityScatter {
        x: Var,
        rows: Rc<[Option<usize>]>,
        entities: usize,
    },
    Pinball {
        pred: Var,
        target: Rc<[f64]>,
        valid: Rc<[bool]>,
        quantiles: Rc<[f64]>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Norms below this are treated as this value when normalizing rows.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf bound to a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
            Ok(())
        } else {
            Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b).data();
        let n = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % n]))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("shape preserved")
    }

    /// `a + b`, where `b` may be broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("sub", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product, `b` broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Multiplies every element of `x` by the one-element node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape {
                op: "mul_scalar",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let c = self.scalar(s);
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::MulScalar(x, s), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(axes)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Permute(x, axes.to_vec()), rg))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).len();
        if n < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(x).to_vec(),
                rhs: Vec::new(),
            });
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(x, &axes)
    }

    /// Softmax over the last axis. `valid`, when given, covers every element
    /// of `x`; masked entries receive probability 0. A row with every entry
    /// masked is an error.
    pub fn softmax(&mut self, x: Var, valid: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if let Some(m) = valid {
            if m.len() != xv.len() {
                return Err(Error::Shape {
                    op: "softmax mask",
                    lhs: xv.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let mut out = xv.clone();
        for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
            let mask = valid.map(|m| &m[r * d..(r + 1) * d]);
            if !softmax_row(row, mask) {
                return Err(Error::AllMasked { row: r });
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / d;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let (mean, inv) = row_moments(row);
            inv_std.push(inv);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::abs);
        let rg = self.rg(x);
        self.push(out, Op::Abs(x), rg)
    }

    /// Divides each last-axis row by its Euclidean norm (floored at [`NORM_EPS`]).
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut norms = Vec::with_capacity(xv.len() / d);
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            let n = math::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(NORM_EPS);
            norms.push(n);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let rg = self.rg(x);
        self.push(out, Op::RowNormalize { x, norms }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, len],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let out = Tensor::new(oshape, out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Slice { x, axis, start }, rg))
    }

    /// Entity-aware scatter used by the prototype projection.
    ///
    /// Input `[M, P, C]` holds per-variate weights over `C` prototypes.
    /// `rows[j]` is the entity of variate `j`, or `None` for a padded variate.
    /// Output is `[P, entities * C, M]` with
    /// `out[p, i*C + c, j] = x[j, p, c]` when variate `j` belongs to entity
    /// `i`, else 0, so a single batched product with `[P, M, D]` values sums
    /// each entity's variates without per-entity loops.
    pub fn entity_scatter(
        &mut self,
        x: Var,
        rows: Rc<[Option<usize>]>,
        entities: usize,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != rows.len() || entities == 0 {
            return Err(Error::Shape {
                op: "entity_scatter",
                lhs: shape,
                rhs: vec![rows.len(), entities],
            });
        }
        let (m, p, c) = (shape[0], shape[1], shape[2]);
        if rows.iter().flatten().any(|&e| e >= entities) {
            return Err(Error::Input("entity index out of range".into()));
        }
        let src = self.value(x).data();
        let nc = entities * c;
        let mut out = vec![0.0; p * nc * m];
        for (j, ent) in rows.iter().enumerate() {
            let Some(i) = *ent else { continue };
            for pp in 0..p {
                for cc in 0..c {
                    out[(pp * nc + i * c + cc) * m + j] = src[(j * p + pp) * c + cc];
                }
            }
        }
        let out = Tensor::new(vec![p, nc, m], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::EntityScatter {
                x,
                rows,
                entities,
            },
            rg,
        ))
    }

    /// Mean pinball loss over valid `(variate, step)` cells and all quantiles.
    ///
    /// `pred` is `[M, T, Q]`; `target` and `valid` are `[M, T]`. Invalid cells
    /// are never read.
    pub fn pinball_loss(
        &mut self,
        pred: Var,
        target: Rc<[f64]>,
        valid: Rc<[bool]>,
        quantiles: Rc<[f64]>,
    ) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        let q = quantiles.len();
        if shape.len() != 3 || shape[2] != q || target.len() != shape[0] * shape[1] {
            return Err(Error::Shape {
                op: "pinball_loss",
                lhs: shape,
                rhs: vec![target.len(), q],
            });
        }
        if valid.len() != target.len() {
            return Err(Error::LengthMismatch {
                left: valid.len(),
                right: target.len(),
            });
        }
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::NoValidCells);
        }
        let p = self.value(pred).data();
        let mut acc = 0.0;
        for (cell, (&y, &ok)) in target.iter().zip(valid.iter()).enumerate() {
            if !ok {
                continue;
            }
            for (qi, &level) in quantiles.iter().enumerate() {
                acc += math::pinball(level, y - p[cell * q + qi]);
            }
        }
        let loss = acc / (count * q) as f64;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Pinball {
                pred,
                target,
                valid,
                quantiles,
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            params: self.param_vars.iter().map(|(&p, &v)| (p, v)).collect(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    /// Sums a full-shape gradient down to the broadcast operand's shape.
    fn reduce_broadcast(g: &[f64], target_shape: &[usize]) -> Tensor {
        let n: usize = target_shape.iter().product();
        let mut out = vec![0.0; n];
        for (i, v) in g.iter().enumerate() {
            out[i % n] += v;
        }
        Tensor::new(target_shape.to_vec(), out).expect("valid shape")
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (da, db) = matmul_backward(self.value(*a), self.value(*b), g);
                if self.rg(*a) {
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let mut db = Self::reduce_broadcast(gd, self.shape(*b));
                    if sign < 0.0 {
                        db.data_mut().iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let n = bv.len();
                if self.rg(*a) {
                    let da: Vec<f64> = gd.iter().enumerate().map(|(i, x)| x * bv[i % n]).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da).unwrap());
                }
                if self.rg(*b) {
                    let prod: Vec<f64> = gd.iter().zip(av).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Self::reduce_broadcast(&prod, self.shape(*b)));
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::MulScalar(x, s) => {
                let c = self.scalar(*s);
                if self.rg(*x) {
                    self.accumulate(grads, *x, g.map(|v| v * c));
                }
                if self.rg(*s) {
                    let ds: f64 = gd.iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                    self.accumulate(grads, *s, Tensor::scalar(ds));
                }
            }
            Op::Reshape(x) => {
                let dx = g.clone().reshape(self.shape(*x)).expect("same size");
                self.accumulate(grads, *x, dx);
            }
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                self.accumulate(grads, *x, g.permute(&inv).expect("valid permutation"));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0; gd.len()];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for i in 0..d {
                            let dh = gr[i] * gv[i];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[i];
                        }
                        let n = d as f64;
                        for i in 0..d {
                            let dh = gr[i] * gv[i];
                            dx[r * d + i] = inv / n * (n * dh - sum_dh - hr[i] * sum_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).unwrap());
                }
                if self.rg(*gain) {
                    let mut dg = vec![0.0; d];
                    for (i, (gv, h)) in gd.iter().zip(xhat).enumerate() {
                        dg[i % d] += gv * h;
                    }
                    self.accumulate(grads, *gain, Tensor::new(vec![d], dg).unwrap());
                }
                if self.rg(*bias) {
                    self.accumulate(grads, *bias, Self::reduce_broadcast(gd, &[d]));
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = gd.iter().zip(xv).map(|(g, &v)| g * math::gelu_grad(v)).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(g, &s)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| {
                        if v > 0.0 {
                            *g
                        } else if v < 0.0 {
                            -*g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::RowNormalize { x, norms } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let xv = self.value(*x).data();
                let mut dx = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let s = r * d..(r + 1) * d;
                    let raw = math::sqrt(xv[s.clone()].iter().map(|v| v * v).sum::<f64>());
                    if raw < NORM_EPS {
                        // flat region of the floor: y = x / eps
                        for i in s {
                            dx[i] = gd[i] / n;
                        }
                        continue;
                    }
                    let dot: f64 = s.clone().map(|i| y[i] * gd[i]).sum();
                    for i in s {
                        dx[i] = (gd[i] - y[i] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let dx = Tensor::full(self.shape(*x), gd[0] / n as f64);
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gd[0]));
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let len = g.shape()[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut dx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(shape.to_vec(), dx).unwrap());
            }
            Op::EntityScatter { x, rows, entities } => {
                let shape = self.shape(*x);
                let (m, p, c) = (shape[0], shape[1], shape[2]);
                let nc = entities * c;
                let mut dx = vec![0.0; m * p * c];
                for (j, ent) in rows.iter().enumerate() {
                    let Some(i) = *ent else { continue };
                    for pp in 0..p {
                        for cc in 0..c {
                            dx[(j * p + pp) * c + cc] = gd[(pp * nc + i * c + cc) * m + j];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape.to_vec(), dx).unwrap());
            }
            Op::Pinball {
                pred,
                target,
                valid,
                quantiles,
                count,
            } => {
                let q = quantiles.len();
                let p = self.value(*pred).data();
                let scale = gd[0] / (*count * q) as f64;
                let mut dx = vec![0.0; p.len()];
                for (cell, (&y, &ok)) in target.iter().zip(valid.iter()).enumerate() {
                    if !ok {
                        continue;
                    }
                    for (qi, &level) in quantiles.iter().enumerate() {
                        let e = y - p[cell * q + qi];
                        // d/dpred of max(q e, (q-1) e)
                        dx[cell * q + qi] = if e > 0.0 { -level } else { 1.0 - level } * scale;
                    }
                }
                let shape = self.shape(*pred).to_vec();
                self.accumulate(grads, *pred, Tensor::new(shape, dx).unwrap());
            }
        }
    }
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (ra, rb) = (a.rank(), b.rank());
    let (r, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let c = b.shape()[rb - 1];
    let nb = g.len() / (r * c);
    let a_stride = if ra == 2 { 0 } else { r * k };
    let b_stride = if rb == 2 { 0 } else { k * c };
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut bt = vec![0.0; k * c];
    for bi in 0..nb {
        let ao = bi * a_stride;
        let bo = bi * b_stride;
        let go = bi * r * c;
        // da += g * b^T
        for kk in 0..k {
            for j in 0..c {
                bt[j * k + kk] = bd[bo + kk * c + j];
            }
        }
        matmul_into(&gd[go..go + r * c], &bt, &mut da[ao..ao + r * k], r, c, k);
        // db += a^T * g
        for i in 0..r {
            let grow = &gd[go + i * c..go + (i + 1) * c];
            for kk in 0..k {
                let av = ad[ao + i * k + kk];
                let dst = &mut db[bo + kk * c..bo + (kk + 1) * c];
                for (d, gv) in dst.iter_mut().zip(grow) {
                    *d += av * gv;
                }
            }
        }
    }
    (
        Tensor::new(a.shape().to_vec(), da).unwrap(),
        Tensor::new(b.shape().to_vec(), db).unwrap(),
    )
}

/// Cotangents produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Cotangent of a node, if it received one.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter that took part in the graph.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.params
            .iter()
            .filter_map(|&(p, v)| self.get(v).map(|g| (p, g.clone())))
            .collect()
    }
}

/// Outcome of a finite-difference check for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// Relative error used by the gradient check.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    math::abs(analytic - numeric) / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients of the scalar built by `f` with central
/// differences `(f(θ+h) - f(θ-h)) / 2h` for every scalar of every parameter
/// accepted by `include`.
pub fn grad_check<F>(
    store: &mut ParamStore,
    step: f64,
    include: impl Fn(&str) -> bool,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        Ok(g.scalar(out))
    };
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out);
    let mut analytic: BTreeMap<ParamId, Tensor> = grads.param_grads().into_iter().collect();

    let ids: Vec<(ParamId, String)> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    let mut report = GradCheckReport::default();
    for (id, name) in ids {
        if !include(&name) {
            continue;
        }
        let shape = store.value(id).shape().to_vec();
        let a = analytic
            .remove(&id)
            .unwrap_or_else(|| Tensor::zeros(&shape));
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..a.len() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + step;
            let plus = eval(store);
            store.value_mut(id).data_mut()[i] = orig - step;
            let minus = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    name: name.clone(),
                    index: i,
                });
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a.data()[i], numeric);
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a.data()[i];
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
