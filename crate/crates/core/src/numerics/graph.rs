//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends one node to the tape. Nodes only ever reference earlier
//! nodes, so tape order is a topological order and the backward pass is a
//! single reverse sweep.

use std::collections::HashMap;

use crate::error::{CatError, Result};
use crate::numerics::kernels::{self, ConvGeometry};
use crate::numerics::{ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One entry of a row-sparse matrix: output row `out` gains `weight` times input row `input`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseEntry {
    pub out: u32,
    pub input: u32,
    pub weight: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
        cols: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    RepeatRows(Var),
    MeanLast(Var),
    Sum(Var),
    Sparse {
        x: Var,
        entries: Vec<SparseEntry>,
    },
    BceLogits {
        x: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    SmoothL1 {
        x: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        beta: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The computation record of one forward pass.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    track: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            track: true,
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Inference mode: parameters are read without gradient tracking.
    pub fn no_grad(mut self) -> Self {
        self.track = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Leaf for a registered parameter; repeated requests return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let store = self.store.expect("graph was built without a parameter store");
        let mut t = store.get(id).clone();
        t.grad = None;
        t.requires_grad = false;
        let v = self.push(t, Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CatError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_values(a, b, |x, y| x + y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_values(a, b, |x, y| x - y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_values(a, b, |x, y| x * y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `x[..., d] + b[d]`, broadcasting `b` over leading dimensions.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.value(b).numel() != d {
            return Err(CatError::dim("add_row", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            row.iter_mut().zip(&bias).for_each(|(v, b)| *v += b);
        }
        let ng = self.ng(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, c), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.ng(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        let ng = self.ng(&[x]);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.value(x).softmax(axis)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, ng))
    }

    /// Per-row normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(CatError::contract("layer_norm eps must be positive"));
        }
        let d = *self.shape(x).last().unwrap();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(CatError::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let tx = self.value(x);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + bt[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2d()?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// 2-D convolution of a single `C×H×W` image with an `O×C×k×k` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(CatError::dim("conv2d", &xs, &ws));
        }
        if stride == 0 {
            return Err(CatError::contract("conv2d stride must be positive"));
        }
        let geo = ConvGeometry {
            channels: xs[0],
            height: xs[1],
            width: xs[2],
            kernel: ws[2],
            stride,
            pad,
        };
        if xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[2] {
            return Err(CatError::dim("conv2d", &xs, &ws));
        }
        let out_c = ws[0];
        if let Some(b) = b {
            if self.value(b).numel() != out_c {
                return Err(CatError::dim("conv2d bias", &ws, self.shape(b)));
            }
        }
        let (ho, wo) = (geo.out_height(), geo.out_width());
        let cols = kernels::im2col(self.value(x).data(), &geo);
        let mut out = vec![0.0; out_c * ho * wo];
        kernels::gemm(
            out_c,
            geo.patch_len(),
            ho * wo,
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut out,
            0.0,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (o, chunk) in out.chunks_mut(ho * wo).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
        let out = Tensor::new(vec![out_c, ho, wo], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let ng = self.ng(&parents);
        let cols = if ng { cols } else { Vec::new() };
        Ok(self.push(out, Op::Conv2d { x, w, b, geo, cols }, ng))
    }

    /// Columns `start..end` of a rank-2 value.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || start >= end || end > xs[1] {
            return Err(CatError::contract(format!(
                "slice_cols {start}..{end} invalid for shape {xs:?}"
            )));
        }
        let (n, d, w) = (xs[0], xs[1], end - start);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * w);
        for r in 0..n {
            out.extend_from_slice(&src[r * d + start..r * d + end]);
        }
        let out = Tensor::new(vec![n, w], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CatError::contract("concat_cols of nothing"));
        }
        let n = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != n {
                return Err(CatError::dim("concat_cols", self.shape(parts[0]), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![n, total], out)?;
        let ng = self.ng(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stack `n` copies of a vector (any shape, flattened) as rows.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(CatError::contract("repeat_rows needs n >= 1"));
        }
        let src = self.value(x).data().to_vec();
        let d = src.len();
        let out = Tensor::new(vec![n, d], src.repeat(n))?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::RepeatRows(x), ng))
    }

    /// Mean over the last axis; the axis is dropped (rank-1 input gives `[1]`).
    pub fn mean_last(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(d)
            .map(|c| c.iter().sum::<f64>() / d as f64)
            .collect();
        let shape = if s.len() == 1 {
            vec![1]
        } else {
            s[..s.len() - 1].to_vec()
        };
        let out = Tensor::new(shape, out).expect("mean_last shape");
        let ng = self.ng(&[x]);
        self.push(out, Op::MeanLast(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), ng)
    }

    /// Fixed row-sparse product `S·x` for a rank-2 `x`: each entry adds
    /// `weight · x[input, :]` to output row `out`.
    pub fn sparse_rows(&mut self, x: Var, rows: usize, entries: Vec<SparseEntry>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(CatError::contract(format!("sparse_rows expects a matrix, got {xs:?}")));
        }
        let (m, c) = (xs[0], xs[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * c];
        for e in &entries {
            let (o, i) = (e.out as usize, e.input as usize);
            if o >= rows || i >= m {
                return Err(CatError::contract("sparse_rows entry out of range"));
            }
            let dst = &mut out[o * c..(o + 1) * c];
            for (d, v) in dst.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *d += e.weight * v;
            }
        }
        let out = Tensor::new(vec![rows, c], out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Sparse { x, entries }, ng))
    }

    /// `Σ w·BCE(sigmoid(x), t)` computed from logits; returns a scalar.
    pub fn bce_with_logits(&mut self, x: Var, targets: Vec<f64>, weights: Vec<f64>) -> Result<Var> {
        let n = self.value(x).numel();
        if targets.len() != n || weights.len() != n {
            return Err(CatError::dim("bce_with_logits", &[n], &[targets.len(), weights.len()]));
        }
        let total: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(targets.iter().zip(&weights))
            .map(|(&z, (&t, &w))| w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()))
            .sum();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::BceLogits { x, targets, weights }, ng))
    }

    /// `Σ w·smoothL1(x - t)` with transition point `beta`; returns a scalar.
    pub fn smooth_l1(&mut self, x: Var, targets: Vec<f64>, weights: Vec<f64>, beta: f64) -> Result<Var> {
        let n = self.value(x).numel();
        if targets.len() != n || weights.len() != n {
            return Err(CatError::dim("smooth_l1", &[n], &[targets.len(), weights.len()]));
        }
        let total: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(targets.iter().zip(&weights))
            .map(|(&v, (&t, &w))| w * smooth_l1_value(v - t, beta))
            .sum();
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SmoothL1 {
                x,
                targets,
                weights,
                beta,
            },
            ng,
        ))
    }

    /// `x·W + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || *xs.last().unwrap() != ws[0] {
            return Err(CatError::dim("linear", &xs, &ws));
        }
        let flat = if xs.len() == 2 {
            x
        } else {
            let rows = xs[..xs.len() - 1].iter().product();
            self.reshape(x, &[rows, ws[0]])?
        };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_row(y, b)?;
        }
        if xs.len() != 2 {
            let mut shape = xs[..xs.len() - 1].to_vec();
            shape.push(ws[1]);
            y = self.reshape(y, &shape)?;
        }
        Ok(y)
    }

    /// Reverse sweep from a scalar `loss`, seeding `d loss / d loss = 1`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(CatError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter leaf reached by the last backward pass.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g.to_vec())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn backprop_node(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(da) = self.slot(*a, grads) {
                    kernels::gemm(m, n, k, dy, false, tb.data(), true, da, 1.0);
                }
                if let Some(db) = self.slot(*b, grads) {
                    kernels::gemm(k, m, n, ta.data(), true, dy, false, db, 1.0);
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(*a, grads) {
                    axpy(da, dy, 1.0);
                }
                if let Some(db) = self.slot(*b, grads) {
                    axpy(db, dy, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(*a, grads) {
                    axpy(da, dy, 1.0);
                }
                if let Some(db) = self.slot(*b, grads) {
                    axpy(db, dy, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(*a, grads) {
                    for j in 0..dy.len() {
                        da[j] += dy[j] * vb[j];
                    }
                }
                if let Some(db) = self.slot(*b, grads) {
                    for j in 0..dy.len() {
                        db[j] += dy[j] * va[j];
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(dx) = self.slot(*x, grads) {
                    axpy(dx, dy, 1.0);
                }
                let d = self.value(*b).numel();
                if let Some(db) = self.slot(*b, grads) {
                    for row in dy.chunks(d) {
                        axpy(db, row, 1.0);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.slot(*x, grads) {
                    axpy(dx, dy, *c);
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = self.slot(*x, grads) {
                    for j in 0..dy.len() {
                        if y[j] > 0.0 {
                            dx[j] += dy[j];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(dx) = self.slot(*x, grads) {
                    for j in 0..dy.len() {
                        dx[j] += dy[j] * y[j] * (1.0 - y[j]);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(dx) = self.slot(*x, grads) {
                    let (outer, len, inner) = kernels::split_axis(node.value.shape(), *axis);
                    for o in 0..outer {
                        for q in 0..inner {
                            let base = o * len * inner + q;
                            let dot: f64 = (0..len).map(|l| dy[base + l * inner] * y[base + l * inner]).sum();
                            for l in 0..len {
                                let j = base + l * inner;
                                dx[j] += y[j] * (dy[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let g = self.value(*gamma).data().to_vec();
                let d = g.len();
                if let Some(dg) = self.slot(*gamma, grads) {
                    for (row_dy, row_h) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += row_dy[j] * row_h[j];
                        }
                    }
                }
                if let Some(db) = self.slot(*beta, grads) {
                    for row in dy.chunks(d) {
                        axpy(db, row, 1.0);
                    }
                }
                if let Some(dx) = self.slot(*x, grads) {
                    let mut dh = vec![0.0; d];
                    for (r, is) in inv_std.iter().enumerate() {
                        let row_dy = &dy[r * d..(r + 1) * d];
                        let row_h = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = row_dy[j] * g[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(row_h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += is * (dh[j] - mean_dh - row_h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if let Some(dx) = self.slot(*x, grads) {
                    let s = node.value.shape();
                    let t = kernels::transpose(dy, s[0], s[1]);
                    axpy(dx, &t, 1.0);
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(*x, grads) {
                    axpy(dx, dy, 1.0);
                }
            }
            Op::RepeatRows(x) => {
                if let Some(dx) = self.slot(*x, grads) {
                    let d = dx.len();
                    for row in dy.chunks(d) {
                        axpy(dx, row, 1.0);
                    }
                }
            }
            Op::Conv2d { x, w, b, geo, cols } => {
                let out_c = self.value(*w).shape()[0];
                let hw = geo.out_height() * geo.out_width();
                if let Some(b) = b {
                    if let Some(db) = self.slot(*b, grads) {
                        for (o, chunk) in dy.chunks(hw).enumerate() {
                            db[o] += chunk.iter().sum::<f64>();
                        }
                    }
                }
                if let Some(dw) = self.slot(*w, grads) {
                    kernels::gemm(out_c, hw, geo.patch_len(), dy, false, cols, true, dw, 1.0);
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![0.0; geo.patch_len() * hw];
                    kernels::gemm(
                        geo.patch_len(),
                        out_c,
                        hw,
                        self.value(*w).data(),
                        true,
                        dy,
                        false,
                        &mut dcols,
                        0.0,
                    );
                    if let Some(dx) = self.slot(*x, grads) {
                        kernels::col2im(&dcols, geo, dx);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(dx) = self.slot(*x, grads) {
                    let s = node.value.shape();
                    let (n, w) = (s[0], s[1]);
                    let d = self.value(*x).shape()[1];
                    for r in 0..n {
                        axpy(&mut dx[r * d + start..r * d + start + w], &dy[r * w..(r + 1) * w], 1.0);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let s = node.value.shape();
                let (n, total) = (s[0], s[1]);
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    if let Some(dp) = self.slot(*p, grads) {
                        for r in 0..n {
                            axpy(
                                &mut dp[r * w..(r + 1) * w],
                                &dy[r * total + off..r * total + off + w],
                                1.0,
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::MeanLast(x) => {
                if let Some(dx) = self.slot(*x, grads) {
                    let d = dx.len() / dy.len();
                    for (r, g) in dy.iter().enumerate() {
                        dx[r * d..(r + 1) * d].iter_mut().for_each(|v| *v += g / d as f64);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(*x, grads) {
                    dx.iter_mut().for_each(|v| *v += dy[0]);
                }
            }
            Op::Sparse { x, entries } => {
                let c = self.shape(*x)[1];
                if let Some(dx) = self.slot(*x, grads) {
                    for e in entries {
                        let (o, i) = (e.out as usize, e.input as usize);
                        let src = &dy[o * c..(o + 1) * c];
                        for (d, v) in dx[i * c..(i + 1) * c].iter_mut().zip(src) {
                            *d += e.weight * v;
                        }
                    }
                }
            }
            Op::BceLogits { x, targets, weights } => {
                let z = self.value(*x).data();
                if let Some(dx) = self.slot(*x, grads) {
                    for j in 0..z.len() {
                        dx[j] += dy[0] * weights[j] * (kernels::sigmoid(z[j]) - targets[j]);
                    }
                }
            }
            Op::SmoothL1 {
                x,
                targets,
                weights,
                beta,
            } => {
                let v = self.value(*x).data();
                if let Some(dx) = self.slot(*x, grads) {
                    for j in 0..v.len() {
                        let d = v[j] - targets[j];
                        let g = if d.abs() < *beta { d / beta } else { d.signum() };
                        dx[j] += dy[0] * weights[j] * g;
                    }
                }
            }
        }
    }

    /// Gradient accumulator of `v`, allocated on first touch, or `None` if
    /// `v` does not need a gradient.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }
}

pub fn smooth_l1_value(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        0.5 * d * d / beta
    } else {
        d.abs() - 0.5 * beta
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
