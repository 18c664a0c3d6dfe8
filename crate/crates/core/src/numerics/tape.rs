//! Reverse-mode automatic differentiation over a fixed primitive set.
//!
//! A [`Tape`] records every primitive in forward order; [`Tape::backward`]
//! replays the records in exact reverse order. Parameters enter the tape with
//! [`Tape::param`] under a caller-chosen key and are the only nodes whose
//! gradients are reported. Constants (data, frozen weights) carry no gradient.

use std::collections::BTreeMap;

use super::tensor::{batched_gemm, gemm, transpose2, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifier of a trainable parameter.
pub type ParamKey = usize;

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MeanSquare(Var),
    Sum(Var),
    Gather {
        src: Var,
        index: Vec<usize>,
    },
    ScaleRows(Var, Var),
    ShiftRows(Var, Var),
    Recip(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients keyed by parameter, one tensor per registered parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamKey, Tensor>,
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor> {
        self.by_param.get(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamKey, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<ParamKey, Tensor> {
        self.by_param
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamKey, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Constant, false)
    }

    /// Registers a trainable parameter. Registering the same key twice is a
    /// contract error.
    pub fn param(&mut self, key: ParamKey, value: Tensor) -> Result<Var> {
        if self.params.contains_key(&key) {
            return Err(Error::Contract(format!("parameter {key} registered twice")));
        }
        let v = self.push_unchecked(value, Op::Param, true);
        self.params.insert(key, v);
        Ok(v)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    /// `a[..., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product of the last two axes: `[B, m, k] · [B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ba, m, k) = ta.as_batched();
        let (bb, k2, n) = tb.as_batched();
        if ta.shape().len() != tb.shape().len() || ta.shape().len() < 2 || ba != bb || k != k2 {
            return Err(self.shape_err("bmm", a, b));
        }
        let data = batched_gemm(ta.data(), tb.data(), ba, m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().expect("rank >= 2") = n;
        self.push("bmm", Tensor::from_parts(shape, data), Op::BatchMatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a` when its
    /// shape is a suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.shape().ends_with(tb.shape()) {
            return Err(self.shape_err("add", a, b));
        }
        let blen = tb.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % blen])
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).scale(c);
        self.push("scale", out, Op::Scale(x, c), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    /// `z · sigmoid(z)`, composed from primitives.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let s = self.sigmoid(x)?;
        self.mul(x, s)
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x));
        self.push("softmax_rows", out, Op::SoftmaxRows(x), &[x])
    }

    /// Layer normalization over the last axis with variance epsilon
    /// [`LAYER_NORM_EPS`], followed by the affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        let rows = tx.rows();
        let mut normed = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                normed[r * d + j] = xh;
                out[r * d + j] = xh * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if len == 0 || start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                left: tx.shape().to_vec(),
                right: vec![start, start + len],
            });
        }
        let mut data = Vec::with_capacity(tx.rows() * len);
        for row in tx.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        self.push(
            "slice_cols",
            Tensor::from_parts(shape, data),
            Op::SliceCols { x, start },
            &[x],
        )
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let lead = self.value(first).shape()[..self.value(first).shape().len() - 1].to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(self.shape_err("concat_cols", first, v));
            }
            total += s[s.len() - 1];
        }
        let rows = self.value(first).rows();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                let t = self.value(v);
                let c = t.cols();
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(
            "concat_cols",
            Tensor::from_parts(shape, data),
            Op::ConcatCols(xs.to_vec()),
            xs,
        )
    }

    /// Mean of squared entries, as a scalar.
    pub fn mean_square(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let v = t.data().iter().map(|a| a * a).sum::<f64>() / t.len() as f64;
        self.push("mean_square", Tensor::scalar(v), Op::MeanSquare(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).sum();
        self.push("sum", Tensor::scalar(v), Op::Sum(x), &[x])
    }

    /// Picks entries of a rank-1 tensor: `out[i] = src[index[i]]`.
    pub fn gather(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(src);
        if t.shape().len() != 1 || index.is_empty() || index.iter().any(|&i| i >= t.len()) {
            return Err(Error::Shape {
                op: "gather",
                left: t.shape().to_vec(),
                right: vec![index.iter().copied().max().unwrap_or(0)],
            });
        }
        let data = index.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::from_parts(vec![index.len()], data);
        self.push(
            "gather",
            out,
            Op::Gather {
                src,
                index: index.to_vec(),
            },
            &[src],
        )
    }

    fn check_row_scalars(&self, op: &'static str, x: Var, s: Var) -> Result<()> {
        if self.value(s).shape() != [self.value(x).rows()] {
            return Err(self.shape_err(op, x, s));
        }
        Ok(())
    }

    /// `out[r, :] = x[r, :] · s[r]` where rows are all leading axes of `x`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_row_scalars("scale_rows", x, s)?;
        let (tx, ts) = (self.value(x), self.value(s));
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * ts.data()[i / c])
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("scale_rows", out, Op::ScaleRows(x, s), &[x, s])
    }

    /// `out[r, :] = x[r, :] + s[r]`.
    pub fn shift_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_row_scalars("shift_rows", x, s)?;
        let (tx, ts) = (self.value(x), self.value(s));
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + ts.data()[i / c])
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("shift_rows", out, Op::ShiftRows(x, s), &[x, s])
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| 1.0 / v);
        self.push("recip", out, Op::Recip(x), &[x])
    }

    /// Reverse pass from a scalar `loss`. Every registered parameter gets a
    /// gradient; parameters that do not reach the loss get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss node is not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            // Parameters keep their gradient for collection below.
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
            }
        }

        let mut by_param = BTreeMap::new();
        for (&key, &var) in &self.params {
            let shape = self.value(var).shape();
            let t = match grads[var.0].take() {
                Some(g) => Tensor::from_parts(shape.to_vec(), g),
                None => Tensor::zeros(shape),
            };
            by_param.insert(key, t);
        }
        Ok(Gradients { by_param })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (rows, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
                if needs(*a) {
                    let bt = transpose2(tb.data(), k, n);
                    self.accumulate(grads, *a, gemm(g, rows, n, &bt, k));
                }
                if needs(*b) {
                    let at = transpose2(ta.data(), rows, k);
                    self.accumulate(grads, *b, gemm(&at, k, rows, g, n));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = ta.as_batched();
                let n = tb.as_batched().2;
                if needs(*a) {
                    let bt = tb.transpose();
                    self.accumulate(grads, *a, batched_gemm(g, bt.data(), batch, m, n, k));
                }
                if needs(*b) {
                    let at = ta.transpose();
                    self.accumulate(grads, *b, batched_gemm(at.data(), g, batch, k, m, n));
                }
            }
            Op::Transpose(x) => {
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec()).transpose();
                self.accumulate(grads, *x, gt.into_data());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                if needs(*b) {
                    let blen = self.value(*b).len();
                    let mut gb = vec![0.0; blen];
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % blen] += gi;
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                if needs(*b) {
                    self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    self.accumulate(grads, *a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect());
                }
                if needs(*b) {
                    self.accumulate(grads, *b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.iter().map(|v| v * c).collect());
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx = g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let d = node.value.cols();
                let tg = self.value(*gain).data();
                if needs(*bias) {
                    let mut gb = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
                if needs(*gain) {
                    let mut gg = vec![0.0; d];
                    for (row, xr) in g.chunks(d).zip(normed.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row[j] * xr[j];
                        }
                    }
                    self.accumulate(grads, *gain, gg);
                }
                if needs(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, ((row, xr), out)) in g
                        .chunks(d)
                        .zip(normed.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let dxh: Vec<f64> = row.iter().zip(tg).map(|(a, b)| a * b).collect();
                        let mean_d = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            out[j] = inv_std[r] * (dxh[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let len = node.value.cols();
                let mut gx = vec![0.0; tx.len()];
                for (row_out, row_g) in gx.chunks_mut(c).zip(g.chunks(len)) {
                    row_out[*start..*start + len].copy_from_slice(row_g);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).cols();
                    if needs(v) {
                        let mut gv = Vec::with_capacity(self.value(v).len());
                        for row in g.chunks(total) {
                            gv.extend_from_slice(&row[offset..offset + c]);
                        }
                        self.accumulate(grads, v, gv);
                    }
                    offset += c;
                }
            }
            Op::MeanSquare(x) => {
                let t = self.value(*x);
                let k = 2.0 * g[0] / t.len() as f64;
                self.accumulate(grads, *x, t.data().iter().map(|v| k * v).collect());
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Gather { src, index } => {
                let mut gs = vec![0.0; self.value(*src).len()];
                for (&i, &gi) in index.iter().zip(g) {
                    gs[i] += gi;
                }
                self.accumulate(grads, *src, gs);
            }
            Op::ScaleRows(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let c = tx.cols();
                if needs(*x) {
                    let gx = g.iter().enumerate().map(|(i, gi)| gi * ts.data()[i / c]).collect();
                    self.accumulate(grads, *x, gx);
                }
                if needs(*s) {
                    let gs = g
                        .chunks(c)
                        .zip(tx.data().chunks(c))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *s, gs);
                }
            }
            Op::ShiftRows(x, s) => {
                let c = self.value(*x).cols();
                self.accumulate(grads, *x, g.to_vec());
                if needs(*s) {
                    self.accumulate(grads, *s, g.chunks(c).map(|r| r.iter().sum()).collect());
                }
            }
            Op::Recip(x) => {
                let y = node.value.data();
                let gx = g.iter().zip(y).map(|(gi, yi)| -gi * yi * yi).collect();
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

/// Variance epsilon used by every layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}
