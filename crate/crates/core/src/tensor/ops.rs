//! Differentiable operations recorded on a [`Tape`].
//!
//! Every forward method validates shapes, computes the output eagerly and
//! records just enough state for its backward rule.

use super::tape::{Tape, Var};
use crate::error::{dim_err, Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Gelu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

pub(crate) enum Op {
    Leaf { requires_grad: bool },
    Binary { kind: BinaryKind, a: Var, b: Var },
    Scale { x: Var, s: f64 },
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Reshape { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Softmax { x: Var, axis: usize },
    Pool { x: Var, axis: usize, mode: PoolMode, argmax: Vec<usize> },
    Act { x: Var, kind: Activation },
    GroupNorm { x: Var, scale: Var, shift: Var, axis: usize, groups: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConvChannel { x: Var, kernel: Var, bias: Var, axis: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows { xs: Vec<Var> },
    SliceCols { x: Var, start: usize, end: usize },
    ConcatCols { xs: Vec<Var> },
    Interp { x: Var, idx: Vec<usize>, w: Vec<f64>, k: usize },
    Chamfer { pred: Var, truth: Var, batch: usize, nn_pred: Vec<usize>, nn_truth: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::Binary { a, b, .. } | Op::MatMul { a, b } => vec![*a, *b],
            Op::Scale { x, .. }
            | Op::Transpose { x }
            | Op::Reshape { x }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Softmax { x, .. }
            | Op::Pool { x, .. }
            | Op::Act { x, .. }
            | Op::GatherRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Interp { x, .. } => vec![*x],
            Op::GroupNorm { x, scale, shift, .. } => vec![*x, *scale, *shift],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConvChannel { x, kernel, bias, .. } => vec![*x, *kernel, *bias],
            Op::ConcatRows { xs } | Op::ConcatCols { xs } => xs.clone(),
            Op::Chamfer { pred, truth, .. } => vec![*pred, *truth],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return dim_err(format!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => dim_err(format!("cannot broadcast {a:?} with {b:?}")),
        })
        .collect()
}

/// For each flat output index, the flat index into an input of shape `inp`
/// broadcast to `out`. `None` when no broadcasting happens.
fn broadcast_map(out: &[usize], inp: &[usize]) -> Option<Vec<usize>> {
    if out == inp {
        return None;
    }
    let rank = out.len();
    let mut padded = vec![1; rank - inp.len()];
    padded.extend_from_slice(inp);
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for d in (0..rank).rev() {
            counter[d] += 1;
            cur += strides[d];
            if counter[d] < out[d] {
                break;
            }
            cur -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    Some(map)
}

fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    map.as_ref().map_or(i, |m| m[i])
}

pub(crate) fn gelu(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_first() {
        Some((&r, rest)) => (r, rest.iter().product()),
        None => (1, 1),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Index of the nearest point in `set` (flat xyz triples), lowest index on ties.
fn nearest(p: &[f64], set: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, q) in set.chunks_exact(3).enumerate() {
        let d = sq_dist(p, q);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

impl Tape {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb)?;
        let (ma, mb) = (broadcast_map(&out, &sa), broadcast_map(&out, &sb));
        let (da, db) = (self.value(a), self.value(b));
        let n: usize = out.iter().product();
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Div => |x: f64, y: f64| x / y,
        };
        let data: Vec<f64> = (0..n).map(|i| f(da[at(&ma, i)], db[at(&mb, i)])).collect();
        self.push(out, data, Op::Binary { kind, a, b }, "binary op")
    }

    /// Elementwise sum with broadcasting over size-1 (or missing leading) axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let data = self.value(x).iter().map(|v| v * s).collect();
        self.push(self.shape(x).to_vec(), data, Op::Scale { x, s }, "scale")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.push(vec![m, n], out, Op::MatMul { a, b }, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return dim_err(format!("transpose needs 2-D, got {s:?}"));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose { x }, "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return dim_err(format!("reshape {:?} -> {shape:?}", self.shape(x)));
        }
        let data = self.value(x).to_vec();
        self.push(shape.to_vec(), data, Op::Reshape { x }, "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(vec![], vec![s], Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(vec![], vec![s], Op::Mean { x }, "mean")
    }

    /// Softmax along `axis`, stabilized by subtracting the running max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let d = self.value(x);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| d[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (d[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[idx(j)] /= z;
                }
            }
        }
        self.push(shape, out, Op::Softmax { x, axis }, "softmax")
    }

    /// Reduces `axis` away. Max routes its gradient to the first maximal entry.
    pub fn pool(&mut self, x: Var, axis: usize, mode: PoolMode) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let d = self.value(x);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if mode == PoolMode::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let slot = o * inner + i;
                match mode {
                    PoolMode::Avg => {
                        out[slot] = (0..len).map(|j| d[idx(j)]).sum::<f64>() / len as f64;
                    }
                    PoolMode::Max => {
                        let mut best = 0;
                        for j in 1..len {
                            if d[idx(j)] > d[idx(best)] {
                                best = j;
                            }
                        }
                        out[slot] = d[idx(best)];
                        argmax[slot] = idx(best);
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push(out_shape, out, Op::Pool { x, axis, mode, argmax }, "pool")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Activation::Sigmoid => sigmoid,
            Activation::Gelu => gelu,
            Activation::Relu => |v| v.max(0.0),
        };
        let data = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(self.shape(x).to_vec(), data, Op::Act { x, kind }, "activation")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    /// Group normalization with channels on `axis`: every leading index and
    /// every group of `C / groups` channels (together with all trailing
    /// positions) is normalized separately, then scaled and shifted per
    /// channel.
    pub fn group_norm(&mut self, x: Var, axis: usize, groups: usize, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, c, inner) = split_axis(&shape, axis)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!("{c} channels not divisible into {groups} groups")));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Config("group norm eps must be positive".into()));
        }
        if self.value(scale).len() != c || self.value(shift).len() != c {
            return dim_err("group norm affine parameters must have one entry per channel");
        }
        let per = c / groups;
        let d = self.value(x);
        let (sc, sh) = (self.value(scale), self.value(shift));
        let mut xhat = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; outer * groups];
        let mut out = vec![0.0; d.len()];
        let n = (per * inner) as f64;
        for o in 0..outer {
            for g in 0..groups {
                // members of one group are contiguous in memory
                let start = (o * c + g * per) * inner;
                let seg = &d[start..start + per * inner];
                let mean = seg.iter().sum::<f64>() / n;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[o * groups + g] = inv;
                for (j, v) in seg.iter().enumerate() {
                    let ch = g * per + j / inner;
                    let xh = (v - mean) * inv;
                    xhat[start + j] = xh;
                    out[start + j] = xh * sc[ch] + sh[ch];
                }
            }
        }
        let op = Op::GroupNorm { x, scale, shift, axis, groups, xhat, inv_std };
        self.push(shape, out, op, "group_norm")
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::Dimension("layer norm on scalar".into()))?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return dim_err("layer norm affine parameters must match the last axis");
        }
        let d = self.value(x);
        let (ga, be) = (self.value(gamma), self.value(beta));
        let rows = d.len() / c;
        let mut xhat = vec![0.0; d.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; d.len()];
        for r in 0..rows {
            let seg = &d[r * c..(r + 1) * c];
            let mean = seg.iter().sum::<f64>() / c as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let xh = (seg[j] - mean) * inv;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * ga[j] + be[j];
            }
        }
        self.push(shape, out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, "layer_norm")
    }

    /// 1-D convolution sliding along `axis` with an odd kernel, zero padded
    /// so the output has the input's shape. `bias` holds a single value.
    pub fn conv_channel(&mut self, x: Var, kernel: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, c, inner) = split_axis(&shape, axis)?;
        let lam = self.value(kernel).len();
        if lam.is_multiple_of(2) {
            return Err(Error::Config(format!("channel convolution kernel must be odd, got {lam}")));
        }
        if self.value(bias).len() != 1 {
            return dim_err("channel convolution bias must be a single value");
        }
        let r = (lam - 1) / 2;
        let (d, kv, b) = (self.value(x), self.value(kernel), self.value(bias)[0]);
        let mut out = vec![b; d.len()];
        for o in 0..outer {
            for ch in 0..c {
                for (t, &w) in kv.iter().enumerate() {
                    let src = ch as isize + t as isize - r as isize;
                    if src < 0 || src >= c as isize {
                        continue;
                    }
                    let src = src as usize;
                    for i in 0..inner {
                        out[(o * c + ch) * inner + i] += w * d[(o * c + src) * inner + i];
                    }
                }
            }
        }
        self.push(shape, out, Op::ConvChannel { x, kernel, bias, axis }, "conv_channel")
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = rows_cols(&shape);
        if shape.is_empty() || idx.is_empty() {
            return dim_err("gather_rows needs a non-scalar input and a non-empty index list");
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Argument(format!("row {bad} out of range ({rows} rows)")));
        }
        let d = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&d[i * cols..(i + 1) * cols]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        self.push(out_shape, out, Op::GatherRows { x, idx: idx.to_vec() }, "gather_rows")
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            if s.is_empty() || s[1..] != tail[..] {
                return dim_err(format!("concat_rows trailing shapes differ: {s:?} vs {tail:?}"));
            }
            rows += s[0];
            out.extend_from_slice(self.value(v));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(shape, out, Op::ConcatRows { xs: xs.to_vec() }, "concat_rows")
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start >= end || end > s[1] {
            return dim_err(format!("slice_cols {start}..{end} of {s:?}"));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(x);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + end]);
        }
        self.push(vec![r, end - start], out, Op::SliceCols { x, start, end }, "slice_cols")
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let r = self.shape(*first)[0];
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != r {
                return dim_err("concat_cols needs 2-D inputs with equal row counts");
            }
            total += s[1];
        }
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for &v in xs {
            let c = self.shape(v)[1];
            let d = self.value(v);
            for i in 0..r {
                out[i * total + off..i * total + off + c].copy_from_slice(&d[i * c..(i + 1) * c]);
            }
            off += c;
        }
        self.push(vec![r, total], out, Op::ConcatCols { xs: xs.to_vec() }, "concat_cols")
    }

    /// Row-wise weighted combination: `out[m] = sum_j w[m][j] * x[idx[m][j]]`
    /// with `idx` and `w` given flat, `k` entries per output row.
    pub fn interpolate_rows(&mut self, x: Var, idx: &[usize], w: &[f64], k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || k == 0 || idx.len() != w.len() || !idx.len().is_multiple_of(k) || idx.is_empty() {
            return dim_err("interpolate_rows: inconsistent index/weight tables");
        }
        let (rows, c) = (s[0], s[1]);
        if idx.iter().any(|&i| i >= rows) {
            return Err(Error::Argument("interpolation index out of range".into()));
        }
        let m = idx.len() / k;
        let d = self.value(x);
        let mut out = vec![0.0; m * c];
        for r in 0..m {
            let dst = &mut out[r * c..(r + 1) * c];
            for j in 0..k {
                let (src, wt) = (idx[r * k + j], w[r * k + j]);
                for (o, v) in dst.iter_mut().zip(&d[src * c..(src + 1) * c]) {
                    *o += wt * v;
                }
            }
        }
        let op = Op::Interp { x, idx: idx.to_vec(), w: w.to_vec(), k };
        self.push(vec![m, c], out, op, "interpolate_rows")
    }

    /// Mean over the batch of symmetric l2 Chamfer distances.
    ///
    /// Accepts `[A, 3]` / `[B, 3]` point sets or batched `[P, A, 3]` /
    /// `[P, B, 3]` stacks compared pairwise.
    pub fn chamfer(&mut self, pred: Var, truth: Var) -> Result<Var> {
        let (sp, st) = (self.shape(pred).to_vec(), self.shape(truth).to_vec());
        let (batch, a, b) = match (sp.as_slice(), st.as_slice()) {
            ([a, 3], [b, 3]) => (1, *a, *b),
            ([p, a, 3], [q, b, 3]) if p == q => (*p, *a, *b),
            _ => return dim_err(format!("chamfer needs matching point stacks, got {sp:?} and {st:?}")),
        };
        let (dp, dt) = (self.value(pred), self.value(truth));
        let mut nn_pred = Vec::with_capacity(batch * a);
        let mut nn_truth = Vec::with_capacity(batch * b);
        let mut total = 0.0;
        for p in 0..batch {
            let ps = &dp[p * a * 3..(p + 1) * a * 3];
            let ts = &dt[p * b * 3..(p + 1) * b * 3];
            let mut fwd = 0.0;
            for q in ps.chunks_exact(3) {
                let (j, d) = nearest(q, ts);
                nn_pred.push(j);
                fwd += d;
            }
            let mut bwd = 0.0;
            for q in ts.chunks_exact(3) {
                let (j, d) = nearest(q, ps);
                nn_truth.push(j);
                bwd += d;
            }
            total += fwd / a as f64 + bwd / b as f64;
        }
        let op = Op::Chamfer { pred, truth, batch, nn_pred, nn_truth };
        self.push(vec![], vec![total / batch as f64], op, "chamfer")
    }

    /// Mean cross-entropy of `[N, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return dim_err(format!("cross_entropy logits {s:?} vs {} labels", labels.len()));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Config(format!("label {bad} out of range for {k} classes")));
        }
        let d = self.value(logits);
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &d[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - mx).exp() / z;
            }
            loss += z.ln() + mx - row[labels[r]];
        }
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push(vec![], vec![loss / n as f64], op, "cross_entropy")
    }

    pub(crate) fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        let len = |v: &Var| self.nodes[v.0].data.len();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Binary { kind, a, b } => {
                let out = &node.shape;
                let (ma, mb) = (broadcast_map(out, self.shape(*a)), broadcast_map(out, self.shape(*b)));
                let (da, db) = (self.value(*a), self.value(*b));
                if needs(a) {
                    let ga = Tape::accumulate(grads, *a, len(a));
                    for (i, gi) in g.iter().enumerate() {
                        let (ia, ib) = (at(&ma, i), at(&mb, i));
                        ga[ia] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => *gi,
                            BinaryKind::Mul => gi * db[ib],
                            BinaryKind::Div => gi / db[ib],
                        };
                    }
                }
                if needs(b) {
                    let gb = Tape::accumulate(grads, *b, len(b));
                    for (i, gi) in g.iter().enumerate() {
                        let (ia, ib) = (at(&ma, i), at(&mb, i));
                        gb[ib] += match kind {
                            BinaryKind::Add => *gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * da[ia],
                            BinaryKind::Div => -gi * da[ia] / (db[ib] * db[ib]),
                        };
                    }
                }
            }
            Op::Scale { x, s } => {
                let gx = Tape::accumulate(grads, *x, len(x));
                for (o, gi) in gx.iter_mut().zip(g) {
                    *o += gi * s;
                }
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.value(*a), self.value(*b));
                if needs(a) {
                    let ga = Tape::accumulate(grads, *a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if needs(b) {
                    let gb = Tape::accumulate(grads, *b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = da[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let gx = Tape::accumulate(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape { x } => {
                let gx = Tape::accumulate(grads, *x, len(x));
                for (o, gi) in gx.iter_mut().zip(g) {
                    *o += gi;
                }
            }
            Op::Sum { x } => {
                let gx = Tape::accumulate(grads, *x, len(x));
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }
            Op::Mean { x } => {
                let n = len(x);
                let gx = Tape::accumulate(grads, *x, n);
                for o in gx.iter_mut() {
                    *o += g[0] / n as f64;
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, l, inner) = split_axis(&node.shape, *axis).expect("validated in forward");
                let y = &node.data;
                let gx = Tape::accumulate(grads, *x, y.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * l + j) * inner + i;
                        let dot: f64 = (0..l).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..l {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
            Op::Pool { x, axis, mode, argmax } => {
                let xs = self.shape(*x).to_vec();
                let (outer, l, inner) = split_axis(&xs, *axis).expect("validated in forward");
                let gx = Tape::accumulate(grads, *x, outer * l * inner);
                match mode {
                    PoolMode::Max => {
                        for (slot, &src) in argmax.iter().enumerate() {
                            gx[src] += g[slot];
                        }
                    }
                    PoolMode::Avg => {
                        for o in 0..outer {
                            for i in 0..inner {
                                let gv = g[o * inner + i] / l as f64;
                                for j in 0..l {
                                    gx[(o * l + j) * inner + i] += gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Act { x, kind } => {
                let xd = self.value(*x);
                let y = &node.data;
                let gx = Tape::accumulate(grads, *x, xd.len());
                for i in 0..xd.len() {
                    let d = match kind {
                        Activation::Sigmoid => y[i] * (1.0 - y[i]),
                        Activation::Gelu => gelu_grad(xd[i]),
                        Activation::Relu => {
                            if xd[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    gx[i] += g[i] * d;
                }
            }
            Op::GroupNorm { x, scale, shift, axis, groups, xhat, inv_std } => {
                let (outer, c, inner) = split_axis(&node.shape, *axis).expect("validated in forward");
                let per = c / groups;
                let sc = self.value(*scale);
                if needs(scale) {
                    let gs = Tape::accumulate(grads, *scale, c);
                    for (i, (gi, xh)) in g.iter().zip(xhat).enumerate() {
                        gs[(i / inner) % c] += gi * xh;
                    }
                }
                if needs(shift) {
                    let gb = Tape::accumulate(grads, *shift, c);
                    for (i, gi) in g.iter().enumerate() {
                        gb[(i / inner) % c] += gi;
                    }
                }
                if needs(x) {
                    let gx = Tape::accumulate(grads, *x, g.len());
                    let n = (per * inner) as f64;
                    for o in 0..outer {
                        for grp in 0..*groups {
                            let start = (o * c + grp * per) * inner;
                            let seg = start..start + per * inner;
                            let gxh: Vec<f64> = seg.clone().map(|i| g[i] * sc[(i / inner) % c]).collect();
                            let s1: f64 = gxh.iter().sum();
                            let s2: f64 = gxh.iter().zip(&xhat[seg.clone()]).map(|(a, b)| a * b).sum();
                            let inv = inv_std[o * groups + grp];
                            for (j, i) in seg.enumerate() {
                                gx[i] += inv / n * (n * gxh[j] - s1 - xhat[i] * s2);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let c = *node.shape.last().expect("validated in forward");
                let ga = self.value(*gamma);
                if needs(gamma) {
                    let gg = Tape::accumulate(grads, *gamma, c);
                    for (i, (gi, xh)) in g.iter().zip(xhat).enumerate() {
                        gg[i % c] += gi * xh;
                    }
                }
                if needs(beta) {
                    let gb = Tape::accumulate(grads, *beta, c);
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % c] += gi;
                    }
                }
                if needs(x) {
                    let gx = Tape::accumulate(grads, *x, g.len());
                    let n = c as f64;
                    for (r, inv) in inv_std.iter().enumerate() {
                        let base = r * c;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let gxh = g[base + j] * ga[j];
                            s1 += gxh;
                            s2 += gxh * xhat[base + j];
                        }
                        for j in 0..c {
                            let gxh = g[base + j] * ga[j];
                            gx[base + j] += inv / n * (n * gxh - s1 - xhat[base + j] * s2);
                        }
                    }
                }
            }
            Op::ConvChannel { x, kernel, bias, axis } => {
                let (outer, c, inner) = split_axis(&node.shape, *axis).expect("validated in forward");
                let (xd, kv) = (self.value(*x), self.value(*kernel));
                let r = (kv.len() - 1) / 2;
                let taps = |ch: usize, t: usize| {
                    let src = ch as isize + t as isize - r as isize;
                    (src >= 0 && src < c as isize).then_some(src as usize)
                };
                if needs(bias) {
                    let gb = Tape::accumulate(grads, *bias, 1);
                    gb[0] += g.iter().sum::<f64>();
                }
                if needs(kernel) {
                    let gk = Tape::accumulate(grads, *kernel, kv.len());
                    for o in 0..outer {
                        for ch in 0..c {
                            for (t, gkt) in gk.iter_mut().enumerate() {
                                if let Some(src) = taps(ch, t) {
                                    for i in 0..inner {
                                        *gkt += g[(o * c + ch) * inner + i] * xd[(o * c + src) * inner + i];
                                    }
                                }
                            }
                        }
                    }
                }
                if needs(x) {
                    let gx = Tape::accumulate(grads, *x, xd.len());
                    for o in 0..outer {
                        for ch in 0..c {
                            for (t, w) in kv.iter().enumerate() {
                                if let Some(src) = taps(ch, t) {
                                    for i in 0..inner {
                                        gx[(o * c + src) * inner + i] += w * g[(o * c + ch) * inner + i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let cols = rows_cols(self.shape(*x)).1;
                let gx = Tape::accumulate(grads, *x, len(x));
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..cols {
                        gx[src * cols + j] += g[r * cols + j];
                    }
                }
            }
            Op::ConcatRows { xs } => {
                let mut off = 0;
                for v in xs {
                    let n = len(v);
                    if needs(v) {
                        let gv = Tape::accumulate(grads, *v, n);
                        for (o, gi) in gv.iter_mut().zip(&g[off..off + n]) {
                            *o += gi;
                        }
                    }
                    off += n;
                }
            }
            Op::SliceCols { x, start, end } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = end - start;
                let gx = Tape::accumulate(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..w {
                        gx[i * c + start + j] += g[i * w + j];
                    }
                }
            }
            Op::ConcatCols { xs } => {
                let (r, total) = (node.shape[0], node.shape[1]);
                let mut off = 0;
                for v in xs {
                    let c = self.shape(*v)[1];
                    if needs(v) {
                        let gv = Tape::accumulate(grads, *v, r * c);
                        for i in 0..r {
                            for j in 0..c {
                                gv[i * c + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::Interp { x, idx, w, k } => {
                let c = self.shape(*x)[1];
                let gx = Tape::accumulate(grads, *x, len(x));
                for r in 0..idx.len() / k {
                    for j in 0..*k {
                        let (src, wt) = (idx[r * k + j], w[r * k + j]);
                        for t in 0..c {
                            gx[src * c + t] += wt * g[r * c + t];
                        }
                    }
                }
            }
            Op::Chamfer { pred, truth, batch, nn_pred, nn_truth } => {
                let (dp, dt) = (self.value(*pred), self.value(*truth));
                let a = dp.len() / 3 / batch;
                let b = dt.len() / 3 / batch;
                let scale = g[0] / *batch as f64;
                let mut gp = vec![0.0; dp.len()];
                let mut gt = vec![0.0; dt.len()];
                for p in 0..*batch {
                    for i in 0..a {
                        let pi = p * a + i;
                        let ti = p * b + nn_pred[pi];
                        for d in 0..3 {
                            let diff = 2.0 * (dp[pi * 3 + d] - dt[ti * 3 + d]) * scale / a as f64;
                            gp[pi * 3 + d] += diff;
                            gt[ti * 3 + d] -= diff;
                        }
                    }
                    for j in 0..b {
                        let ti = p * b + j;
                        let pi = p * a + nn_truth[ti];
                        for d in 0..3 {
                            let diff = 2.0 * (dt[ti * 3 + d] - dp[pi * 3 + d]) * scale / b as f64;
                            gt[ti * 3 + d] += diff;
                            gp[pi * 3 + d] -= diff;
                        }
                    }
                }
                for (v, gv) in [(pred, gp), (truth, gt)] {
                    if needs(v) {
                        let acc = Tape::accumulate(grads, *v, gv.len());
                        for (o, x) in acc.iter_mut().zip(gv) {
                            *o += x;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let gl = Tape::accumulate(grads, *logits, probs.len());
                for r in 0..n {
                    for j in 0..k {
                        let target = if j == labels[r] { 1.0 } else { 0.0 };
                        gl[r * k + j] += g[0] * (probs[r * k + j] - target) / n as f64;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let p = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(p), &[1.0, 0.0, 0.0, 1.0]);
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let out = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.shape(out), &[2, 1]);
        assert_eq!(tape.value(out), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(z, 0).unwrap();
        for v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(t(&[3], &[1000.0, 0.0, 0.0]));
        let s = tape.softmax(big, 0).unwrap();
        let v = tape.value(s);
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300 + 1e-12);
        assert!(tape.softmax(big, 1).is_err());
    }

    #[test]
    fn pool_basics() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let a = tape.pool(x, 0, PoolMode::Avg).unwrap();
        let m = tape.pool(x, 0, PoolMode::Max).unwrap();
        assert_eq!(tape.value(a), &[2.0]);
        assert_eq!(tape.value(m), &[3.0]);
        let one = tape.constant(t(&[1, 2], &[5.0, -1.0]));
        let a = tape.pool(one, 0, PoolMode::Avg).unwrap();
        let m = tape.pool(one, 0, PoolMode::Max).unwrap();
        assert_eq!(tape.value(a), &[5.0, -1.0]);
        assert_eq!(tape.value(m), &[5.0, -1.0]);
    }

    #[test]
    fn max_pool_tie_goes_to_lowest_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4], &[1.0, 3.0, 3.0, 0.0]).with_requires_grad(true));
        let m = tape.pool(x, 0, PoolMode::Max).unwrap();
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn activations_at_known_points() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, -1.0, 2.0]));
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s)[0], 0.5);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
        let big = tape.constant(t(&[2], &[-800.0, 800.0]));
        let s = tape.sigmoid(big).unwrap();
        assert!(tape.value(s)[0] >= 0.0 && tape.value(s)[1] <= 1.0);
    }

    #[test]
    fn group_norm_constant_input_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[4, 3], 2.5));
        let sc = tape.constant(Tensor::full(&[4], 1.0));
        let sh = tape.constant(Tensor::zeros(&[4]));
        let y = tape.group_norm(x, 0, 2, sc, sh, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
        assert!(matches!(tape.group_norm(x, 0, 3, sc, sh, 1e-5), Err(Error::Config(_))));
    }

    #[test]
    fn group_norm_paper_groups_shape() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..64 * 5).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let x = tape.constant(t(&[64, 5], &data));
        let sc = tape.constant(Tensor::full(&[64], 1.0));
        let sh = tape.constant(Tensor::zeros(&[64]));
        let y = tape.group_norm(x, 0, 32, sc, sh, 1e-5).unwrap();
        assert_eq!(tape.shape(y), &[64, 5]);
        let v = tape.value(y);
        for g in 0..32 {
            let seg = &v[g * 10..(g + 1) * 10];
            let mean = seg.iter().sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn conv_channel_identity_zero_and_length() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[5, 1], &[1.0, -2.0, 3.0, 0.5, 4.0]));
        let k = tape.constant(t(&[3], &[0.0, 1.0, 0.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv_channel(x, k, b, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let kz = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv_channel(x, kz, b, 0).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
        let x96 = tape.constant(Tensor::full(&[96, 1], 1.0));
        let k5 = tape.constant(Tensor::full(&[5], 0.2));
        let y = tape.conv_channel(x96, k5, b, 0).unwrap();
        assert_eq!(tape.shape(y), &[96, 1]);
        // zero padding at the edges
        assert!((tape.value(y)[0] - 0.6).abs() < 1e-15);
        assert!((tape.value(y)[50] - 1.0).abs() < 1e-15);
        let even = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(tape.conv_channel(x, even, b, 0), Err(Error::Config(_))));
    }

    #[test]
    fn backward_simple_sums() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, -2.0, 0.5]).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[2.0, -4.0, 1.0]);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn broadcasting_bias_and_gate() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t(&[3], &[10.0, 20.0, 30.0]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let col = tape.constant(t(&[2, 1], &[2.0, 3.0]));
        let y = tape.mul(x, col).unwrap();
        assert_eq!(tape.value(y), &[2.0, 4.0, 6.0, 12.0, 15.0, 18.0]);
        let bad = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn chamfer_hand_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let b = tape.constant(t(&[1, 3], &[1.0, 0.0, 0.0]));
        let c = tape.chamfer(a, b).unwrap();
        assert_eq!(tape.scalar_value(c), 2.0);
        let two = tape.constant(t(&[2, 3], &[0.0, 0.0, 0.0, 2.0, 0.0, 0.0]));
        let c = tape.chamfer(two, b).unwrap();
        assert_eq!(tape.scalar_value(c), 2.0);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[2, 4]));
        let ce = tape.cross_entropy(l, &[0, 3]).unwrap();
        assert!((tape.scalar_value(ce) - 4f64.ln()).abs() < 1e-14);
        assert!(tape.cross_entropy(l, &[0, 4]).is_err());
    }

    #[test]
    fn forward_values_untouched_by_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[0.3, -0.1, 0.7, 0.2]).with_requires_grad(true));
        let y = tape.matmul(x, x).unwrap();
        let z = tape.softmax(y, 1).unwrap();
        let s = tape.sum(z).unwrap();
        let before = tape.value(z).to_vec();
        tape.backward(s).unwrap();
        assert_eq!(tape.value(z), &before[..]);
    }
}
