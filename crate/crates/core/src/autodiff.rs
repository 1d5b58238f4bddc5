//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the tape; node ids are handed out in
//! creation order, so walking the tape backwards is a valid reverse
//! topological order. Matrix products report their multiply-accumulate
//! count to the tape, which is what the FLOPs profiler cross-checks against.

use std::borrow::Borrow;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Separable interpolation weights along one axis: `(lo, hi, w_lo, w_hi)` per output index.
#[derive(Clone, Debug)]
pub(crate) struct AxisPlan<T> {
    taps: Vec<(usize, usize, T, T)>,
}

impl<T: Scalar> AxisPlan<T> {
    /// Half-pixel (corner-unaligned) bilinear weights for resizing `input` samples to `output`.
    pub(crate) fn bilinear(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let taps = (0..output)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(input - 1);
                let hi = (lo + 1).min(input - 1);
                let frac = if hi == lo { 0.0 } else { src - lo as f64 };
                (lo, hi, T::from_f64_lossy(1.0 - frac), T::from_f64_lossy(frac))
            })
            .collect();
        AxisPlan { taps }
    }
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GroupMean(Var, Vec<Vec<usize>>),
    Upsample {
        x: Var,
        grid: (usize, usize),
        rows: AxisPlan<T>,
        cols: AxisPlan<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    macs: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn grad_buf<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: impl Borrow<Var>,
) -> Option<&'a mut Vec<T>> {
    let v = *v.borrow();
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], alpha: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            macs: 0,
        }
    }

    /// Multiply-accumulate operations issued by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input that does not participate in differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf that collects a gradient, but is not tied to a stored parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, true)
    }

    /// Copies a parameter onto the tape; its gradient is routed back by [`Tape::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[2]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = self.matrix_dims(a, "matmul")?;
        let (p2, n) = self.matrix_dims(b, "matmul")?;
        if p != p2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            p,
            n,
            T::one(),
            self.value(a).data(),
            (p, 1),
            self.value(b).data(),
            (n, 1),
            T::zero(),
            &mut out,
            (n, 1),
        );
        self.macs += (m * p * n) as u64;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "add", |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary(a, b, "mul", |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(bias).numel() != cols {
            return Err(Error::shape("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).clone();
        if cols > 0 {
            for row in out.data_mut().chunks_mut(cols) {
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        let rg = self.needs(&[a, bias]);
        Ok(self.push(out, Op::AddRow(a, bias), rg))
    }

    /// `x W + b` for row-major tokens.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_row(y, bias)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let rg = self.needs(&[a]);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |v| if v > T::zero() { v } else { T::zero() })
    }

    /// GELU, tanh approximation (see [`gelu_scalar`]).
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu_scalar)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols();
        if cols > 0 {
            out.data_mut().chunks_mut(cols).for_each(softmax_row);
        }
        let rg = self.needs(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 || self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let rows = self.value(x).rows();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let dt = T::from_usize_lossy(d);
        let mut normalized = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in self.value(x).data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rstd = T::one() / (var + eps).sqrt();
            inv_std.push(rstd);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * rstd;
                normalized.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over `n x D` query/key/value projections.
    ///
    /// Head `h` uses columns `h*D/heads .. (h+1)*D/heads`; head outputs are laid
    /// back into the same columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims(q, "attention")?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("embed dim {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * d];
        {
            let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for h in 0..heads {
                let off = h * dh;
                let p = &mut probs[h * n * n..(h + 1) * n * n];
                // scores = Q_h K_h^T * scale
                T::gemm(n, dh, n, scale, &qd[off..], (d, 1), &kd[off..], (1, d), T::zero(), p, (n, 1));
                p.chunks_mut(n).for_each(softmax_row);
                T::gemm(n, n, dh, T::one(), p, (n, 1), &vd[off..], (d, 1), T::zero(), &mut out[off..], (d, 1));
            }
        }
        self.macs += (2 * n * n * d) as u64;
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    /// Row gather: output row `r` is input row `indices[r]`. Repeats are allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", self.shape(a), &[bad]));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(src.row(i));
        }
        let rg = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(vec![indices.len(), n], out)?,
            Op::GatherRows(a, indices.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let (_, n) = self.matrix_dims(first, "concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = self.needs(parts);
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Input("concat of nothing".into()))?;
        let (m, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// One output row per group: the arithmetic mean of the listed input rows.
    pub fn group_mean(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "group_mean")?;
        let src = self.value(a);
        let mut out = vec![T::zero(); groups.len() * n];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Input(format!("group {g} has no members")));
            }
            let dst = &mut out[g * n..(g + 1) * n];
            for &r in members {
                if r >= m {
                    return Err(Error::shape("group_mean", src.shape(), &[r]));
                }
                for (d, &s) in dst.iter_mut().zip(src.row(r)) {
                    *d += s;
                }
            }
            let count = T::from_usize_lossy(members.len());
            dst.iter_mut().for_each(|v| *v /= count);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(vec![groups.len(), n], out)?,
            Op::GroupMean(a, groups.to_vec()),
            rg,
        ))
    }

    /// Bilinear resize of a `(rows*cols) x C` grid to `(out_rows*out_cols) x C`,
    /// half-pixel centers, edge clamped.
    pub fn upsample_bilinear(
        &mut self,
        x: Var,
        grid: (usize, usize),
        out_grid: (usize, usize),
    ) -> Result<Var> {
        let (m, c) = self.matrix_dims(x, "upsample_bilinear")?;
        if m != grid.0 * grid.1 || grid.0 == 0 || grid.1 == 0 {
            return Err(Error::shape("upsample_bilinear", self.shape(x), &[grid.0, grid.1]));
        }
        let rows = AxisPlan::<T>::bilinear(grid.0, out_grid.0);
        let cols = AxisPlan::<T>::bilinear(grid.1, out_grid.1);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); out_grid.0 * out_grid.1 * c];
        for (oy, &(y0, y1, wy0, wy1)) in rows.taps.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in cols.taps.iter().enumerate() {
                let dst = &mut out[(oy * out_grid.1 + ox) * c..][..c];
                for (yy, wy) in [(y0, wy0), (y1, wy1)] {
                    for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                        let w = wy * wx;
                        if w != T::zero() {
                            axpy(dst, &src[(yy * grid.1 + xx) * c..][..c], w);
                        }
                    }
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![out_grid.0 * out_grid.1, c], out)?,
            Op::Upsample {
                x,
                grid,
                rows,
                cols,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of integer targets under row-wise softmax.
    ///
    /// Rows whose target equals `ignore` are skipped; if every row is skipped the
    /// loss is undefined and [`Error::EmptyLoss`] is returned.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let (n, c) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let mut kept = Vec::with_capacity(n);
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                kept.push(None);
            } else if t >= c {
                return Err(Error::Input(format!("target {t} at row {i} outside 0..{c}")));
            } else {
                kept.push(Some(t));
            }
        }
        let count = kept.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (row, (lrow, t)) in probs
            .chunks_mut(c)
            .zip(self.value(logits).data().chunks(c).zip(&kept))
        {
            softmax_row(row);
            if let Some(t) = *t {
                let max = lrow.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = lrow.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                total += lse - lrow[t];
            }
        }
        let loss = total / T::from_usize_lossy(count);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: kept,
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Clears every gradient on the tape.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Reverse sweep from a scalar `loss`; gradients accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        // Leaves accumulate across sweeps; interior nodes start fresh each time.
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Constant | Op::Param(_)) {
                *grad = None;
            }
        }
        if let Some(g) = grad_buf(&self.nodes, &mut self.grads, loss) {
            g[0] = T::one();
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: &Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, p) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if nodes[a.0].requires_grad {
                    let bv = nodes[b.0].value.data();
                    let ga = grad_buf(nodes, grads, a).unwrap();
                    // dA += dC B^T
                    T::gemm(m, n, p, T::one(), g, (n, 1), bv, (1, n), T::one(), ga, (p, 1));
                }
                if nodes[b.0].requires_grad {
                    let av = nodes[a.0].value.data();
                    let gb = grad_buf(nodes, grads, b).unwrap();
                    // dB += A^T dC
                    T::gemm(p, m, n, T::one(), av, (1, p), g, (n, 1), T::one(), gb, (n, 1));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = grad_buf(nodes, grads, v) {
                        axpy(gv, g, T::one());
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = grad_buf(nodes, grads, a) {
                    axpy(ga, g, T::one());
                }
                let cols = nodes[bias.0].value.numel();
                if let Some(gb) = grad_buf(nodes, grads, bias) {
                    if cols > 0 {
                        for row in g.chunks(cols) {
                            axpy(gb, row, T::one());
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                if let Some(ga) = grad_buf(nodes, grads, a) {
                    for ((d, &gi), &bi) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(gb) = grad_buf(nodes, grads, b) {
                    for ((d, &gi), &ai) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                if let Some(ga) = grad_buf(nodes, grads, a) {
                    axpy(ga, g, s);
                }
            }
            Op::Relu(a) => {
                let x = val(a).data();
                if let Some(ga) = grad_buf(nodes, grads, a) {
                    for ((d, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        if xi > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = val(a).data();
                if let Some(ga) = grad_buf(nodes, grads, a) {
                    for ((d, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *d += gi * gelu_derivative(xi);
                    }
                }
            }
            Op::Softmax(a) => {
                let y = nodes[i].value.data();
                let c = nodes[i].value.cols();
                if let Some(ga) = grad_buf(nodes, grads, a) {
                    for ((dr, gr), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot = gr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum::<T>();
                        for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = nodes[x.0].value.cols();
                let dt = T::from_usize_lossy(d);
                let gv = val(gain).data();
                if let Some(gb) = grad_buf(nodes, grads, bias) {
                    for row in g.chunks(d) {
                        axpy(gb, row, T::one());
                    }
                }
                if let Some(gg) = grad_buf(nodes, grads, gain) {
                    for (row, xh) in g.chunks(d).zip(normalized.chunks(d)) {
                        for ((dst, &gi), &h) in gg.iter_mut().zip(row).zip(xh) {
                            *dst += gi * h;
                        }
                    }
                }
                if let Some(gx) = grad_buf(nodes, grads, x) {
                    let mut gxh = vec![T::zero(); d];
                    for (((dst, row), xh), &rstd) in gx
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(normalized.chunks(d))
                        .zip(inv_std)
                    {
                        for j in 0..d {
                            gxh[j] = row[j] * gv[j];
                        }
                        let mean_g = gxh.iter().copied().sum::<T>() / dt;
                        let mean_gx = gxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dt;
                        for j in 0..d {
                            dst[j] += rstd * (gxh[j] - mean_g - xh[j] * mean_gx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (n, d) = (val(q).shape()[0], val(q).shape()[1]);
                let dh = d / heads;
                let scale = T::one() / T::from_usize_lossy(dh).sqrt();
                let qd = val(q).data();
                let kd = val(k).data();
                let vd = val(v).data();
                let mut gq = vec![T::zero(); n * d];
                let mut gk = vec![T::zero(); n * d];
                let mut gv = vec![T::zero(); n * d];
                let mut dp = vec![T::zero(); n * n];
                for h in 0..*heads {
                    let off = h * dh;
                    let p = &probs[h * n * n..(h + 1) * n * n];
                    // dV_h = P^T dO_h
                    T::gemm(n, n, dh, T::one(), p, (1, n), &g[off..], (d, 1), T::zero(), &mut gv[off..], (d, 1));
                    // dP = dO_h V_h^T
                    T::gemm(n, dh, n, T::one(), &g[off..], (d, 1), &vd[off..], (1, d), T::zero(), &mut dp, (n, 1));
                    // dS = P * (dP - rowsum(dP * P))
                    for (dr, pr) in dp.chunks_mut(n).zip(p.chunks(n)) {
                        let dot = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<T>();
                        for (x, &pi) in dr.iter_mut().zip(pr) {
                            *x = pi * (*x - dot);
                        }
                    }
                    // dQ_h = scale dS K_h ; dK_h = scale dS^T Q_h
                    T::gemm(n, n, dh, scale, &dp, (n, 1), &kd[off..], (d, 1), T::zero(), &mut gq[off..], (d, 1));
                    T::gemm(n, n, dh, scale, &dp, (1, n), &qd[off..], (d, 1), T::zero(), &mut gk[off..], (d, 1));
                }
                for (var, buf) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if let Some(dst) = grad_buf(nodes, grads, var) {
                        axpy(dst, &buf, T::one());
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (val(a).shape()[0], val(a).shape()[1]);
                if let Some(ga) = grad_buf(nodes, grads, a) {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let n = nodes[a.0].value.cols();
                if let Some(ga) = grad_buf(nodes, grads, a) {
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(&mut ga[src * n..(src + 1) * n], &g[r * n..(r + 1) * n], T::one());
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if let Some(gp) = grad_buf(nodes, grads, p) {
                        axpy(gp, &g[offset..offset + len], T::one());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    if let Some(gp) = grad_buf(nodes, grads, p) {
                        for (r, dst) in gp.chunks_mut(w.max(1)).enumerate().take_while(|_| w > 0) {
                            axpy(dst, &g[r * total + col..r * total + col + w], T::one());
                        }
                    }
                    col += w;
                }
            }
            Op::GroupMean(a, groups) => {
                let n = nodes[a.0].value.cols();
                if let Some(ga) = grad_buf(nodes, grads, a) {
                    for (gi, members) in groups.iter().enumerate() {
                        let w = T::one() / T::from_usize_lossy(members.len());
                        for &r in members {
                            axpy(&mut ga[r * n..(r + 1) * n], &g[gi * n..(gi + 1) * n], w);
                        }
                    }
                }
            }
            Op::Upsample {
                x,
                grid,
                rows,
                cols,
            } => {
                let c = nodes[x.0].value.cols();
                let out_cols = cols.taps.len();
                if let Some(gx) = grad_buf(nodes, grads, x) {
                    for (oy, &(y0, y1, wy0, wy1)) in rows.taps.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in cols.taps.iter().enumerate() {
                            let src = &g[(oy * out_cols + ox) * c..][..c];
                            for (yy, wy) in [(y0, wy0), (y1, wy1)] {
                                for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                                    let w = wy * wx;
                                    if w != T::zero() {
                                        axpy(&mut gx[(yy * grid.1 + xx) * c..][..c], src, w);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let c = nodes[logits.0].value.cols();
                let w = g[0] / T::from_usize_lossy(*count);
                if let Some(gl) = grad_buf(nodes, grads, logits) {
                    for ((dst, pr), t) in gl.chunks_mut(c).zip(probs.chunks(c)).zip(targets) {
                        if let Some(t) = *t {
                            axpy(dst, pr, w);
                            dst[t] -= w;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let s = g[0];
                if let Some(ga) = grad_buf(nodes, grads, a) {
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
        }
    }

    /// Moves the gradient of every parameter leaf out of the tape, in tape order.
    pub fn take_param_grads(&mut self) -> Vec<(ParamId, Vec<T>)> {
        let mut out = Vec::new();
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad.take()) {
                out.push((*id, g));
            }
        }
        out
    }

    /// Adds the gradients of every parameter leaf on this tape into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                axpy(&mut store.get_mut(*id).grad, g, T::one());
            }
        }
    }
}
