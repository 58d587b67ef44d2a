//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value
//! and enough cached state to run its backward rule. Node ids are handed out
//! in creation order, so the tape is always topologically sorted and
//! [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;

use super::params::{GradMap, ParamId, ParamStore};
use super::tensor::{gemm, MatRef};
use super::{MathError, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    StopGrad,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddRow { x: Var, b: Var },
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Minimum(Var, Var),
    Clamp { x: Var, lo: T, hi: T },
    PickCols { x: Var, idx: Vec<usize> },
    NormalizeChannels { x: Var, norms: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    /// One entry per trainable parameter bound into the graph. Parameters
    /// cut off by a stop-gradient node get an all-zero tensor; frozen
    /// parameters are constants in the graph and have no entry.
    pub params: GradMap<T>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to an input created by [`Graph::input`] with
    /// `requires_grad = true`.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }
}

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    param_of: HashMap<Var, ParamId>,
}

const EPS_NORM: f64 = 1e-12;

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> MathError {
    MathError::Shape { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), param_of: HashMap::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var, MathError> {
        if !value.all_finite() {
            return Err(MathError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var, MathError> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// An input leaf; with `requires_grad` its gradient is reported by
    /// [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Result<Var, MathError> {
        self.push("input", t, Op::Leaf, requires_grad)
    }

    /// Binds a parameter into the graph (once per graph). Parameters of frozen
    /// groups enter as constants: they still feed forward values and pass
    /// gradients through to their inputs' producers, but get no gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let needs = !store.is_frozen(id);
        self.nodes.push(Node { value: store.value(id).clone(), op: Op::Leaf, needs_grad: needs });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        self.param_of.insert(v, id);
        v
    }

    /// Forward identity that blocks all gradient flow to `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var, MathError> {
        let value = self.value(x).clone();
        self.push("stop_gradient", value, Op::StopGrad, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, MathError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, &[ta.shape(), tb.shape()]));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(name, out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        self.binary("minimum", a, b, |x, y| if x <= y { x } else { y }, Op::Minimum(a, b))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var, MathError> {
        let out = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(name, out, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, MathError> {
        let c = T::lit(c);
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, MathError> {
        let c = T::lit(c);
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn elu(&mut self, x: Var) -> Result<Var, MathError> {
        self.unary("elu", x, |v| if v > T::zero() { v } else { v.exp() - T::one() }, Op::Elu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, MathError> {
        self.unary("sigmoid", x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, MathError> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, MathError> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, MathError> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, MathError> {
        self.unary("abs", x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, MathError> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, MathError> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        self.unary("clamp", x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    /// `x[N, D] + b[D]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, MathError> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.rank() != 2 || tb.rank() != 1 || tx.dim(1) != tb.dim(0) {
            return Err(shape_err("add_row", &[tx.shape(), tb.shape()]));
        }
        let d = tb.dim(0);
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + tb.data()[i % d]).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(b);
        self.push("add_row", out, Op::AddRow { x, b }, ng)
    }

    /// `a[m, k] * b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0) {
            return Err(shape_err("matmul", &[ta.shape(), tb.shape()]));
        }
        let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
        let mut out = vec![T::zero(); m * n];
        gemm(MatRef::row_major(ta.data(), m, k), MatRef::row_major(tb.data(), k, n), &mut out, T::zero());
        let out = Tensor::new(vec![m, n], out)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", out, Op::MatMul(a, b), ng)
    }

    /// Stride-1 "same" convolution: `x[N, C, H, W]`, `w[O, C, K, K]`, `b[O]`, odd `K`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, MathError> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let ok = tx.rank() == 4
            && tw.rank() == 4
            && tb.rank() == 1
            && tw.dim(1) == tx.dim(1)
            && tw.dim(2) == tw.dim(3)
            && tw.dim(2) % 2 == 1
            && tb.dim(0) == tw.dim(0);
        if !ok {
            return Err(shape_err("conv2d", &[tx.shape(), tw.shape(), tb.shape()]));
        }
        let (n, c, h, wd) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
        let (o, k) = (tw.dim(0), tw.dim(2));
        let pad = k / 2;
        let hw = h * wd;
        let ckk = c * k * k;
        let mut out = vec![T::zero(); n * o * hw];
        let mut col = vec![T::zero(); ckk * hw];
        for s in 0..n {
            im2col(&tx.data()[s * c * hw..(s + 1) * c * hw], c, h, wd, k, pad, &mut col);
            let dst = &mut out[s * o * hw..(s + 1) * o * hw];
            gemm(MatRef::row_major(tw.data(), o, ckk), MatRef::row_major(&col, ckk, hw), dst, T::zero());
            for (oc, chunk) in dst.chunks_mut(hw).enumerate() {
                let bias = tb.data()[oc];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let out = Tensor::new(vec![n, o, h, wd], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push("conv2d", out, Op::Conv2d { x, w, b, pad }, ng)
    }

    /// Group normalization over `x[N, C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var, MathError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tx.rank() < 2 {
            return Err(shape_err("group_norm", &[tx.shape(), tg.shape(), tb.shape()]));
        }
        let (n, c) = (tx.dim(0), tx.dim(1));
        if groups == 0 || c % groups != 0 || tg.shape() != [c] || tb.shape() != [c] {
            return Err(shape_err("group_norm", &[tx.shape(), tg.shape(), tb.shape()]));
        }
        let spatial: usize = tx.shape()[2..].iter().product();
        let per_group = (c / groups) * spatial;
        let eps = T::lit(eps);
        let m = T::lit(per_group as f64);
        let mut xhat = vec![T::zero(); tx.numel()];
        let mut inv_std = vec![T::zero(); n * groups];
        let mut out = vec![T::zero(); tx.numel()];
        for s in 0..n {
            for g in 0..groups {
                let start = (s * c + g * (c / groups)) * spatial;
                let slice = &tx.data()[start..start + per_group];
                let mean = slice.iter().copied().sum::<T>() / m;
                let var = slice.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
                let is = T::one() / (var + eps).sqrt();
                inv_std[s * groups + g] = is;
                for (i, &v) in slice.iter().enumerate() {
                    let xh = (v - mean) * is;
                    let ch = g * (c / groups) + i / spatial;
                    xhat[start + i] = xh;
                    out[start + i] = xh * tg.data()[ch] + tb.data()[ch];
                }
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push("group_norm", out, Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std }, ng)
    }

    /// 2x2 max pooling with stride 2 over `x[N, C, H, W]`; `H` and `W` must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, MathError> {
        let tx = self.value(x);
        if tx.rank() != 4 || !tx.dim(2).is_multiple_of(2) || !tx.dim(3).is_multiple_of(2) {
            return Err(shape_err("max_pool2", &[tx.shape()]));
        }
        let (n, c, h, w) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let d = tx.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let ng = self.ng(x);
        self.push("max_pool2", out, Op::MaxPool2 { x, argmax }, ng)
    }

    /// Bilinear x2 upsampling (half-pixel centers, edge clamped) of `x[N, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var, MathError> {
        let tx = self.value(x);
        if tx.rank() != 4 {
            return Err(shape_err("upsample2", &[tx.shape()]));
        }
        let (n, c, h, w) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
        let (oh, ow) = (2 * h, 2 * w);
        let ys = upsample_taps::<T>(h);
        let xs = upsample_taps::<T>(w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let d = tx.data();
        for plane in 0..n * c {
            let src = &d[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                    dst[oy * ow + ox] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let ng = self.ng(x);
        self.push("upsample2", out, Op::Upsample2(x), ng)
    }

    fn rows_2d(&self, name: &'static str, x: Var) -> Result<(usize, usize), MathError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(shape_err(name, &[t.shape()]));
        }
        Ok((t.dim(0), t.dim(1)))
    }

    /// Row-wise softmax of `x[N, D]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var, MathError> {
        let (n, d) = self.rows_2d("softmax", x)?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(vec![n, d], out)?;
        let ng = self.ng(x);
        self.push("softmax", out, Op::Softmax(x), ng)
    }

    /// Row-wise log-softmax of `x[N, D]`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, MathError> {
        let (n, d) = self.rows_2d("log_softmax", x)?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(vec![n, d], out)?;
        let ng = self.ng(x);
        self.push("log_softmax", out, Op::LogSoftmax(x), ng)
    }

    /// Concatenates 2-D tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, MathError> {
        if parts.is_empty() {
            return Err(MathError::Invalid { op: "concat_cols", msg: "no inputs".into() });
        }
        let rows = self.value(parts[0]).shape().first().copied().unwrap_or(0);
        for p in parts {
            let t = self.value(*p);
            if t.rank() != 2 || t.dim(0) != rows {
                let shapes: Vec<&[usize]> = parts.iter().map(|p| self.shape(*p)).collect();
                return Err(shape_err("concat_cols", &shapes));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).dim(1)).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], out)?;
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push("concat_cols", out, Op::Concat(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, MathError> {
        let out = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        self.push("reshape", out, Op::Reshape(x), ng)
    }

    /// Columns `start..start+len` of `x[N, D]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, MathError> {
        let (n, d) = self.rows_2d("slice_cols", x)?;
        if start + len > d {
            return Err(MathError::Invalid { op: "slice_cols", msg: format!("{start}+{len} > {d}") });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let out = Tensor::new(vec![n, len], out)?;
        let ng = self.ng(x);
        self.push("slice_cols", out, Op::SliceCols { x, start }, ng)
    }

    /// Rows `start..start+len` along the leading axis (any rank).
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, MathError> {
        let t = self.value(x);
        if t.rank() == 0 || start + len > t.dim(0) {
            return Err(MathError::Invalid { op: "slice_rows", msg: format!("{start}+{len} of {:?}", t.shape()) });
        }
        let out = t.slice_leading(start, len);
        let ng = self.ng(x);
        self.push("slice_rows", out, Op::SliceRows { x, start }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, MathError> {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push("sum", out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, MathError> {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / T::lit(t.numel().max(1) as f64));
        let ng = self.ng(x);
        self.push("mean", out, Op::Mean(x), ng)
    }

    /// `out[i] = x[i, idx[i]]` for `x[N, D]`.
    pub fn pick_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var, MathError> {
        let (n, d) = self.rows_2d("pick_cols", x)?;
        if idx.len() != n || idx.iter().any(|&i| i >= d) {
            return Err(MathError::Invalid { op: "pick_cols", msg: format!("{} indices for [{n}, {d}]", idx.len()) });
        }
        let src = self.value(x).data();
        let out: Vec<T> = idx.iter().enumerate().map(|(r, &c)| src[r * d + c]).collect();
        let out = Tensor::new(vec![n], out)?;
        let ng = self.ng(x);
        self.push("pick_cols", out, Op::PickCols { x, idx: idx.to_vec() }, ng)
    }

    /// Scales each channel vector of `x[N, C, ...]` to unit L2 norm.
    pub fn normalize_channels(&mut self, x: Var) -> Result<Var, MathError> {
        let t = self.value(x);
        if t.rank() < 2 {
            return Err(shape_err("normalize_channels", &[t.shape()]));
        }
        let (n, c) = (t.dim(0), t.dim(1));
        let sp: usize = t.shape()[2..].iter().product();
        let d = t.data();
        let eps = T::lit(EPS_NORM);
        let mut norms = vec![T::zero(); n * sp];
        let mut out = vec![T::zero(); t.numel()];
        for s in 0..n {
            for p in 0..sp {
                let ss: T = (0..c).map(|ch| d[(s * c + ch) * sp + p].powi(2)).sum();
                let r = (ss + eps).sqrt();
                norms[s * sp + p] = r;
                for ch in 0..c {
                    let i = (s * c + ch) * sp + p;
                    out[i] = d[i] / r;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let ng = self.ng(x);
        self.push("normalize_channels", out, Op::NormalizeChannels { x, norms }, ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, MathError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(MathError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaves = HashMap::new();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::full(lt.shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    leaves.insert(Var(i), gout);
                }
                Op::StopGrad => {}
                _ => self.backward_node(node, gout, &mut grads)?,
            }
        }
        let mut params = GradMap::new();
        for (&id, &v) in &self.bound {
            if !self.nodes[v.0].needs_grad {
                continue;
            }
            let g = leaves.remove(&v).unwrap_or_else(|| Tensor::zeros(self.shape(v)));
            if !g.all_finite() {
                return Err(MathError::NonFinite { op: "backward" });
            }
            params.insert(id, g);
        }
        for g in leaves.values() {
            if !g.all_finite() {
                return Err(MathError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { params, leaves })
    }

    fn backward_node(&self, node: &Node<T>, gout: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), MathError> {
        let y = &node.value;
        let g = gout.data();
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                if self.ng(*b) {
                    self.accumulate(grads, *b, gout.clone());
                }
                self.accumulate(grads, *a, gout);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    self.accumulate(grads, *b, gout.map(|v| -v));
                }
                self.accumulate(grads, *a, gout);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.accumulate(grads, *a, zip_map(&gout, vb, |g, v| g * v));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, zip_map(&gout, va, |g, v| g * v));
                }
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mask_a: Vec<bool> = va.data().iter().zip(vb.data()).map(|(x, y)| x <= y).collect();
                if self.ng(*a) {
                    let d = g.iter().zip(&mask_a).map(|(&g, &m)| if m { g } else { T::zero() }).collect();
                    self.accumulate(grads, *a, Tensor::new(gout.shape().to_vec(), d)?);
                }
                if self.ng(*b) {
                    let d = g.iter().zip(&mask_a).map(|(&g, &m)| if m { T::zero() } else { g }).collect();
                    self.accumulate(grads, *b, Tensor::new(gout.shape().to_vec(), d)?);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, gout.map(|v| v * c));
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, gout.reshaped(&shape)?);
            }
            Op::AddRow { x, b } => {
                if self.ng(*b) {
                    let d = self.value(*b).dim(0);
                    let mut gb = vec![T::zero(); d];
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % d] += v;
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![d], gb)?);
                }
                if self.ng(*x) {
                    self.accumulate(grads, *x, gout);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.dim(0), ta.dim(1), tb.dim(1));
                let go = MatRef::row_major(g, m, n);
                if self.ng(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(go, MatRef::row_major(tb.data(), k, n).t(), &mut ga, T::zero());
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                }
                if self.ng(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(MatRef::row_major(ta.data(), m, k).t(), go, &mut gb, T::zero());
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::Conv2d { x, w, b, pad } => self.conv2d_backward(*x, *w, *b, *pad, &gout, grads)?,
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                let tx = self.value(*x);
                let (n, c) = (tx.dim(0), tx.dim(1));
                let sp: usize = tx.shape()[2..].iter().product();
                let gamma_v = self.value(*gamma).data();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut gg = vec![T::zero(); c];
                    let mut gbt = vec![T::zero(); c];
                    for (i, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                        let ch = (i / sp) % c;
                        gg[ch] += gv * xh;
                        gbt[ch] += gv;
                    }
                    if self.ng(*gamma) {
                        self.accumulate(grads, *gamma, Tensor::new(vec![c], gg)?);
                    }
                    if self.ng(*beta) {
                        self.accumulate(grads, *beta, Tensor::new(vec![c], gbt)?);
                    }
                }
                if self.ng(*x) {
                    let cg = c / groups;
                    let per = cg * sp;
                    let m = T::lit(per as f64);
                    let mut gx = vec![T::zero(); tx.numel()];
                    for s in 0..n {
                        for grp in 0..*groups {
                            let start = (s * c + grp * cg) * sp;
                            let is = inv_std[s * groups + grp];
                            let mut sum_d = T::zero();
                            let mut sum_dx = T::zero();
                            for i in 0..per {
                                let ch = grp * cg + i / sp;
                                let dxh = g[start + i] * gamma_v[ch];
                                sum_d += dxh;
                                sum_dx += dxh * xhat[start + i];
                            }
                            for i in 0..per {
                                let ch = grp * cg + i / sp;
                                let dxh = g[start + i] * gamma_v[ch];
                                gx[start + i] = is / m * (m * dxh - sum_d - xhat[start + i] * sum_dx);
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), gx)?);
                }
            }
            Op::Elu(x) => {
                let d = zip_map(&gout, y, |g, y| if y > T::zero() { g } else { g * (y + T::one()) });
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = zip_map(&gout, y, |g, y| g * y * (T::one() - y));
                self.accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = zip_map(&gout, y, |g, y| g * (T::one() - y * y));
                self.accumulate(grads, *x, d);
            }
            Op::Exp(x) => {
                let d = zip_map(&gout, y, |g, y| g * y);
                self.accumulate(grads, *x, d);
            }
            Op::Log(x) => {
                let d = zip_map(&gout, self.value(*x), |g, v| g / v);
                self.accumulate(grads, *x, d);
            }
            Op::Abs(x) => {
                let d = zip_map(&gout, self.value(*x), |g, v| {
                    if v > T::zero() {
                        g
                    } else if v < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                let d = zip_map(&gout, self.value(*x), |g, v| two * g * v);
                self.accumulate(grads, *x, d);
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let d = zip_map(&gout, self.value(*x), |g, v| if v >= lo && v <= hi { g } else { T::zero() });
                self.accumulate(grads, *x, d);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (&gv, &idx) in g.iter().zip(argmax) {
                    gx[idx] += gv;
                }
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, gx)?);
            }
            Op::Upsample2(x) => {
                let tx = self.value(*x);
                let (n, c, h, w) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
                let (oh, ow) = (2 * h, 2 * w);
                let ys = upsample_taps::<T>(h);
                let xs = upsample_taps::<T>(w);
                let mut gx = vec![T::zero(); tx.numel()];
                for plane in 0..n * c {
                    let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                            let gv = src[oy * ow + ox];
                            let top = gv * (T::one() - ly);
                            let bot = gv * ly;
                            dst[y0 * w + x0] += top * (T::one() - lx);
                            dst[y0 * w + x1] += top * lx;
                            dst[y1 * w + x0] += bot * (T::one() - lx);
                            dst[y1 * w + x1] += bot * lx;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), gx)?);
            }
            Op::Softmax(x) => {
                let d = y.dim(1);
                let mut gx = vec![T::zero(); y.numel()];
                for ((gr, yr), out) in g.chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::LogSoftmax(x) => {
                let d = y.dim(1);
                let mut gx = vec![T::zero(); y.numel()];
                for ((gr, yr), out) in g.chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let total: T = gr.iter().copied().sum();
                    for j in 0..d {
                        out[j] = gr[j] - yr[j].exp() * total;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::Concat(parts) => {
                let rows = y.dim(0);
                let total = y.dim(1);
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).dim(1);
                    if self.ng(*p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, *p, Tensor::new(vec![rows, w], gp)?);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (n, d) = (self.value(*x).dim(0), self.value(*x).dim(1));
                let len = y.dim(1);
                let mut gx = vec![T::zero(); n * d];
                for r in 0..n {
                    gx[r * d + start..r * d + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, d], gx)?);
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let row: usize = tx.shape()[1..].iter().product();
                let mut gx = vec![T::zero(); tx.numel()];
                gx[start * row..start * row + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), gx)?);
            }
            Op::Sum(x) => {
                let gv = g[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1);
                let gv = g[0] / T::lit(n as f64);
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::PickCols { x, idx } => {
                let (n, d) = (self.value(*x).dim(0), self.value(*x).dim(1));
                let mut gx = vec![T::zero(); n * d];
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * d + c] = g[r];
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, d], gx)?);
            }
            Op::NormalizeChannels { x, norms } => {
                let tx = self.value(*x);
                let (n, c) = (tx.dim(0), tx.dim(1));
                let sp: usize = tx.shape()[2..].iter().product();
                let yd = y.data();
                let mut gx = vec![T::zero(); tx.numel()];
                for s in 0..n {
                    for p in 0..sp {
                        let r = norms[s * sp + p];
                        let dot: T = (0..c).map(|ch| yd[(s * c + ch) * sp + p] * g[(s * c + ch) * sp + p]).sum();
                        for ch in 0..c {
                            let i = (s * c + ch) * sp + p;
                            gx[i] = (g[i] - yd[i] * dot) / r;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), gx)?);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), MathError> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, c, h, wd) = (tx.dim(0), tx.dim(1), tx.dim(2), tx.dim(3));
        let (o, k) = (tw.dim(0), tw.dim(2));
        let hw = h * wd;
        let ckk = c * k * k;
        let g = gout.data();
        if self.ng(b) {
            let mut gb = vec![T::zero(); o];
            for s in 0..n {
                for (oc, chunk) in g[s * o * hw..(s + 1) * o * hw].chunks(hw).enumerate() {
                    gb[oc] += chunk.iter().copied().sum::<T>();
                }
            }
            self.accumulate(grads, b, Tensor::new(vec![o], gb)?);
        }
        let need_w = self.ng(w);
        let need_x = self.ng(x);
        if !need_w && !need_x {
            return Ok(());
        }
        let mut gw = vec![T::zero(); o * ckk];
        let mut gx = if need_x { vec![T::zero(); tx.numel()] } else { Vec::new() };
        let mut col = vec![T::zero(); ckk * hw];
        let mut dcol = vec![T::zero(); ckk * hw];
        for s in 0..n {
            let go = MatRef::row_major(&g[s * o * hw..(s + 1) * o * hw], o, hw);
            if need_w {
                im2col(&tx.data()[s * c * hw..(s + 1) * c * hw], c, h, wd, k, pad, &mut col);
                gemm(go, MatRef::row_major(&col, ckk, hw).t(), &mut gw, T::one());
            }
            if need_x {
                gemm(MatRef::row_major(tw.data(), o, ckk).t(), go, &mut dcol, T::zero());
                col2im(&dcol, c, h, wd, k, pad, &mut gx[s * c * hw..(s + 1) * c * hw]);
            }
        }
        if need_w {
            self.accumulate(grads, w, Tensor::new(tw.shape().to_vec(), gw)?);
        }
        if need_x {
            self.accumulate(grads, x, Tensor::new(tx.shape().to_vec(), gx)?);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Parameter bound to `v`, if any.
    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        self.param_of.get(&v).copied()
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Source taps `(i0, i1, weight_of_i1)` for each of the `2 * n` outputs.
fn upsample_taps<T: Real>(n: usize) -> Vec<(usize, usize, T)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let line = &mut dst[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[ci * hw + iy as usize * w..ci * hw + (iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, x: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * hw + iy as usize * w;
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * w + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_forward_and_backward() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(3.0), true).unwrap();
        let y = g.square(x).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(g.backward(x), Err(MathError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::scalar(-1.0)).unwrap();
        assert!(matches!(g.log(a), Err(MathError::NonFinite { op: "log" })));
    }

    #[test]
    fn group_norm_of_constant_channel_outputs_shift() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 4, 3, 3], 2.5)).unwrap();
        let gamma = g.constant(Tensor::full(&[4], 1.7)).unwrap();
        let beta = g.constant(Tensor::from_f64(&[4], &[0.0, 0.1, -0.2, 0.3]).unwrap()).unwrap();
        let y = g.group_norm(x, gamma, beta, 2, 1e-5).unwrap();
        let out = g.value(y);
        for (i, v) in out.data().iter().enumerate() {
            let expected = [0.0, 0.1, -0.2, 0.3][i / 9];
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn stop_gradient_is_forward_identity_and_blocks_flow() {
        let mut store = ParamStore::<f64>::new();
        let grp = store.add_group("enc");
        let pid = store.add_param(grp, "w", Tensor::from_f64(&[2], &[0.5, -1.5]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&store, pid);
        let h = g.square(w).unwrap();
        let s = g.stop_gradient(h).unwrap();
        assert_eq!(g.value(s), g.value(h));
        let l = g.sum(s).unwrap();
        let grads = g.backward(l).unwrap();
        let gw = grads.params.get(pid).unwrap();
        assert!(gw.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn upsample_matches_half_pixel_bilinear() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 1, 1, 2], &[0.0, 4.0]).unwrap()).unwrap();
        let y = g.upsample2(x).unwrap();
        // outputs sample x at 0 (clamped), 0.25, 0.75, 1.0 (clamped)
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 3.0, 4.0, 0.0, 1.0, 3.0, 4.0]);
    }
}
