//! Parameterized layers built from graph ops.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{GroupId, ParamId, ParamStore};
use super::{MathError, Real, Tensor};

fn uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// `y = x W + b` with `W[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        group: GroupId,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(store, group, name, fan_in, fan_out, 1.0, rng)
    }

    /// Kaiming-uniform weights scaled by `gain`, zero bias.
    pub fn with_gain<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        group: GroupId,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        let w = store.add_param(group, &format!("{name}.w"), uniform(rng, &[fan_in, fan_out], bound));
        let b = store.add_param(group, &format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, MathError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// Redraws the weights and zeroes the bias (optimizer state reset).
    pub fn reinit<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, gain: f64, rng: &mut R) -> Result<(), MathError> {
        let shape = store.value(self.w).shape().to_vec();
        let bound = gain * (3.0 / shape[0] as f64).sqrt();
        store.reset_param(self.w, uniform(rng, &shape, bound))?;
        let bshape = store.value(self.b).shape().to_vec();
        store.reset_param(self.b, Tensor::zeros(&bshape))
    }
}

/// 3x3 (or any odd) "same" convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        group: GroupId,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = store.add_param(group, &format!("{name}.w"), uniform(rng, &[c_out, c_in, k, k], bound));
        let b = store.add_param(group, &format!("{name}.b"), Tensor::zeros(&[c_out]));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, MathError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, group: GroupId, name: &str, channels: usize, groups: usize) -> Self {
        let groups = groups.min(channels).max(1);
        let groups = (1..=groups).rev().find(|&g| channels.is_multiple_of(g)).unwrap_or(1);
        let gamma = store.add_param(group, &format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = store.add_param(group, &format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta, groups }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, MathError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, gamma, beta, self.groups, Self::EPS)
    }
}

/// Gated recurrent unit with reset/update gates and a tanh candidate.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        group: GroupId,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add_param(group, &format!("{name}.w_ih"), uniform(rng, &[input, 3 * hidden], bound));
        let w_hh = store.add_param(group, &format!("{name}.w_hh"), uniform(rng, &[hidden, 3 * hidden], bound));
        let b_ih = store.add_param(group, &format!("{name}.b_ih"), Tensor::zeros(&[3 * hidden]));
        let b_hh = store.add_param(group, &format!("{name}.b_hh"), Tensor::zeros(&[3 * hidden]));
        Self { w_ih, w_hh, b_ih, b_hh, hidden }
    }

    /// One step: `x[N, in]`, `h[N, hidden]` to the next hidden state.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, h: Var) -> Result<Var, MathError> {
        let hs = self.hidden;
        if g.shape(h) != [g.shape(x)[0], hs] {
            return Err(MathError::Shape { op: "gru_cell", shapes: vec![g.shape(x).to_vec(), g.shape(h).to_vec()] });
        }
        let (w_ih, w_hh) = (g.param(store, self.w_ih), g.param(store, self.w_hh));
        let (b_ih, b_hh) = (g.param(store, self.b_ih), g.param(store, self.b_hh));
        let gi = g.matmul(x, w_ih)?;
        let gi = g.add_row(gi, b_ih)?;
        let gh = g.matmul(h, w_hh)?;
        let gh = g.add_row(gh, b_hh)?;
        let (i_r, i_z, i_n) = (g.slice_cols(gi, 0, hs)?, g.slice_cols(gi, hs, hs)?, g.slice_cols(gi, 2 * hs, hs)?);
        let (h_r, h_z, h_n) = (g.slice_cols(gh, 0, hs)?, g.slice_cols(gh, hs, hs)?, g.slice_cols(gh, 2 * hs, hs)?);
        let r = g.add(i_r, h_r)?;
        let r = g.sigmoid(r)?;
        let z = g.add(i_z, h_z)?;
        let z = g.sigmoid(z)?;
        let rn = g.mul(r, h_n)?;
        let n = g.add(i_n, rn)?;
        let n = g.tanh(n)?;
        // h' = n + z * (h - n)
        let d = g.sub(h, n)?;
        let zd = g.mul(z, d)?;
        g.add(n, zd)
    }
}
