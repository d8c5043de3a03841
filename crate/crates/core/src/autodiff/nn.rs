//! Parameterised layers. Layers hold only [`ParamId`]s; values live in a
//! [`ParamStore`] so a model can be evaluated in `f32` or `f64`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{ConvGeom, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with standard deviation `1 / sqrt(fan_in)`, zero bias.
    FanIn,
    /// All zeros; used for the last layer of residual branches.
    Zero,
}

fn init_matrix<T: Real>(rows: usize, cols: usize, fan_in: usize, init: Init, rng: &mut impl Rng) -> Matrix<T> {
    match init {
        Init::Zero => Matrix::zeros(rows, cols),
        Init::FanIn => {
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            Matrix::from_fn(rows, cols, |_, _| T::of(normal.sample(rng)))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_matrix(in_dim, out_dim, in_dim, init, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * kernel * c_in;
        let weight = store.add(format!("{name}.weight"), init_matrix(fan_in, c_out, fan_in, init, rng));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, c_out));
        Self {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
        }
    }

    /// "Same" padding for odd kernels; returns the output and its grid size.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, height: usize, width: usize) -> (Var, usize, usize) {
        let geom = ConvGeom {
            height,
            width,
            c_in: self.c_in,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.kernel / 2,
        };
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.conv2d(x, w, Some(b), geom);
        (y, geom.out_height(), geom.out_width())
    }
}

#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub gain: ParamId,
    pub width: usize,
}

impl RmsNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Matrix::filled(1, width, T::one()));
        Self { gain, width }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let gain = g.param(self.gain);
        g.rms_norm(x, gain)
    }
}

/// Query/key/value/output projections around the fused attention op.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        context_width: usize,
        heads: usize,
        out_init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, true, Init::FanIn, rng),
            key: Linear::new(store, &format!("{name}.key"), context_width, width, true, Init::FanIn, rng),
            value: Linear::new(store, &format!("{name}.value"), context_width, width, true, Init::FanIn, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, true, out_init, rng),
            heads,
        }
    }

    /// Attention of `x` over `context`; returns the projected output without
    /// any residual.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, context: Var) -> Var {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, context);
        let v = self.value.forward(g, context);
        let a = g.attention(q, k, v, self.heads);
        self.out.forward(g, a)
    }

    /// Per-head attention weights `[n, m]` for inspection.
    pub fn weights<T: Real>(&self, g: &mut Graph<T>, x: Var, context: Var) -> Vec<Matrix<T>> {
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, context);
        (0..self.heads)
            .map(|h| g.attention_weights(q, k, self.heads, h))
            .collect()
    }
}
