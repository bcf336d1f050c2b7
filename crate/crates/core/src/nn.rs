//! Parameterised layers built from [`Graph`] operations.

use rand::Rng;

use crate::attention::MaskMode;
use crate::error::Result;
use crate::graph::{ConvSpec, Graph, Var};
use crate::mask::AttentionMask;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weight initialisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Gaussian with standard deviation `1/√fan_in`.
    Lecun,
    Zero,
}

fn weight<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor<T> {
    match init {
        Init::Lecun => Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng),
        Init::Zero => Tensor::zeros(shape),
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let k = spec.kernel;
        let w = store.add(format!("{name}.w"), group, weight(&[c_out, c_in, k, k], c_in * k * k, init, rng));
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(&[c_out]));
        Self { w, b, spec }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, Some(b), self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        n_in: usize,
        n_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), group, weight(&[n_in, n_out], n_in, init, rng));
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(&[n_out]));
        Self { w, b }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), group, Tensor::full(&[channels], T::one()));
        let beta = store.add(format!("{name}.beta"), group, Tensor::zeros(&[channels]));
        Self { gamma, beta, groups: norm_groups(channels) }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// Largest of 8, 4, 2, 1 dividing `channels`.
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

/// The four projections of one attention layer.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
}

impl AttentionLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        c_q: usize,
        c_kv: usize,
        d: usize,
        c_out: usize,
        heads: usize,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        let w_q = store.add(format!("{name}.w_q"), group, weight(&[c_q, d], c_q, Init::Lecun, rng));
        let w_k = store.add(format!("{name}.w_k"), group, weight(&[c_kv, d], c_kv, Init::Lecun, rng));
        let w_v = store.add(format!("{name}.w_v"), group, weight(&[c_kv, d], c_kv, Init::Lecun, rng));
        let w_o = store.add(format!("{name}.w_o"), group, weight(&[d, c_out], d, out_init, rng));
        Self { w_q, w_k, w_v, w_o, heads }
    }

    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        xq: Var,
        xk: Var,
        xv: Var,
        mask: &AttentionMask,
        mode: MaskMode,
    ) -> Result<Var> {
        let ws = [g.param(self.w_q), g.param(self.w_k), g.param(self.w_v), g.param(self.w_o)];
        g.attention(xq, xk, xv, ws, self.heads, mask, mode)
    }
}

/// `(C, H, W)` feature map to its `HW × C` token matrix.
pub fn to_tokens<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<T: Scalar>(g: &mut Graph<'_, T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(tokens)[1];
    let t = g.transpose(tokens)?;
    g.reshape(t, &[c, h, w])
}
