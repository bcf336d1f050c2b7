//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records one forward evaluation for a single sample. Parameters
//! are read from a borrowed [`ParamStore`]; a parameter node needs a gradient
//! only if the store marks it trainable, so frozen groups cost nothing in the
//! backward pass beyond what is needed to reach trainable ones.

use std::collections::HashMap;

use crate::attention::{attention_backward, attention_forward, AttentionTape, MaskMode, ProjectionParams};
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::mask::AttentionMask;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn same(kernel: usize) -> Self {
        Self { kernel, stride: 1, pad: kernel / 2 }
    }

    pub fn down(kernel: usize) -> Self {
        Self { kernel, stride: 2, pad: kernel / 2 }
    }

    fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannel { x: Var, v: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec, cols: Option<Vec<T>> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    Silu(Var),
    Gelu(Var),
    Reshape(Var),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Upsample2x(Var),
    MeanPool(Var),
    EmbeddingBag { table: Var, bags: Vec<Vec<usize>> },
    Attention { inputs: [Var; 3], weights: [Var; 4], tape: Box<Option<AttentionTape<T>>> },
    Mse { pred: Var, target: Tensor<T> },
    WeightedSum { x: Var, w: Tensor<T> },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Backward<T> {
    pub params: Gradients<T>,
    inputs: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Backward<T> {
    /// Gradient of a node created with [`Graph::input`].
    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v)
    }
}

pub struct Graph<'s, T> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

const GN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'s, T: Scalar> Graph<'s, T> {
    /// Graph recording everything needed for a backward pass.
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self { store, nodes: Vec::new(), param_vars: HashMap::new(), grad_enabled: true }
    }

    /// Forward-only graph: no node needs a gradient and no caches are kept.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self { grad_enabled: false, ..Self::new(store) }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is reported by [`Backward::input`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), op: Op::Leaf, needs_grad: self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let needs_grad = self.grad_enabled && self.store.is_trainable(id);
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// `x (C, ...) + v` with `v` holding one value per leading channel.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.value(v).len() != c {
            return Err(Error::ShapeMismatch(format!("{} channel offsets for {c} channels", self.value(v).len())));
        }
        let per = self.value(x).len() / c.max(1);
        let mut out = self.value(x).clone();
        let vv = self.value(v).data();
        for (ch, chunk) in out.data_mut().chunks_mut(per.max(1)).enumerate().take(c) {
            for o in chunk {
                *o += vv[ch];
            }
        }
        Ok(self.push(out, Op::AddChannel { x, v }, &[x, v]))
    }

    /// `x (L, in) · w (in, out) + b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::ShapeMismatch(format!("linear {xs:?} · {ws:?}")));
        }
        let (l, i, o) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); l * o];
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != o {
                return Err(Error::ShapeMismatch(format!("linear bias {} for {o} outputs", bv.len())));
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            T::one(),
            MatRef::rows(self.value(x).data(), l, i),
            MatRef::rows(self.value(w).data(), i, o),
            T::one(),
            MatMut::rows(&mut out, l, o),
        );
        let out = Tensor::from_vec(&[l, o], out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b }, &parents))
    }

    /// 2-D convolution of `x (C, H, W)` with `w (O, C, k, k)`, zero padded.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != spec.kernel || ws[3] != spec.kernel {
            return Err(Error::ShapeMismatch(format!("conv2d input {xs:?} weight {ws:?} spec {spec:?}")));
        }
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        if h + 2 * spec.pad < spec.kernel || wd + 2 * spec.pad < spec.kernel {
            return Err(Error::ShapeMismatch(format!("conv2d input {xs:?} smaller than kernel")));
        }
        let o = ws[0];
        let (ho, wo) = (spec.out_len(h), spec.out_len(wd));
        let ckk = c * spec.kernel * spec.kernel;
        let cols = if spec.is_pointwise() { None } else { Some(im2col(self.value(x).data(), c, h, wd, spec)) };
        let mut out = vec![T::zero(); o * ho * wo];
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != o {
                return Err(Error::ShapeMismatch(format!("conv bias {} for {o} outputs", bv.len())));
            }
            for (row, &bias) in out.chunks_mut(ho * wo).zip(bv) {
                row.fill(bias);
            }
        }
        {
            let src: &[T] = match &cols {
                Some(cols) => cols,
                None => self.value(x).data(),
            };
            gemm(
                T::one(),
                MatRef::rows(self.value(w).data(), o, ckk),
                MatRef::rows(src, ckk, ho * wo),
                T::one(),
                MatMut::rows(&mut out, o, ho * wo),
            );
        }
        let out = Tensor::from_vec(&[o, ho, wo], out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let keep = self.grad_enabled && self.needs(w);
        let op = Op::Conv2d { x, w, b, spec, cols: if keep { cols } else { None } };
        Ok(self.push(out, op, &parents))
    }

    /// Group normalisation of `x (C, H, W)` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = xs[0];
        if groups == 0 || !c.is_multiple_of(groups) || self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::ShapeMismatch(format!("group_norm {groups} groups over {xs:?}")));
        }
        let per_c = self.value(x).len() / c;
        let gsize = (c / groups) * per_c;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(groups);
        let mut rstds = Vec::with_capacity(groups);
        let n = T::from_f64(gsize as f64);
        for g in 0..groups {
            let seg = &xv[g * gsize..(g + 1) * gsize];
            let mean = seg.iter().copied().sum::<T>() / n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + T::from_f64(GN_EPS)).sqrt();
            for (k, &v) in seg.iter().enumerate() {
                let ch = g * (c / groups) + k / per_c;
                out[g * gsize + k] = (v - mean) * rstd * gv[ch] + bv[ch];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let out = Tensor::from_vec(&xs, out)?;
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds }, &[x, gamma, beta]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let out = self.value(x).map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch(format!("transpose of {s:?}")));
        }
        let data = crate::linalg::transpose(self.value(x).data(), s[0], s[1]);
        let out = Tensor::from_vec(&[s[1], s[0]], data)?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    /// Concatenation along axis 0 (any rank) or axis 1 (matrices only).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of nothing".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != first.len() || s[1..] != first[1..] {
                        return Err(Error::ShapeMismatch(format!("concat axis 0: {first:?} vs {s:?}")));
                    }
                    rows += s[0];
                    data.extend_from_slice(self.value(p).data());
                }
                let mut shape = first.clone();
                shape[0] = rows;
                let out = Tensor::from_vec(&shape, data)?;
                Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, parts))
            }
            1 => {
                let rows = first[0];
                let mut widths = Vec::new();
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != 2 || s[0] != rows {
                        return Err(Error::ShapeMismatch(format!("concat axis 1: {first:?} vs {s:?}")));
                    }
                    widths.push(s[1]);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for (&p, &w) in parts.iter().zip(&widths) {
                        data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
                    }
                }
                let out = Tensor::from_vec(&[rows, total], data)?;
                Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, parts))
            }
            _ => Err(Error::InvalidArgument(format!("concat axis {axis}"))),
        }
    }

    /// Nearest-neighbour 2× upsampling of `x (C, H, W)`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch(format!("upsample of {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * 4 * h * w);
        for ch in 0..c {
            for y in 0..2 * h {
                let row = &xv[ch * h * w + (y / 2) * w..ch * h * w + (y / 2) * w + w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        let out = Tensor::from_vec(&[c, 2 * h, 2 * w], out)?;
        Ok(self.push(out, Op::Upsample2x(x), &[x]))
    }

    /// Spatial mean of `x (C, ...)` as a `1 × C` row.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = s[0];
        let per = self.value(x).len() / c.max(1);
        let inv = T::from_f64(1.0 / per as f64);
        let data = self.value(x).data().chunks(per.max(1)).take(c).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::from_vec(&[1, c], data)?;
        Ok(self.push(out, Op::MeanPool(x), &[x]))
    }

    /// Row `k` of the result is the sum of `table` rows listed in `bags[k]`.
    pub fn embedding_bag(&mut self, table: Var, bags: Vec<Vec<usize>>) -> Result<Var> {
        let s = self.shape(table).to_vec();
        let (rows, d) = (s[0], s[1]);
        let tv = self.value(table).data();
        let mut out = vec![T::zero(); bags.len() * d];
        for (k, bag) in bags.iter().enumerate() {
            for &id in bag {
                if id >= rows {
                    return Err(Error::InvalidArgument(format!("embedding row {id} of {rows}")));
                }
                for (o, &t) in out[k * d..(k + 1) * d].iter_mut().zip(&tv[id * d..(id + 1) * d]) {
                    *o += t;
                }
            }
        }
        let out = Tensor::from_vec(&[bags.len(), d], out)?;
        Ok(self.push(out, Op::EmbeddingBag { table, bags }, &[table]))
    }

    /// Masked attention with projections taken from graph nodes. See
    /// [`attention_forward`].
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        xq: Var,
        xk: Var,
        xv: Var,
        weights: [Var; 4],
        heads: usize,
        mask: &AttentionMask,
        mode: MaskMode,
    ) -> Result<Var> {
        let params = ProjectionParams {
            w_q: self.value(weights[0]).clone(),
            w_k: self.value(weights[1]).clone(),
            w_v: self.value(weights[2]).clone(),
            w_o: self.value(weights[3]).clone(),
            heads,
        };
        let (out, tape) = attention_forward(self.value(xq), self.value(xk), self.value(xv), &params, mask, mode)?;
        let parents = [xq, xk, xv, weights[0], weights[1], weights[2], weights[3]];
        let needs = self.grad_enabled && parents.iter().any(|&p| self.needs(p));
        let tape = Box::new(needs.then_some(tape));
        Ok(self.push(out, Op::Attention { inputs: [xq, xk, xv], weights, tape }, &parents))
    }

    /// Mean squared error against a constant target; a `[1]` scalar.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::ShapeMismatch(format!("mse {:?} vs {:?}", self.shape(pred), target.shape())));
        }
        let n = T::from_f64(target.len() as f64);
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, &[pred]))
    }

    /// `Σ x ∘ w` for a constant `w`; a `[1]` scalar. Used to probe gradients.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor<T>) -> Result<Var> {
        if self.value(x).len() != w.len() {
            return Err(Error::ShapeMismatch(format!("weighted_sum {:?} vs {:?}", self.shape(x), w.shape())));
        }
        let s = self.value(x).data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, w }, &[x]))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, out: Var) -> Result<Backward<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::ShapeMismatch(format!("backward from non-scalar {:?}", self.shape(out))));
        }
        self.backward_with(out, Tensor::full(self.shape(out), T::one()))
    }

    /// Backpropagates `seed` (same shape as `out`).
    pub fn backward_with(&self, out: Var, seed: Tensor<T>) -> Result<Backward<T>> {
        if seed.shape() != self.shape(out) {
            return Err(Error::ShapeMismatch(format!("seed {:?} for {:?}", seed.shape(), self.shape(out))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut result = Backward { params: Gradients::new(self.store.len()), inputs: HashMap::new() };
        if !self.needs(out) {
            return Ok(result);
        }
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, g, &mut grads, &mut result)?;
        }
        Ok(result)
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        result: &mut Backward<T>,
    ) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {
                result.inputs.insert(Var(i), g);
            }
            Op::Param(id) => result.params.accumulate(*id, g),
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.acc(grads, *b, g.clone());
                }
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *a, Tensor::from_vec(av.shape(), d)?);
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *b, Tensor::from_vec(bv.shape(), d)?);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(grads, *x, g.map(|v| v * s));
            }
            Op::AddChannel { x, v } => {
                if self.needs(*v) {
                    let c = self.value(*v).len();
                    let per = g.len() / c.max(1);
                    let d = g.data().chunks(per.max(1)).take(c).map(|ch| ch.iter().copied().sum::<T>()).collect();
                    self.acc(grads, *v, Tensor::from_vec(self.shape(*v), d)?);
                }
                self.acc(grads, *x, g);
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (l, n_in, n_out) = (xs[0], xs[1], ws[1]);
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); n_out];
                        for row in g.data().chunks(n_out) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.acc(grads, *b, Tensor::from_vec(self.shape(*b), db)?);
                    }
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); n_in * n_out];
                    gemm(
                        T::one(),
                        MatRef::rows_t(self.value(*x).data(), l, n_in),
                        MatRef::rows(g.data(), l, n_out),
                        T::zero(),
                        MatMut::rows(&mut dw, n_in, n_out),
                    );
                    self.acc(grads, *w, Tensor::from_vec(&[n_in, n_out], dw)?);
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); l * n_in];
                    gemm(
                        T::one(),
                        MatRef::rows(g.data(), l, n_out),
                        MatRef::rows_t(self.value(*w).data(), n_in, n_out),
                        T::zero(),
                        MatMut::rows(&mut dx, l, n_in),
                    );
                    self.acc(grads, *x, Tensor::from_vec(&[l, n_in], dx)?);
                }
            }
            Op::Conv2d { x, w, b, spec, cols } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (c, h, wd) = (xs[0], xs[1], xs[2]);
                let o = ws[0];
                let hw_out = g.len() / o;
                let ckk = c * spec.kernel * spec.kernel;
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = g.data().chunks(hw_out).map(|r| r.iter().copied().sum::<T>()).collect();
                        self.acc(grads, *b, Tensor::from_vec(&[o], db)?);
                    }
                }
                if self.needs(*w) {
                    let recomputed;
                    let src: &[T] = match cols {
                        Some(cols) => cols,
                        None if spec.is_pointwise() => self.value(*x).data(),
                        None => {
                            recomputed = im2col(self.value(*x).data(), c, h, wd, *spec);
                            &recomputed
                        }
                    };
                    let mut dw = vec![T::zero(); o * ckk];
                    gemm(
                        T::one(),
                        MatRef::rows(g.data(), o, hw_out),
                        MatRef::rows_t(src, ckk, hw_out),
                        T::zero(),
                        MatMut::rows(&mut dw, o, ckk),
                    );
                    self.acc(grads, *w, Tensor::from_vec(&ws, dw)?);
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); ckk * hw_out];
                    gemm(
                        T::one(),
                        MatRef::rows_t(self.value(*w).data(), o, ckk),
                        MatRef::rows(g.data(), o, hw_out),
                        T::zero(),
                        MatMut::rows(&mut dcols, ckk, hw_out),
                    );
                    let dx = if spec.is_pointwise() { dcols } else { col2im(&dcols, c, h, wd, *spec) };
                    self.acc(grads, *x, Tensor::from_vec(&xs, dx)?);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let xs = self.shape(*x).to_vec();
                let c = xs[0];
                let per_c = self.value(*x).len() / c;
                let cg = c / groups;
                let gsize = cg * per_c;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let gd = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xv.len()];
                let n = T::from_f64(gsize as f64);
                for grp in 0..*groups {
                    let (m, r) = (mean[grp], rstd[grp]);
                    let base = grp * gsize;
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for k in 0..gsize {
                        let ch = grp * cg + k / per_c;
                        let xhat = (xv[base + k] - m) * r;
                        let dy = gd[base + k];
                        dgamma[ch] += dy * xhat;
                        dbeta[ch] += dy;
                        let dxhat = dy * gv[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let mean_d = sum_dxhat / n;
                    let mean_dx = sum_dxhat_xhat / n;
                    for k in 0..gsize {
                        let ch = grp * cg + k / per_c;
                        let xhat = (xv[base + k] - m) * r;
                        let dxhat = gd[base + k] * gv[ch];
                        dx[base + k] = r * (dxhat - mean_d - xhat * mean_dx);
                    }
                }
                self.acc(grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
                self.acc(grads, *beta, Tensor::from_vec(&[c], dbeta)?);
                self.acc(grads, *x, Tensor::from_vec(&xs, dx)?);
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gy, &v)| {
                        let s = sigmoid(v);
                        gy * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), d)?);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let c = T::from_f64(GELU_C);
                let a = T::from_f64(GELU_A);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gy, &v)| {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let dinner = c * (T::one() + three * a * v * v);
                        gy * (half * (T::one() + th) + half * v * (T::one() - th * th) * dinner)
                    })
                    .collect();
                self.acc(grads, *x, Tensor::from_vec(xv.shape(), d)?);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, g.reshape(&shape)?);
            }
            Op::Transpose(x) => {
                let s = self.shape(*x).to_vec();
                let d = crate::linalg::transpose(g.data(), s[1], s[0]);
                self.acc(grads, *x, Tensor::from_vec(&s, d)?);
            }
            Op::Concat { parts, axis } => match axis {
                0 => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.needs(p) {
                            let d = g.data()[offset..offset + n].to_vec();
                            self.acc(grads, p, Tensor::from_vec(self.shape(p), d)?);
                        }
                        offset += n;
                    }
                }
                _ => {
                    let rows = self.shape(parts[0])[0];
                    let total = g.dim(1);
                    let mut col = 0;
                    for &p in parts {
                        let w = self.shape(p)[1];
                        if self.needs(p) {
                            let mut d = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                d.extend_from_slice(&g.data()[r * total + col..r * total + col + w]);
                            }
                            self.acc(grads, p, Tensor::from_vec(&[rows, w], d)?);
                        }
                        col += w;
                    }
                }
            },
            Op::Upsample2x(x) => {
                let s = self.shape(*x).to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let gd = g.data();
                let mut d = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[ch * h * w + (y / 2) * w + xx / 2] += gd[ch * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::from_vec(&s, d)?);
            }
            Op::MeanPool(x) => {
                let s = self.shape(*x).to_vec();
                let c = s[0];
                let per = self.value(*x).len() / c.max(1);
                let inv = T::from_f64(1.0 / per as f64);
                let mut d = Vec::with_capacity(c * per);
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv * inv, per));
                }
                self.acc(grads, *x, Tensor::from_vec(&s, d)?);
            }
            Op::EmbeddingBag { table, bags } => {
                let s = self.shape(*table).to_vec();
                let d = s[1];
                let mut dt = vec![T::zero(); s[0] * d];
                for (k, bag) in bags.iter().enumerate() {
                    for &id in bag {
                        for (o, &gv) in dt[id * d..(id + 1) * d].iter_mut().zip(&g.data()[k * d..(k + 1) * d]) {
                            *o += gv;
                        }
                    }
                }
                self.acc(grads, *table, Tensor::from_vec(&s, dt)?);
            }
            Op::Attention { inputs, weights, tape } => {
                let tape = tape.as_ref().as_ref().ok_or_else(|| Error::TapeMismatch("attention tape not recorded".into()))?;
                let ag = attention_backward(tape, &g)?;
                self.acc(grads, inputs[0], ag.xq);
                self.acc(grads, inputs[1], ag.xk);
                self.acc(grads, inputs[2], ag.xv);
                self.acc(grads, weights[0], ag.w_q);
                self.acc(grads, weights[1], ag.w_k);
                self.acc(grads, weights[2], ag.w_v);
                self.acc(grads, weights[3], ag.w_o);
            }
            Op::Mse { pred, target } => {
                let seed = g.data()[0];
                let k = T::from_f64(2.0 / target.len() as f64) * seed;
                let pv = self.value(*pred);
                let d = pv.data().iter().zip(target.data()).map(|(&p, &t)| k * (p - t)).collect();
                self.acc(grads, *pred, Tensor::from_vec(pv.shape(), d)?);
            }
            Op::WeightedSum { x, w } => {
                let seed = g.data()[0];
                let d = w.data().iter().map(|&v| v * seed).collect();
                self.acc(grads, *x, Tensor::from_vec(self.shape(*x), d)?);
            }
        }
        Ok(())
    }
}

/// `(C·k·k) × (Ho·Wo)` patch matrix of a zero-padded `C × H × W` input.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, spec: ConvSpec) -> Vec<T> {
    let k = spec.kernel;
    let (ho, wo) = (spec.out_len(h), spec.out_len(w));
    let mut cols = vec![T::zero(); c * k * k * ho * wo];
    let mut row = 0;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, spec: ConvSpec) -> Vec<T> {
    let k = spec.kernel;
    let (ho, wo) = (spec.out_len(h), spec.out_len(w));
    let mut x = vec![T::zero(); c * h * w];
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}
