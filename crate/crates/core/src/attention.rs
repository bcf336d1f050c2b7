//! Masked attention: pixel-level masked cross-attention between a latent map
//! and a condition map, and masked self-attention over the latent sequence
//! extended with instance tokens. Gradients are analytic and come from the
//! [`AttentionTape`] recorded during the forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::mask::AttentionMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where the attention mask is applied relative to the softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// `M ∘ softmax(S)`: rows of the masked map may sum to less than one.
    #[default]
    PostSoftmax,
    /// Masked scores set to `-inf` before the softmax; all-masked rows are zero.
    PreSoftmaxRenorm,
}

/// Query/key/value/output projections of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams<T> {
    /// `c_q × d`
    pub w_q: Tensor<T>,
    /// `c_k × d`
    pub w_k: Tensor<T>,
    /// `c_v × d`
    pub w_v: Tensor<T>,
    /// `d × c_out`
    pub w_o: Tensor<T>,
    pub heads: usize,
}

impl<T: Scalar> ProjectionParams<T> {
    pub fn new(w_q: Tensor<T>, w_k: Tensor<T>, w_v: Tensor<T>, w_o: Tensor<T>, heads: usize) -> Result<Self> {
        let p = Self { w_q, w_k, w_v, w_o, heads };
        p.validate()?;
        Ok(p)
    }

    /// Identity projections on `c` channels; recovers the bare attention equations.
    pub fn identity(c: usize) -> Self {
        let eye = |n: usize| {
            let mut t = Tensor::zeros(&[n, n]);
            for i in 0..n {
                t.data_mut()[i * n + i] = T::one();
            }
            t
        };
        Self { w_q: eye(c), w_k: eye(c), w_v: eye(c), w_o: eye(c), heads: 1 }
    }

    /// Gaussian projections with `1/sqrt(fan_in)` scaling.
    pub fn random<R: Rng + ?Sized>(c_in: usize, d: usize, c_out: usize, heads: usize, rng: &mut R) -> Self {
        let s_in = 1.0 / (c_in as f64).sqrt();
        let s_d = 1.0 / (d as f64).sqrt();
        Self {
            w_q: Tensor::randn(&[c_in, d], s_in, rng),
            w_k: Tensor::randn(&[c_in, d], s_in, rng),
            w_v: Tensor::randn(&[c_in, d], s_in, rng),
            w_o: Tensor::randn(&[d, c_out], s_d, rng),
            heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape().get(1).copied().unwrap_or(0)
    }

    pub fn out_channels(&self) -> usize {
        self.w_o.shape().get(1).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)] {
            if w.shape().len() != 2 {
                return Err(Error::ShapeMismatch(format!("{name} must be a matrix, got {:?}", w.shape())));
            }
            if !w.is_finite() {
                return Err(Error::InvalidInput(format!("{name} has non-finite entries")));
            }
        }
        let d = self.dim();
        if d == 0 {
            return Err(Error::InvalidArgument("projection dimension d = 0".into()));
        }
        if self.w_k.dim(1) != d || self.w_v.dim(1) != d || self.w_o.dim(0) != d {
            return Err(Error::ShapeMismatch(format!(
                "projection widths disagree: q {:?}, k {:?}, v {:?}, o {:?}",
                self.w_q.shape(),
                self.w_k.shape(),
                self.w_v.shape(),
                self.w_o.shape()
            )));
        }
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!("{} heads do not divide d = {d}", self.heads)));
        }
        Ok(())
    }
}

/// Real-valued `height × width × channels` feature map, stored so that the
/// row-major flattening is directly the `hw × c` token matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> LatentGrid<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dims(format!("{height}×{width}×{channels}"), data.len()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![T::zero(); height * width * channels] }
    }

    pub fn randn<R: Rng + ?Sized>(height: usize, width: usize, channels: usize, rng: &mut R) -> Self {
        let t = Tensor::<T>::randn(&[height * width, channels], 1.0, rng);
        Self { height, width, channels, data: t.into_data() }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Feature vector of flat pixel `i`.
    pub fn pixel(&self, i: usize) -> &[T] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.channels;
        &mut self.data[i * c..(i + 1) * c]
    }

    /// The `hw × c` token matrix.
    pub fn to_matrix(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.tokens(), self.channels], self.data.clone()).expect("grid size")
    }

    pub fn from_matrix(height: usize, width: usize, m: Tensor<T>) -> Result<Self> {
        if m.shape().len() != 2 || m.dim(0) != height * width {
            return Err(Error::dims(format!("{} tokens", height * width), format!("{:?}", m.shape())));
        }
        let c = m.dim(1);
        Self::new(height, width, c, m.into_data())
    }
}

/// Row-wise masked softmax.
pub fn masked_softmax<T: Scalar>(scores: &Tensor<T>, mask: &AttentionMask, mode: MaskMode) -> Result<Tensor<T>> {
    if scores.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!("scores must be a matrix, got {:?}", scores.shape())));
    }
    let (rows, cols) = (scores.dim(0), scores.dim(1));
    if mask.rows() != rows || mask.cols() != cols {
        return Err(Error::dims(format!("{rows}×{cols} mask"), format!("{}×{}", mask.rows(), mask.cols())));
    }
    if !scores.is_finite() {
        return Err(Error::InvalidInput("non-finite attention scores".into()));
    }
    let mut probs = vec![T::zero(); rows * cols];
    let mut weights = vec![T::zero(); rows * cols];
    softmax_rows(scores.data(), mask.bits(), rows, cols, mode, &mut probs, &mut weights);
    Tensor::from_vec(&[rows, cols], weights)
}

/// Writes the unmasked softmax into `probs` (post mode only) and the gated
/// weights into `weights`.
fn softmax_rows<T: Scalar>(
    scores: &[T],
    mask: &[bool],
    rows: usize,
    cols: usize,
    mode: MaskMode,
    probs: &mut [T],
    weights: &mut [T],
) {
    for i in 0..rows {
        let s = &scores[i * cols..(i + 1) * cols];
        let m = &mask[i * cols..(i + 1) * cols];
        let p = &mut probs[i * cols..(i + 1) * cols];
        let a = &mut weights[i * cols..(i + 1) * cols];
        match mode {
            MaskMode::PostSoftmax => {
                let max = s.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
                let mut sum = T::zero();
                for (pj, &sj) in p.iter_mut().zip(s) {
                    *pj = (sj - max).exp();
                    sum += *pj;
                }
                let inv = T::one() / sum;
                for ((pj, aj), &mj) in p.iter_mut().zip(a.iter_mut()).zip(m) {
                    *pj *= inv;
                    *aj = if mj { *pj } else { T::zero() };
                }
            }
            MaskMode::PreSoftmaxRenorm => {
                let max = s
                    .iter()
                    .zip(m)
                    .filter(|(_, &mj)| mj)
                    .fold(T::neg_infinity(), |acc, (&v, _)| acc.max(v));
                if max == T::neg_infinity() {
                    a.fill(T::zero());
                } else {
                    let mut sum = T::zero();
                    for ((aj, &sj), &mj) in a.iter_mut().zip(s).zip(m) {
                        *aj = if mj { (sj - max).exp() } else { T::zero() };
                        sum += *aj;
                    }
                    let inv = T::one() / sum;
                    for aj in a.iter_mut() {
                        *aj *= inv;
                    }
                }
                p.copy_from_slice(a);
            }
        }
    }
}

/// Forward intermediates needed by [`attention_backward`].
#[derive(Clone, Debug)]
pub struct AttentionTape<T> {
    xq: Tensor<T>,
    xk: Tensor<T>,
    xv: Tensor<T>,
    params: ProjectionParams<T>,
    mask: AttentionMask,
    mode: MaskMode,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `heads × Lq × Lk` softmax before gating.
    probs: Vec<T>,
    /// `heads × Lq × Lk` gated weights actually applied to the values.
    weights: Vec<T>,
    o: Vec<T>,
    scale: T,
}

impl<T: Scalar> AttentionTape<T> {
    pub fn query_len(&self) -> usize {
        self.xq.dim(0)
    }

    pub fn key_len(&self) -> usize {
        self.xk.dim(0)
    }

    pub fn out_channels(&self) -> usize {
        self.params.out_channels()
    }

    /// Gated weights of head `h` as an `Lq × Lk` row-major slice.
    pub fn weights(&self, h: usize) -> &[T] {
        let n = self.query_len() * self.key_len();
        &self.weights[h * n..(h + 1) * n]
    }
}

/// Gradients of every input and projection of one attention call.
#[derive(Clone, Debug)]
pub struct AttentionGrads<T> {
    pub xq: Tensor<T>,
    pub xk: Tensor<T>,
    pub xv: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
}

fn check_matrix<T: Scalar>(name: &str, x: &Tensor<T>, cols: usize) -> Result<usize> {
    if x.shape().len() != 2 || x.dim(1) != cols {
        return Err(Error::ShapeMismatch(format!("{name} must be L×{cols}, got {:?}", x.shape())));
    }
    Ok(x.dim(0))
}

/// General masked attention: queries from `xq`, keys from `xk`, values from
/// `xv`; returns the `Lq × c_out` output and the tape.
pub fn attention_forward<T: Scalar>(
    xq: &Tensor<T>,
    xk: &Tensor<T>,
    xv: &Tensor<T>,
    params: &ProjectionParams<T>,
    mask: &AttentionMask,
    mode: MaskMode,
) -> Result<(Tensor<T>, AttentionTape<T>)> {
    params.validate()?;
    let lq = check_matrix("queries", xq, params.w_q.dim(0))?;
    let lk = check_matrix("keys", xk, params.w_k.dim(0))?;
    let lv = check_matrix("values", xv, params.w_v.dim(0))?;
    if lv != lk {
        return Err(Error::ShapeMismatch(format!("{lk} keys but {lv} values")));
    }
    if mask.rows() != lq || mask.cols() != lk {
        return Err(Error::dims(format!("{lq}×{lk} mask"), format!("{}×{}", mask.rows(), mask.cols())));
    }
    let d = params.dim();
    let heads = params.heads;
    let dh = d / heads;
    let c_out = params.out_channels();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());

    let project = |x: &Tensor<T>, w: &Tensor<T>, rows: usize| {
        let mut out = vec![T::zero(); rows * d];
        gemm(
            T::one(),
            MatRef::rows(x.data(), rows, w.dim(0)),
            MatRef::rows(w.data(), w.dim(0), d),
            T::zero(),
            MatMut::rows(&mut out, rows, d),
        );
        out
    };
    let q = project(xq, &params.w_q, lq);
    let k = project(xk, &params.w_k, lk);
    let v = project(xv, &params.w_v, lk);

    let plane = lq * lk;
    let mut probs = vec![T::zero(); heads * plane];
    let mut weights = vec![T::zero(); heads * plane];
    let mut o = vec![T::zero(); lq * d];
    let mut scores = vec![T::zero(); plane];
    for h in 0..heads {
        gemm(
            scale,
            MatRef::rows(&q, lq, d).col_block(h * dh, dh),
            MatRef::rows(&k, lk, d).col_block(h * dh, dh).t(),
            T::zero(),
            MatMut::rows(&mut scores, lq, lk),
        );
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("non-finite attention scores".into()));
        }
        softmax_rows(
            &scores,
            mask.bits(),
            lq,
            lk,
            mode,
            &mut probs[h * plane..(h + 1) * plane],
            &mut weights[h * plane..(h + 1) * plane],
        );
        gemm(
            T::one(),
            MatRef::rows(&weights[h * plane..(h + 1) * plane], lq, lk),
            MatRef::rows(&v, lk, d).col_block(h * dh, dh),
            T::zero(),
            MatMut::rows(&mut o, lq, d).col_block(h * dh, dh),
        );
    }
    let mut y = vec![T::zero(); lq * c_out];
    gemm(
        T::one(),
        MatRef::rows(&o, lq, d),
        MatRef::rows(params.w_o.data(), d, c_out),
        T::zero(),
        MatMut::rows(&mut y, lq, c_out),
    );
    let tape = AttentionTape {
        xq: xq.clone(),
        xk: xk.clone(),
        xv: xv.clone(),
        params: params.clone(),
        mask: mask.clone(),
        mode,
        q,
        k,
        v,
        probs,
        weights,
        o,
        scale,
    };
    Ok((Tensor::from_vec(&[lq, c_out], y)?, tape))
}

/// Analytic gradients of the exact forward function recorded in `tape`.
pub fn attention_backward<T: Scalar>(tape: &AttentionTape<T>, upstream: &Tensor<T>) -> Result<AttentionGrads<T>> {
    let lq = tape.query_len();
    let lk = tape.key_len();
    let p = &tape.params;
    let d = p.dim();
    let c_out = p.out_channels();
    if upstream.shape() != [lq, c_out] {
        return Err(Error::TapeMismatch(format!(
            "expected {lq}×{c_out} upstream gradient, got {:?}",
            upstream.shape()
        )));
    }
    let heads = p.heads;
    let dh = d / heads;
    let dy = upstream.data();

    let mut d_wo = vec![T::zero(); d * c_out];
    gemm(T::one(), MatRef::rows_t(&tape.o, lq, d), MatRef::rows(dy, lq, c_out), T::zero(), MatMut::rows(&mut d_wo, d, c_out));
    let mut d_o = vec![T::zero(); lq * d];
    gemm(
        T::one(),
        MatRef::rows(dy, lq, c_out),
        MatRef::rows_t(p.w_o.data(), d, c_out),
        T::zero(),
        MatMut::rows(&mut d_o, lq, d),
    );

    let plane = lq * lk;
    let mut d_q = vec![T::zero(); lq * d];
    let mut d_k = vec![T::zero(); lk * d];
    let mut d_v = vec![T::zero(); lk * d];
    let mut d_a = vec![T::zero(); plane];
    for h in 0..heads {
        let probs = &tape.probs[h * plane..(h + 1) * plane];
        let weights = &tape.weights[h * plane..(h + 1) * plane];
        // dA = dO_h · V_hᵀ
        gemm(
            T::one(),
            MatRef::rows(&d_o, lq, d).col_block(h * dh, dh),
            MatRef::rows(&tape.v, lk, d).col_block(h * dh, dh).t(),
            T::zero(),
            MatMut::rows(&mut d_a, lq, lk),
        );
        // dV_h = Aᵀ · dO_h
        gemm(
            T::one(),
            MatRef::rows_t(weights, lq, lk),
            MatRef::rows(&d_o, lq, d).col_block(h * dh, dh),
            T::zero(),
            MatMut::rows(&mut d_v, lk, d).col_block(h * dh, dh),
        );
        // Softmax backward, in place: d_a becomes dS.
        let mask = tape.mask.bits();
        for i in 0..lq {
            let row = i * lk..(i + 1) * lk;
            let da = &mut d_a[row.clone()];
            match tape.mode {
                MaskMode::PostSoftmax => {
                    let pr = &probs[row.clone()];
                    let m = &mask[row];
                    for (x, &mj) in da.iter_mut().zip(m) {
                        if !mj {
                            *x = T::zero();
                        }
                    }
                    let dot: T = da.iter().zip(pr).map(|(&x, &pj)| x * pj).sum();
                    for (x, &pj) in da.iter_mut().zip(pr) {
                        *x = pj * (*x - dot);
                    }
                }
                MaskMode::PreSoftmaxRenorm => {
                    let a = &weights[row];
                    let dot: T = da.iter().zip(a).map(|(&x, &aj)| x * aj).sum();
                    for (x, &aj) in da.iter_mut().zip(a) {
                        *x = aj * (*x - dot);
                    }
                }
            }
        }
        // dQ_h = s · dS · K_h ; dK_h = s · dSᵀ · Q_h
        gemm(
            tape.scale,
            MatRef::rows(&d_a, lq, lk),
            MatRef::rows(&tape.k, lk, d).col_block(h * dh, dh),
            T::zero(),
            MatMut::rows(&mut d_q, lq, d).col_block(h * dh, dh),
        );
        gemm(
            tape.scale,
            MatRef::rows_t(&d_a, lq, lk),
            MatRef::rows(&tape.q, lq, d).col_block(h * dh, dh),
            T::zero(),
            MatMut::rows(&mut d_k, lk, d).col_block(h * dh, dh),
        );
    }

    let back = |x: &Tensor<T>, w: &Tensor<T>, dproj: &[T], rows: usize| -> (Tensor<T>, Tensor<T>) {
        let c = w.dim(0);
        let mut dw = vec![T::zero(); c * d];
        gemm(T::one(), MatRef::rows_t(x.data(), rows, c), MatRef::rows(dproj, rows, d), T::zero(), MatMut::rows(&mut dw, c, d));
        let mut dx = vec![T::zero(); rows * c];
        gemm(T::one(), MatRef::rows(dproj, rows, d), MatRef::rows_t(w.data(), c, d), T::zero(), MatMut::rows(&mut dx, rows, c));
        (
            Tensor::from_vec(&[rows, c], dx).expect("dx shape"),
            Tensor::from_vec(&[c, d], dw).expect("dw shape"),
        )
    };
    let (xq, w_q) = back(&tape.xq, &p.w_q, &d_q, lq);
    let (xk, w_k) = back(&tape.xk, &p.w_k, &d_k, lk);
    let (xv, w_v) = back(&tape.xv, &p.w_v, &d_v, lk);
    Ok(AttentionGrads { xq, xk, xv, w_q, w_k, w_v, w_o: Tensor::from_vec(&[d, c_out], d_wo)? })
}

/// Pixel-level masked cross-attention: queries and keys from the latent map,
/// values from the condition map, gated by an `hw × hw` mask.
pub fn masked_cross_attention<T: Scalar>(
    f_x: &LatentGrid<T>,
    f_y: &LatentGrid<T>,
    mask: &AttentionMask,
    params: &ProjectionParams<T>,
    mode: MaskMode,
) -> Result<LatentGrid<T>> {
    let (out, _) = masked_cross_attention_taped(f_x, f_y, mask, params, mode)?;
    Ok(out)
}

pub fn masked_cross_attention_taped<T: Scalar>(
    f_x: &LatentGrid<T>,
    f_y: &LatentGrid<T>,
    mask: &AttentionMask,
    params: &ProjectionParams<T>,
    mode: MaskMode,
) -> Result<(LatentGrid<T>, AttentionTape<T>)> {
    if (f_x.height, f_x.width, f_x.channels) != (f_y.height, f_y.width, f_y.channels) {
        return Err(Error::ShapeMismatch(format!(
            "latent {}×{}×{} vs condition {}×{}×{}",
            f_x.height, f_x.width, f_x.channels, f_y.height, f_y.width, f_y.channels
        )));
    }
    let x = f_x.to_matrix();
    let (y, tape) = attention_forward(&x, &x, &f_y.to_matrix(), params, mask, mode)?;
    Ok((LatentGrid::from_matrix(f_x.height, f_x.width, y)?, tape))
}

/// Masked self-attention over `concat(latent, gamma)`; only the latent rows
/// of the result are produced.
pub fn masked_self_attention<T: Scalar>(
    latent: &LatentGrid<T>,
    gamma: &Tensor<T>,
    mask: &AttentionMask,
    params: &ProjectionParams<T>,
    mode: MaskMode,
) -> Result<LatentGrid<T>> {
    let (out, _) = masked_self_attention_taped(latent, gamma, mask, params, mode)?;
    Ok(out)
}

pub fn masked_self_attention_taped<T: Scalar>(
    latent: &LatentGrid<T>,
    gamma: &Tensor<T>,
    mask: &AttentionMask,
    params: &ProjectionParams<T>,
    mode: MaskMode,
) -> Result<(LatentGrid<T>, AttentionTape<T>)> {
    let c = latent.channels;
    let n = match gamma.shape() {
        [n, gc] if *gc == c => *n,
        [0] | [0, _] => 0,
        s => return Err(Error::ShapeMismatch(format!("instance features must be n×{c}, got {s:?}"))),
    };
    let l = latent.tokens();
    if mask.rows() != l + n || mask.cols() != l + n {
        return Err(Error::ShapeMismatch(format!(
            "self-map mask must be {0}×{0} for {l} pixels and {n} instances, got {1}×{2}",
            l + n,
            mask.rows(),
            mask.cols()
        )));
    }
    let mut p = latent.data().to_vec();
    p.extend_from_slice(&gamma.data()[..n * c]);
    let p = Tensor::from_vec(&[l + n, c], p)?;
    let (y, tape) = attention_forward(&latent.to_matrix(), &p, &p, params, &mask.top_rows(l), mode)?;
    Ok((LatentGrid::from_matrix(latent.height, latent.width, y)?, tape))
}
