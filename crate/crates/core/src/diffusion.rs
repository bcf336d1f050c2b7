//! Noise schedule, forward noising, deterministic DDIM stepping and
//! classifier-free guidance.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Linear-β schedule. Index 0 is the clean signal (`ᾱ_0 = 1`); training
/// timesteps are `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    beta_start: f64,
    beta_end: f64,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect()
        };
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars, beta_start, beta_end })
    }

    /// `(beta_start, beta_end)` as given to [`NoiseSchedule::linear`].
    pub fn endpoints(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// β_t for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// ᾱ_t for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// ᾱ_1..ᾱ_T.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars[1..]
    }

    /// `S` DDIM timesteps evenly spaced from `T` down to `T/S`, each paired
    /// with its successor; the last successor is 0.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<(usize, usize)>> {
        let t_max = self.steps();
        if steps == 0 || steps > t_max {
            return Err(Error::InvalidArgument(format!("DDIM steps {steps} outside 1..={t_max}")));
        }
        let ts: Vec<usize> = (0..steps).map(|i| t_max - i * t_max / steps).collect();
        Ok(ts.iter().enumerate().map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(0))).collect())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(200, 1e-4, 0.02).expect("default schedule")
    }
}

/// `z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε`.
pub fn q_sample<T: Scalar>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape())));
    }
    if t == 0 || t > schedule.steps() {
        return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", schedule.steps())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt()));
    let data = z0.data().iter().zip(eps.data()).map(|(&z, &e)| a * z + b * e).collect();
    Tensor::from_vec(z0.shape(), data)
}

/// Standard normal tensor.
pub fn gaussian<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::from_vec(shape, data).expect("gaussian shape")
}

/// One DDIM update from `t` to `t_prev < t`. `eta > 0` adds fresh noise and
/// needs `rng`.
pub fn ddim_step<T: Scalar>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Tensor<T>> {
    if t_prev >= t || t > schedule.steps() {
        return Err(Error::InvalidArgument(format!("DDIM step {t} -> {t_prev}")));
    }
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch(format!("z_t {:?} vs eps {:?}", z_t.shape(), eps_hat.shape())));
    }
    let (ab_t, ab_p) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let sigma = eta * ((1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)).max(0.0).sqrt();
    let noise = if eta != 0.0 {
        let rng = rng.ok_or_else(|| Error::InvalidArgument("eta > 0 requires an rng".into()))?;
        Some(gaussian::<T, _>(z_t.shape(), rng))
    } else {
        None
    };
    let s_t = (1.0 - ab_t).sqrt();
    let inv = 1.0 / ab_t.sqrt();
    let c_x0 = ab_p.sqrt();
    let c_eps = (1.0 - ab_p - sigma * sigma).max(0.0).sqrt();
    let data = z_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .enumerate()
        .map(|(i, (&z, &e))| {
            let (z, e) = (z.as_f64(), e.as_f64());
            let x0 = (z - s_t * e) * inv;
            let mut v = c_x0 * x0 + c_eps * e;
            if let Some(n) = &noise {
                v += sigma * n.data()[i].as_f64();
            }
            T::from_f64(v)
        })
        .collect();
    Tensor::from_vec(z_t.shape(), data)
}

/// `eps_u + w·(eps_c − eps_u)`.
pub fn cfg_combine<T: Scalar>(eps_cond: &Tensor<T>, eps_uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", eps_cond.shape(), eps_uncond.shape())));
    }
    let w = T::from_f64(w);
    let data = eps_cond.data().iter().zip(eps_uncond.data()).map(|(&c, &u)| u + w * (c - u)).collect();
    Tensor::from_vec(eps_cond.shape(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    pub eta: f64,
    pub guidance_scale: f64,
    /// Fraction of sampling steps run per instance before fusion.
    pub alpha: f64,
    /// Weight of the global branch on the background in the fusion.
    pub beta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { ddim_steps: 20, eta: 0.0, guidance_scale: 3.0, alpha: 0.2, beta: 0.2, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.ddim_steps == 0 || self.ddim_steps > schedule.steps() {
            return Err(Error::Config(format!("ddim_steps {} outside 1..={}", self.ddim_steps, schedule.steps())));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) || !self.guidance_scale.is_finite() {
            return Err(Error::Config("eta and guidance_scale must be finite, eta ≥ 0".into()));
        }
        Ok(())
    }

    /// Steps run per instance before fusion: `round(α·S)`.
    pub fn instance_steps(&self) -> usize {
        (self.alpha * self.ddim_steps as f64).round() as usize
    }
}
