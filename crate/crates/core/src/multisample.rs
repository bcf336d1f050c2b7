//! Multi-instance sampling: each instance is denoised on its own for the
//! opening steps, the branches are fused by mask, and the fused image is
//! denoised globally to the end.

use image::RgbImage;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::hex;
use crate::color::{luma_lock, tensor_to_image, GrayField};
use crate::data::InstanceAnnotation;
use crate::denoiser::{Conditioning, Denoiser, ForwardOptions};
use crate::diffusion::{cfg_combine, ddim_step, gaussian, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::mask::{background_mask, rle_encode, MaskSet, OverlapPolicy, Rle};
use crate::params::ParamStore;
use crate::rng::keyed_rng;
use crate::tensor::Tensor;

/// RNG stream keys below the request seed.
const KEY_INIT: u64 = 0;
const KEY_INSTANCE: u64 = 1;
const KEY_GLOBAL: u64 = 2;
const GLOBAL_BRANCH: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseMode {
    /// `β·m_g∘z_g + Σ m_i∘z_i`.
    #[default]
    Literal,
    /// `m_g∘z_g + Σ m_i∘(β·z_g + (1−β)·z_i)`.
    Convex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FuseOptions {
    pub mode: FuseMode,
    /// `FirstMatch` assigns overlapping pixels to the lowest-index instance
    /// before fusing; `Union` lets overlaps sum.
    pub overlap: OverlapPolicy,
}

impl Default for FuseOptions {
    fn default() -> Self {
        Self { mode: FuseMode::Literal, overlap: OverlapPolicy::FirstMatch }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColorizeRequest {
    pub cond: Conditioning,
    pub sampler: SamplerConfig,
    pub fuse: FuseOptions,
    pub luma_lock: bool,
    pub forward: ForwardOptions,
    /// Run instance branches on the rayon pool. Output is identical either way.
    pub parallel: bool,
}

impl ColorizeRequest {
    pub fn new(cond: Conditioning, sampler: SamplerConfig) -> Self {
        Self {
            cond,
            sampler,
            fuse: FuseOptions::default(),
            luma_lock: false,
            forward: ForwardOptions::default(),
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstancePhaseState {
    pub z_g: Tensor<f32>,
    pub z_i: Vec<Tensor<f32>>,
    /// Number of DDIM steps completed.
    pub t_star: usize,
}

/// `n` independent copies of `z_t`.
pub fn init_instance_noises(z_t: &Tensor<f32>, n: usize) -> Vec<Tensor<f32>> {
    vec![z_t.clone(); n]
}

/// Mask-weighted fusion of the global branch `z_g` with instance branches.
pub fn fuse(z_g: &Tensor<f32>, z_list: &[Tensor<f32>], masks: &MaskSet, beta: f64, opts: FuseOptions) -> Result<Tensor<f32>> {
    if z_list.len() != masks.len() {
        return Err(Error::dims(format!("{} branches", masks.len()), z_list.len()));
    }
    let hw = masks.pixels();
    if !z_g.len().is_multiple_of(hw) || z_g.is_empty() {
        return Err(Error::ShapeMismatch(format!("z_g {:?} vs {}×{} masks", z_g.shape(), masks.height(), masks.width())));
    }
    if let Some(z) = z_list.iter().find(|z| z.shape() != z_g.shape()) {
        return Err(Error::ShapeMismatch(format!("branch {:?} vs z_g {:?}", z.shape(), z_g.shape())));
    }
    let masks = match opts.overlap {
        OverlapPolicy::FirstMatch => masks.disjoint_first_match(),
        OverlapPolicy::Union => masks.clone(),
    };
    let bg = background_mask(&masks);
    let b = beta as f32;
    let mut out = vec![0.0f32; z_g.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let p = i % hw;
        let g = z_g.data()[i];
        let mut acc = match (opts.mode, bg.get(p)) {
            (FuseMode::Literal, true) => b * g,
            (FuseMode::Convex, true) => g,
            (_, false) => 0.0,
        };
        for (m, z) in masks.masks().iter().zip(z_list) {
            if m.get(p) {
                acc += match opts.mode {
                    FuseMode::Literal => z.data()[i],
                    FuseMode::Convex => b * g + (1.0 - b) * z.data()[i],
                };
            }
        }
        *o = acc;
    }
    Tensor::from_vec(z_g.shape(), out)
}

/// Classifier-free-guided noise estimate. A null condition needs one pass.
pub fn guided_eps(
    model: &Denoiser,
    store: &ParamStore<f32>,
    z: &Tensor<f32>,
    t: usize,
    cond: &Conditioning,
    w: f64,
    opts: &ForwardOptions,
) -> Result<Tensor<f32>> {
    let eps_c = model.predict_noise(store, z, t, cond, opts)?;
    if cond.is_null() || w == 1.0 {
        return Ok(eps_c);
    }
    let eps_u = model.predict_noise(store, z, t, &cond.to_null(), opts)?;
    cfg_combine(&eps_c, &eps_u, w)
}

/// Runs the DDIM steps `steps` (pairs `(t, t_prev)`) from `z`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_chain(
    model: &Denoiser,
    store: &ParamStore<f32>,
    mut z: Tensor<f32>,
    steps: &[(usize, usize)],
    cond: &Conditioning,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    opts: &ForwardOptions,
    rng: &mut dyn RngCore,
) -> Result<Tensor<f32>> {
    for &(t, t_prev) in steps {
        let eps = guided_eps(model, store, &z, t, cond, sampler.guidance_scale, opts)?;
        z = ddim_step(&z, &eps, t, t_prev, schedule, sampler.eta, Some(&mut *rng))?;
    }
    Ok(z)
}

fn check_request(req: &ColorizeRequest, model: &Denoiser, schedule: &NoiseSchedule) -> Result<()> {
    req.sampler.validate(schedule)?;
    let n = model.config().image_size;
    if (req.cond.gray.width(), req.cond.gray.height()) != (n, n) {
        return Err(Error::dims(
            format!("{n}×{n} gray image"),
            format!("{}×{}", req.cond.gray.height(), req.cond.gray.width()),
        ));
    }
    if req.cond.masks.len() != req.cond.texts.len() {
        return Err(Error::InvalidInput(format!("{} masks but {} texts", req.cond.masks.len(), req.cond.texts.len())));
    }
    Ok(())
}

pub fn initial_noise(req: &ColorizeRequest, model: &Denoiser) -> Tensor<f32> {
    let n = model.config().image_size;
    gaussian(&[3, n, n], &mut keyed_rng(req.sampler.seed, &[KEY_INIT]))
}

/// Denoises the global branch and each instance branch for the first
/// `round(α·S)` steps. Branch `k` is conditioned on instance `k` alone.
pub fn run_instance_phase(
    state: InstancePhaseState,
    model: &Denoiser,
    store: &ParamStore<f32>,
    req: &ColorizeRequest,
    schedule: &NoiseSchedule,
) -> Result<InstancePhaseState> {
    let all = schedule.ddim_timesteps(req.sampler.ddim_steps)?;
    let k = req.sampler.instance_steps();
    if k == 0 {
        return Ok(state);
    }
    let steps = &all[state.t_star..k];
    let n = req.cond.masks.len();
    if state.z_i.len() != n {
        return Err(Error::dims(format!("{n} instance branches"), state.z_i.len()));
    }
    // Branch `n` is the global one.
    let branch = |b: usize| -> Result<Tensor<f32>> {
        let (z, cond, key) = if b == n {
            (state.z_g.clone(), req.cond.clone(), GLOBAL_BRANCH)
        } else {
            (state.z_i[b].clone(), req.cond.instance(b), b as u64)
        };
        let mut rng = keyed_rng(req.sampler.seed, &[KEY_INSTANCE, key]);
        ddim_chain(model, store, z, steps, &cond, &req.sampler, schedule, &req.forward, &mut rng)
    };
    let mut out: Vec<Tensor<f32>> = if req.parallel {
        (0..=n).into_par_iter().map(branch).collect::<Result<_>>()?
    } else {
        (0..=n).map(branch).collect::<Result<_>>()?
    };
    let z_g = out.pop().expect("global branch");
    Ok(InstancePhaseState { z_g, z_i: out, t_star: k })
}

/// Remaining steps from `t_star` to 0 with full conditioning.
pub fn run_global_phase(
    z: Tensor<f32>,
    t_star: usize,
    model: &Denoiser,
    store: &ParamStore<f32>,
    req: &ColorizeRequest,
    schedule: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    let all = schedule.ddim_timesteps(req.sampler.ddim_steps)?;
    let mut rng = keyed_rng(req.sampler.seed, &[KEY_GLOBAL]);
    ddim_chain(model, store, z, &all[t_star..], &req.cond, &req.sampler, schedule, &req.forward, &mut rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// Hex SHA-256 over the model, sampler and fusion configuration.
    pub config_hash: String,
    pub sampler: SamplerConfig,
    pub fuse: FuseOptions,
    pub luma_lock: bool,
    pub unmasked: bool,
    pub bypass_guidance: bool,
    pub instance_steps: usize,
    pub global_steps: usize,
    /// DDIM timestep at which the branches were fused; `None` without an
    /// instance phase.
    pub fusion_timestep: Option<usize>,
    pub global_text: String,
    pub instances: Vec<InstanceAnnotation>,
    pub checkpoint_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Colorized {
    pub image: RgbImage,
    /// Final sample in `[-1, 1]` after clamping.
    pub z0: Tensor<f32>,
    pub provenance: Provenance,
}

pub fn config_hash(model: &Denoiser, req: &ColorizeRequest) -> Result<String> {
    let v = serde_json::json!({
        "model": model.config(),
        "text_encoder": model.text_encoder().name(),
        "sampler": req.sampler,
        "fuse": req.fuse,
        "luma_lock": req.luma_lock,
        "unmasked": req.forward.unmasked,
        "bypass_guidance": req.forward.bypass_guidance,
    });
    Ok(hex(&Sha256::digest(serde_json::to_vec(&v)?)))
}

/// Full pipeline: noise init, instance phase, fusion, global phase, clamp,
/// optional luma-lock.
pub fn colorize(
    req: &ColorizeRequest,
    model: &Denoiser,
    store: &ParamStore<f32>,
    schedule: &NoiseSchedule,
) -> Result<Colorized> {
    check_request(req, model, schedule)?;
    let z_t = initial_noise(req, model);
    let n = req.cond.masks.len();
    let k = req.sampler.instance_steps();
    let state = InstancePhaseState { z_g: z_t.clone(), z_i: init_instance_noises(&z_t, n), t_star: 0 };
    let state = run_instance_phase(state, model, store, req, schedule)?;
    let z = if k > 0 { fuse(&state.z_g, &state.z_i, &req.cond.masks, req.sampler.beta, req.fuse)? } else { state.z_g };
    let z0 = run_global_phase(z, state.t_star, model, store, req, schedule)?;
    let z0 = z0.map(|v| v.clamp(-1.0, 1.0));
    let mut image = tensor_to_image(&z0)?;
    if req.luma_lock {
        image = luma_lock(&image, &req.cond.gray)?;
    }
    let timesteps = schedule.ddim_timesteps(req.sampler.ddim_steps)?;
    let instances = req
        .cond
        .masks
        .masks()
        .iter()
        .zip(&req.cond.texts)
        .enumerate()
        .map(|(i, (m, t))| InstanceAnnotation::new(i, t.clone(), m))
        .collect();
    let provenance = Provenance {
        seed: req.sampler.seed,
        config_hash: config_hash(model, req)?,
        sampler: req.sampler.clone(),
        fuse: req.fuse,
        luma_lock: req.luma_lock,
        unmasked: req.forward.unmasked,
        bypass_guidance: req.forward.bypass_guidance,
        instance_steps: state.t_star,
        global_steps: timesteps.len() - state.t_star,
        fusion_timestep: (k > 0).then(|| timesteps[k - 1].1),
        global_text: req.cond.global_text.clone(),
        instances,
        checkpoint_hash: None,
    };
    Ok(Colorized { image, z0, provenance })
}

/// Builds conditions from annotation-style instances.
pub fn conditioning_from_instances(gray: GrayField, global_text: &str, instances: &[(Rle, String)]) -> Result<Conditioning> {
    let (w, h) = (gray.width(), gray.height());
    let masks = instances.iter().map(|(r, _)| r.decode()).collect::<Result<Vec<_>>>()?;
    let masks = MaskSet::new(w, h, masks)?;
    Conditioning::new(gray, global_text, masks, instances.iter().map(|(_, t)| t.clone()).collect())
}

/// RLE of every instance mask, for echoing requests.
pub fn encode_masks(masks: &MaskSet) -> Vec<Rle> {
    masks.masks().iter().map(rle_encode).collect()
}
