//! The noise-prediction objective, AdamW, and the two-stage trainer.

use std::collections::{BTreeMap, HashMap};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::color::{image_to_tensor, GrayField};
use crate::config::ScheduleConfig;
use crate::data::AnnotatedImage;
use crate::denoiser::{drop_conditions, Conditioning, Denoiser, ForwardOptions};
use crate::diffusion::{gaussian, q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mask::MaskSet;
use crate::params::{Gradients, ParamGroup, ParamStore};
use crate::rng::keyed_rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    /// Peak learning rate reached at the end of warmup.
    pub lr: f64,
    pub warmup: usize,
    /// Probability of replacing masks and texts by nulls, per sample.
    pub dropout: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Save every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    /// Groups trained in stage 2.
    pub stage2_groups: Vec<ParamGroup>,
    /// Compute per-sample gradients on the rayon pool. Results are identical
    /// either way.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            lr: 5e-5,
            warmup: 500,
            dropout: 0.5,
            batch_size: 8,
            iterations: 1000,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            checkpoint_every: 0,
            stage2_groups: vec![ParamGroup::Condition],
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !matches!(self.stage, 1 | 2) {
            return bad(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return bad("batch_size and iterations must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1]", self.dropout));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("need 0 ≤ beta1, beta2 < 1 and eps > 0".into());
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("weight_decay and grad_clip must be non-negative".into());
        }
        if self.stage2_groups.contains(&ParamGroup::Guidance) {
            return bad("stage 2 keeps the guidance group frozen".into());
        }
        Ok(())
    }

    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        match self.stage {
            1 => vec![ParamGroup::Backbone, ParamGroup::Guidance],
            _ => self.stage2_groups.clone(),
        }
    }

    /// Linear warmup from `lr/warmup` to `lr`, then constant.
    pub fn learning_rate(&self, iteration: usize) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((iteration + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }
}

/// One training item: the clean image in `[-1, 1]` and its conditions.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub x0: Tensor<f32>,
    pub cond: Conditioning,
}

impl TrainExample {
    /// Instances with empty texts (failed captions) are left out of the
    /// conditions.
    pub fn new(image: &RgbImage, ann: &AnnotatedImage) -> Result<Self> {
        if (image.width() as usize, image.height() as usize) != (ann.width, ann.height) {
            return Err(Error::dims(
                format!("{}×{}", ann.width, ann.height),
                format!("{}×{}", image.width(), image.height()),
            ));
        }
        let mut masks = Vec::new();
        let mut texts = Vec::new();
        for inst in ann.instances.iter().filter(|i| !i.text.trim().is_empty()) {
            masks.push(inst.mask.decode()?);
            texts.push(inst.text.clone());
        }
        let masks = MaskSet::new(ann.width, ann.height, masks)?;
        let cond = Conditioning::new(GrayField::from_rgb(image), ann.global_text.clone(), masks, texts)?;
        Ok(Self { x0: image_to_tensor(image), cond })
    }
}

pub fn prepare_examples(items: &[(RgbImage, AnnotatedImage)]) -> Result<Vec<TrainExample>> {
    items.iter().map(|(img, ann)| TrainExample::new(img, ann)).collect()
}

/// Loss and summed parameter gradients for one sample with explicit noise.
pub fn sample_loss<T: Scalar>(
    model: &Denoiser,
    store: &ParamStore<T>,
    x0: &Tensor<T>,
    cond: &Conditioning,
    t: usize,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<(f64, Gradients<T>)> {
    let z_t = q_sample(x0, t, eps, schedule)?;
    let mut g = Graph::new(store);
    let z = g.constant(z_t);
    let out = model.forward(&mut g, z, t, cond, &ForwardOptions::default())?;
    let loss = g.mse(out.eps, eps.clone())?;
    let value = g.value(loss).data()[0].as_f64();
    Ok((value, g.backward(loss)?.params))
}

/// Mean noise-prediction loss over `batch` and its gradient. Sample `k` draws
/// its timestep, noise and condition dropout from the stream keyed by
/// `(seed, iteration, k)`; gradients are reduced in index order.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<T: Scalar>(
    model: &Denoiser,
    store: &ParamStore<T>,
    batch: &[(&Tensor<T>, &Conditioning)],
    schedule: &NoiseSchedule,
    dropout: f64,
    seed: u64,
    iteration: usize,
    parallel: bool,
) -> Result<(f64, Gradients<T>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let one = |k: usize| -> Result<(f64, Gradients<T>)> {
        let (x0, cond) = batch[k];
        let mut rng = keyed_rng(seed, &[iteration as u64, k as u64]);
        let t = rng.random_range(1..=schedule.steps());
        let eps = gaussian::<T, _>(x0.shape(), &mut rng);
        let cond = drop_conditions(cond, dropout, &mut rng);
        sample_loss(model, store, x0, &cond, t, &eps, schedule)
    };
    let parts: Vec<Result<(f64, Gradients<T>)>> =
        if parallel { (0..batch.len()).into_par_iter().map(one).collect() } else { (0..batch.len()).map(one).collect() };
    let mut total = 0.0;
    let mut grads = Gradients::new(store.len());
    for p in parts {
        let (l, g) = p?;
        total += l;
        grads.merge(&g);
    }
    let n = batch.len() as f64;
    grads.scale(T::from_f64(1.0 / n));
    Ok((total / n, grads))
}

/// AdamW moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<(String, Tensor<f32>)>,
    pub v: Vec<(String, Tensor<f32>)>,
    pub steps: BTreeMap<String, u64>,
}

/// Decoupled-weight-decay Adam over the trainable parameters of a store.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Option<Tensor<f32>>>,
    v: Vec<Option<Tensor<f32>>>,
    steps: Vec<u64>,
}

impl AdamW {
    pub fn new(store: &ParamStore<f32>) -> Self {
        Self { m: vec![None; store.len()], v: vec![None; store.len()], steps: vec![0; store.len()] }
    }

    pub fn from_state(store: &ParamStore<f32>, state: &AdamState) -> Result<Self> {
        let mut opt = Self::new(store);
        let lookup = |name: &str| {
            store.id(name).ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter `{name}`")))
        };
        for (name, t) in &state.m {
            opt.m[lookup(name)?.0] = Some(t.clone());
        }
        for (name, t) in &state.v {
            opt.v[lookup(name)?.0] = Some(t.clone());
        }
        for (name, &s) in &state.steps {
            opt.steps[lookup(name)?.0] = s;
        }
        Ok(opt)
    }

    pub fn state(&self, store: &ParamStore<f32>) -> AdamState {
        let mut st = AdamState::default();
        for (id, p) in store.iter() {
            if let (Some(m), Some(v)) = (&self.m[id.0], &self.v[id.0]) {
                st.m.push((p.name.clone(), m.clone()));
                st.v.push((p.name.clone(), v.clone()));
                st.steps.insert(p.name.clone(), self.steps[id.0]);
            }
        }
        st
    }

    /// Updates every trainable parameter that received a gradient. Frozen
    /// parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64, cfg: &TrainConfig) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.0;
            self.steps[i] += 1;
            let s = self.steps[i] as i32;
            let (c1, c2) = (1.0 - b1.powi(s), 1.0 - b2.powi(s));
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.value_mut(id);
            for (((p, m), v), &g) in
                p.data_mut().iter_mut().zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut()).zip(g.data())
            {
                let g = g as f64;
                let mf = b1 * *m as f64 + (1.0 - b1) * g;
                let vf = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mf as f32;
                *v = vf as f32;
                let update = (mf / c1) / ((vf / c2).sqrt() + cfg.eps) + cfg.weight_decay * *p as f64;
                *p = (*p as f64 - lr * update) as f32;
            }
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients<f32>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale((max_norm / norm) as f32);
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub enum TrainEvent<'a> {
    Step(&'a StepReport),
    Checkpoint(&'a Checkpoint),
}

pub struct Trainer {
    model: Denoiser,
    store: ParamStore<f32>,
    schedule: NoiseSchedule,
    config: TrainConfig,
    optimizer: AdamW,
    iteration: usize,
}

impl Trainer {
    pub fn new(model: Denoiser, mut store: ParamStore<f32>, schedule: NoiseSchedule, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        store.set_trainable_groups(&config.trainable_groups());
        let optimizer = AdamW::new(&store);
        Ok(Self { model, store, schedule, config, optimizer, iteration: 0 })
    }

    /// Continues a run of the same stage: restores iteration and optimizer.
    pub fn resume(ckpt: &Checkpoint, schedule: NoiseSchedule, config: TrainConfig) -> Result<Self> {
        let (model, store) = ckpt.instantiate()?;
        let mut t = Self::new(model, store, schedule, config)?;
        if let Some(a) = &ckpt.adam {
            t.optimizer = AdamW::from_state(&t.store, a)?;
        }
        t.iteration = ckpt.header.iteration;
        Ok(t)
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Dataset indices for the current iteration: consecutive slices of a
    /// per-epoch shuffle keyed by the seed.
    pub fn batch_indices(&self, n: usize) -> Vec<usize> {
        let b = self.config.batch_size;
        let start = self.iteration * b;
        let mut perms: HashMap<usize, Vec<usize>> = HashMap::new();
        (start..start + b)
            .map(|pos| {
                let epoch = pos / n;
                let perm = perms.entry(epoch).or_insert_with(|| {
                    let mut p: Vec<usize> = (0..n).collect();
                    p.shuffle(&mut keyed_rng(self.config.seed, &[u64::MAX, epoch as u64]));
                    p
                });
                perm[pos % n]
            })
            .collect()
    }

    pub fn step(&mut self, data: &[TrainExample]) -> Result<StepReport> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let idx = self.batch_indices(data.len());
        let batch: Vec<(&Tensor<f32>, &Conditioning)> = idx.iter().map(|&i| (&data[i].x0, &data[i].cond)).collect();
        let (loss, mut grads) = training_loss(
            &self.model,
            &self.store,
            &batch,
            &self.schedule,
            self.config.dropout,
            self.config.seed,
            self.iteration,
            self.config.parallel,
        )?;
        if !loss.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite loss at iteration {}", self.iteration)));
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        let lr = self.config.learning_rate(self.iteration);
        self.optimizer.step(&mut self.store, &grads, lr, &self.config);
        let report = StepReport { iteration: self.iteration, loss, lr, grad_norm };
        self.iteration += 1;
        Ok(report)
    }

    /// Snapshot including optimizer state. `stage` is the stage being trained.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_store(&self.model, &self.store, self.config.stage, self.iteration);
        c.header.train = Some(self.config.clone());
        c.header.schedule = Some(ScheduleConfig::of(&self.schedule));
        c.adam = Some(self.optimizer.state(&self.store));
        c
    }

    /// Runs until `config.iterations`, reporting each step and periodic
    /// checkpoints to `sink`.
    pub fn run(&mut self, data: &[TrainExample], sink: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.iterations {
            let r = self.step(data)?;
            sink(TrainEvent::Step(&r))?;
            let every = self.config.checkpoint_every;
            if every > 0 && self.iteration.is_multiple_of(every) && self.iteration < self.config.iterations {
                sink(TrainEvent::Checkpoint(&self.checkpoint()))?;
            }
        }
        Ok(())
    }
}

/// Trains one stage. Stage 1 starts from `init` if given, otherwise from a
/// fresh model built from `model_config`; stage 2 requires a stage-1 (or
/// later) checkpoint. Optimizer state is reset between stages.
pub fn train_stage(
    config: &TrainConfig,
    data: &[TrainExample],
    schedule: NoiseSchedule,
    model_config: &crate::denoiser::DenoiserConfig,
    init: Option<&Checkpoint>,
    sink: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<Checkpoint> {
    config.validate()?;
    let (model, store) = match (config.stage, init) {
        (2, None) => {
            return Err(Error::MissingPrerequisite("stage 2 needs a stage-1 checkpoint (--resume)".into()))
        }
        (2, Some(c)) if c.header.stage < 1 => {
            return Err(Error::MissingPrerequisite(format!(
                "stage 2 needs a stage-1 checkpoint, got one from stage {}",
                c.header.stage
            )))
        }
        (_, Some(c)) => c.instantiate()?,
        (_, None) => {
            let mut store = ParamStore::new();
            let mut rng = keyed_rng(config.seed, &[u64::MAX - 1]);
            let model = Denoiser::new(model_config.clone(), &mut store, &mut rng)?;
            (model, store)
        }
    };
    let mut trainer = Trainer::new(model, store, schedule, config.clone())?;
    trainer.run(data, sink)?;
    Ok(trainer.checkpoint())
}
