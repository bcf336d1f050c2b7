//! The noise-prediction network: a small U-Net whose low-resolution blocks
//! carry instance guidance and pixel-level masked cross-attention against a
//! grayscale condition encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::MaskMode;
use crate::color::GrayField;
use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Graph, Var};
use crate::guidance::{encode_texts, GuidanceOptions, GuidanceParams};
use crate::mask::{build_pixel_attention_mask, resize_mask_set, AttentionMask, MaskPolicy, MaskSet};
use crate::nn::{from_tokens, to_tokens, AttentionLayer, Conv, GroupNorm, Init, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{InstanceText, TextEncoder, ToyTextEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// Number of lowest-resolution levels carrying attention blocks.
    pub attention_levels: usize,
    /// Also place attention blocks on the encoder path (the decoder always
    /// has them).
    pub encoder_attention: bool,
    pub time_dim: usize,
    pub mask_mode: MaskMode,
    pub policy: MaskPolicy,
    pub heads: usize,
    pub d_text: usize,
    pub max_tokens: usize,
    /// Apply the guidance block before the pixel cross-attention.
    pub guidance_first: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 32,
            channel_mults: vec![1, 2, 4],
            attention_levels: 2,
            encoder_attention: true,
            time_dim: 128,
            mask_mode: MaskMode::PostSoftmax,
            policy: MaskPolicy::default(),
            heads: 1,
            d_text: 64,
            max_tokens: crate::text::DEFAULT_MAX_TOKENS,
            guidance_first: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mults.len();
        if levels == 0 || self.base_channels == 0 || self.image_size == 0 {
            return Err(Error::Config("empty network".into()));
        }
        if !self.image_size.is_multiple_of(1 << (levels - 1)) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size,
                levels - 1
            )));
        }
        if self.attention_levels > levels {
            return Err(Error::Config(format!("{} attention levels of {levels}", self.attention_levels)));
        }
        if !self.time_dim.is_multiple_of(2) || self.time_dim == 0 {
            return Err(Error::Config("time_dim must be even and positive".into()));
        }
        for &m in &self.channel_mults {
            let c = m * self.base_channels;
            if c == 0 || !c.is_multiple_of(self.heads) {
                return Err(Error::Config(format!("{c} channels not divisible by {} heads", self.heads)));
            }
        }
        if self.d_text < crate::text::vocabulary().len() {
            return Err(Error::Config(format!("d_text {} below vocabulary size", self.d_text)));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.image_size >> level
    }

    pub fn has_attention(&self, level: usize) -> bool {
        level + self.attention_levels >= self.levels()
    }

    fn cond_channels(level: usize) -> usize {
        16 << level
    }
}

/// Everything the network is conditioned on besides `z_t` and `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub gray: GrayField,
    pub global_text: String,
    pub masks: MaskSet,
    pub texts: Vec<String>,
}

impl Conditioning {
    pub fn new(gray: GrayField, global_text: impl Into<String>, masks: MaskSet, texts: Vec<String>) -> Result<Self> {
        if masks.len() != texts.len() {
            return Err(Error::InvalidInput(format!("{} masks but {} texts", masks.len(), texts.len())));
        }
        if (masks.width(), masks.height()) != (gray.width(), gray.height()) {
            return Err(Error::dims(
                format!("{}×{} masks", gray.height(), gray.width()),
                format!("{}×{}", masks.height(), masks.width()),
            ));
        }
        Ok(Self { gray, global_text: global_text.into(), masks, texts })
    }

    /// Gray only: no masks, no texts.
    pub fn null(gray: GrayField) -> Self {
        let masks = MaskSet::empty(gray.width(), gray.height());
        Self { gray, global_text: String::new(), masks, texts: Vec::new() }
    }

    pub fn to_null(&self) -> Self {
        Self::null(self.gray.clone())
    }

    pub fn is_null(&self) -> bool {
        self.masks.is_empty() && self.texts.is_empty() && self.global_text.trim().is_empty()
    }

    /// The branch for instance `k` alone: its text doubles as global text.
    pub fn instance(&self, k: usize) -> Self {
        Self {
            gray: self.gray.clone(),
            global_text: self.texts[k].clone(),
            masks: self.masks.single(k),
            texts: vec![self.texts[k].clone()],
        }
    }
}

/// With probability `p` (one draw per call) replaces masks and texts by
/// nulls. Gray is always kept.
pub fn drop_conditions<R: Rng + ?Sized>(c: &Conditioning, p: f64, rng: &mut R) -> Conditioning {
    if rng.random::<f64>() < p {
        c.to_null()
    } else {
        c.clone()
    }
}

/// Ablation switches for a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// All attention masks forced to all-ones.
    pub unmasked: bool,
    /// Guidance blocks skipped entirely.
    pub bypass_guidance: bool,
}

/// Sinusoidal embedding: `dim/2` sines followed by `dim/2` cosines.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        time_dim: usize,
        rng: &mut R,
    ) -> Self {
        let b = ParamGroup::Backbone;
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), b, c_in),
            conv1: Conv::new(store, &format!("{name}.conv1"), b, c_in, c_out, ConvSpec::same(3), Init::Lecun, rng),
            temb: Linear::new(store, &format!("{name}.temb"), b, time_dim, c_out, Init::Lecun, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), b, c_out),
            conv2: Conv::new(store, &format!("{name}.conv2"), b, c_out, c_out, ConvSpec::same(3), Init::Lecun, rng),
            skip: (c_in != c_out)
                .then(|| Conv::new(store, &format!("{name}.skip"), b, c_in, c_out, ConvSpec::same(1), Init::Lecun, rng)),
        }
    }

    fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.apply(g, x)?;
        let h = g.silu(h);
        let h = self.conv1.apply(g, h)?;
        let tv = self.temb.apply(g, temb)?;
        let h = g.add_channel(h, tv)?;
        let h = self.norm2.apply(g, h)?;
        let h = g.silu(h);
        let h = self.conv2.apply(g, h)?;
        let skip = match &self.skip {
            Some(c) => c.apply(g, x)?,
            None => x,
        };
        g.add(skip, h)
    }
}

/// Guidance block plus pixel cross-attention at one resolution.
#[derive(Clone, Debug)]
struct AttnBlock {
    guidance: GuidanceParams,
    cross_norm: GroupNorm,
    cross: AttentionLayer,
}

/// Named intermediate values exposed for layer-level tests.
#[derive(Clone, Debug)]
pub struct Tap {
    pub name: String,
    pub var: Var,
}

pub struct Forward {
    pub eps: Var,
    pub taps: Vec<Tap>,
}

/// Per-resolution precomputed attention masks.
struct LevelMasks {
    guidance: AttentionMask,
    pixel: AttentionMask,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    text: TextEncoder,
    time: [Linear; 2],
    global_text: Linear,
    conv_in: Conv,
    encoder: Vec<(ResBlock, Option<AttnBlock>, Option<Conv>)>,
    mid: ResBlock,
    decoder: Vec<(ResBlock, Option<AttnBlock>, Option<Conv>)>,
    out_norm: GroupNorm,
    out_conv: Conv,
    cond_convs: Vec<Conv>,
    cond_heads: Vec<Option<Conv>>,
}

impl Denoiser {
    /// Builds the network with the builtin toy text encoder, registering
    /// freshly initialised parameters in `store`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: DenoiserConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let text = TextEncoder::Toy(ToyTextEncoder::new(config.d_text, config.max_tokens));
        Self::with_text_encoder(config, text, store, rng)
    }

    pub fn with_text_encoder<T: Scalar, R: Rng + ?Sized>(
        config: DenoiserConfig,
        text: TextEncoder,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if text.d_text() != config.d_text {
            return Err(Error::Config(format!("text encoder width {} vs config {}", text.d_text(), config.d_text)));
        }
        let b = ParamGroup::Backbone;
        let td = config.time_dim;
        let levels = config.levels();
        text.register(store, rng);
        let time = [
            Linear::new(store, "time.0", b, td, td, Init::Lecun, rng),
            Linear::new(store, "time.1", b, td, td, Init::Lecun, rng),
        ];
        let global_text = Linear::new(store, "global_text", b, config.d_text, td, Init::Zero, rng);
        let conv_in = Conv::new(store, "conv_in", b, 3, config.channels(0), ConvSpec::same(3), Init::Lecun, rng);

        let attn = |store: &mut ParamStore<T>, rng: &mut R, name: &str, level: usize| {
            let c = config.channels(level);
            AttnBlock {
                guidance: GuidanceParams::new(store, &format!("{name}.guidance"), c, config.d_text, config.heads, rng),
                cross_norm: GroupNorm::new(store, &format!("{name}.cross_norm"), ParamGroup::Condition, c),
                cross: AttentionLayer::new(
                    store,
                    &format!("{name}.cross"),
                    ParamGroup::Condition,
                    c,
                    c,
                    c,
                    c,
                    config.heads,
                    Init::Lecun,
                    rng,
                ),
            }
        };

        let mut encoder = Vec::new();
        let mut c_prev = config.channels(0);
        for l in 0..levels {
            let c = config.channels(l);
            let res = ResBlock::new(store, &format!("enc{l}.res"), c_prev, c, td, rng);
            let a = (config.has_attention(l) && config.encoder_attention).then(|| attn(store, rng, &format!("enc{l}"), l));
            let down = (l + 1 < levels)
                .then(|| Conv::new(store, &format!("enc{l}.down"), b, c, c, ConvSpec::down(3), Init::Lecun, rng));
            encoder.push((res, a, down));
            c_prev = c;
        }
        let mid = ResBlock::new(store, "mid", c_prev, c_prev, td, rng);
        let mut decoder = Vec::new();
        for l in (0..levels).rev() {
            let c = config.channels(l);
            let res = ResBlock::new(store, &format!("dec{l}.res"), c_prev + c, c, td, rng);
            let a = config.has_attention(l).then(|| attn(store, rng, &format!("dec{l}"), l));
            let up = (l > 0).then(|| Conv::new(store, &format!("dec{l}.up"), b, c, c, ConvSpec::same(3), Init::Lecun, rng));
            decoder.push((res, a, up));
            c_prev = c;
        }
        let out_norm = GroupNorm::new(store, "out.norm", b, c_prev);
        let out_conv = Conv::new(store, "out.conv", b, c_prev, 3, ConvSpec::same(3), Init::Lecun, rng);

        let cg = ParamGroup::Condition;
        let mut cond_convs = vec![Conv::new(
            store,
            "cond.conv0",
            cg,
            1,
            DenoiserConfig::cond_channels(0),
            ConvSpec::same(3),
            Init::Lecun,
            rng,
        )];
        for l in 1..levels.max(3) {
            let lvl = l.min(levels - 1);
            let spec = if l < levels { ConvSpec::down(3) } else { ConvSpec::same(3) };
            let c_in = DenoiserConfig::cond_channels((l - 1).min(levels - 1));
            cond_convs.push(Conv::new(
                store,
                &format!("cond.conv{l}"),
                cg,
                c_in,
                DenoiserConfig::cond_channels(lvl),
                spec,
                Init::Lecun,
                rng,
            ));
        }
        let cond_heads = (0..levels)
            .map(|l| {
                config.has_attention(l).then(|| {
                    Conv::new(
                        store,
                        &format!("cond.head{l}"),
                        cg,
                        DenoiserConfig::cond_channels(l),
                        config.channels(l),
                        ConvSpec::same(1),
                        Init::Zero,
                        rng,
                    )
                })
            })
            .collect();

        Ok(Self {
            config,
            text,
            time,
            global_text,
            conv_in,
            encoder,
            mid,
            decoder,
            out_norm,
            out_conv,
            cond_convs,
            cond_heads,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    /// Condition features `(C_l, H_l, W_l)` for every attention-bearing
    /// level; `None` elsewhere.
    pub fn condition_features<T: Scalar>(&self, g: &mut Graph<'_, T>, gray: &GrayField) -> Result<Vec<Option<Var>>> {
        let n = self.config.image_size;
        if gray.width() != n || gray.height() != n {
            return Err(Error::dims(format!("{n}×{n} gray"), format!("{}×{}", gray.height(), gray.width())));
        }
        let levels = self.config.levels();
        let mut x = g.constant(gray.to_tensor());
        let mut per_level: Vec<Option<Var>> = vec![None; levels];
        for (l, conv) in self.cond_convs.iter().enumerate() {
            let y = conv.apply(g, x)?;
            x = g.silu(y);
            per_level[l.min(levels - 1)] = Some(x);
        }
        let mut out = vec![None; levels];
        for (l, head) in self.cond_heads.iter().enumerate() {
            if let (Some(head), Some(feat)) = (head, per_level[l]) {
                out[l] = Some(head.apply(g, feat)?);
            }
        }
        Ok(out)
    }

    /// Forward-only condition features, for inspection and tests.
    pub fn encode_condition<T: Scalar>(&self, store: &ParamStore<T>, gray: &GrayField) -> Result<Vec<Option<Tensor<T>>>> {
        let mut g = Graph::inference(store);
        let feats = self.condition_features(&mut g, gray)?;
        Ok(feats.into_iter().map(|f| f.map(|v| g.value(v).clone())).collect())
    }

    fn level_masks(&self, cond: &Conditioning, opts: &ForwardOptions) -> Result<Vec<Option<LevelMasks>>> {
        let gopts = self.guidance_options(opts);
        (0..self.config.levels())
            .map(|l| {
                if !self.config.has_attention(l) {
                    return Ok(None);
                }
                let r = self.config.resolution(l);
                let guidance = GuidanceParams::attention_mask(&cond.masks, r, r, &gopts)?;
                let pixel = if opts.unmasked {
                    AttentionMask::ones(r * r, r * r)
                } else {
                    let m = resize_mask_set(&cond.masks, r, r)?;
                    build_pixel_attention_mask(&m, r, r, self.config.policy)?
                };
                Ok(Some(LevelMasks { guidance, pixel }))
            })
            .collect()
    }

    fn guidance_options(&self, opts: &ForwardOptions) -> GuidanceOptions {
        GuidanceOptions { policy: self.config.policy, mode: self.config.mask_mode, unmasked: opts.unmasked }
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_block<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        block: &AttnBlock,
        x: Var,
        text_emb: Option<Var>,
        cond: &Conditioning,
        f_y: Var,
        masks: &LevelMasks,
        opts: &ForwardOptions,
        taps: &mut Vec<Tap>,
        name: &str,
    ) -> Result<Var> {
        let mode = self.config.mask_mode;
        let mut x = x;
        let guidance = |g: &mut Graph<'_, T>, x: Var, taps: &mut Vec<Tap>| -> Result<Var> {
            if opts.bypass_guidance {
                return Ok(x);
            }
            let gamma = block.guidance.instance_features(g, &cond.masks, text_emb)?;
            let y = block.guidance.apply(g, x, gamma, &masks.guidance, mode)?;
            taps.push(Tap { name: format!("{name}.guidance"), var: y });
            Ok(y)
        };
        let cross = |g: &mut Graph<'_, T>, x: Var, taps: &mut Vec<Tap>| -> Result<Var> {
            let s = g.shape(x).to_vec();
            let hn = block.cross_norm.apply(g, x)?;
            let q = to_tokens(g, hn)?;
            let v = to_tokens(g, f_y)?;
            let out = block.cross.apply(g, q, q, v, &masks.pixel, mode)?;
            taps.push(Tap { name: format!("{name}.cross"), var: out });
            let out = from_tokens(g, out, s[1], s[2])?;
            g.add(x, out)
        };
        if self.config.guidance_first {
            x = guidance(g, x, taps)?;
            x = cross(g, x, taps)?;
        } else {
            x = cross(g, x, taps)?;
            x = guidance(g, x, taps)?;
        }
        Ok(x)
    }

    /// Records the network on `g` for noisy image `z_t` (`3 × N × N`).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        z_t: Var,
        t: usize,
        cond: &Conditioning,
        opts: &ForwardOptions,
    ) -> Result<Forward> {
        let n = self.config.image_size;
        if g.shape(z_t) != [3, n, n] {
            return Err(Error::ShapeMismatch(format!("expected 3×{n}×{n} input, got {:?}", g.shape(z_t))));
        }
        if cond.masks.len() != cond.texts.len() {
            return Err(Error::InvalidInput(format!("{} masks but {} texts", cond.masks.len(), cond.texts.len())));
        }
        let mut taps = Vec::new();

        let temb0 = g.constant(Tensor::from_f64(&[1, self.config.time_dim], &timestep_embedding(t as f64, self.config.time_dim))?);
        let h = self.time[0].apply(g, temb0)?;
        let h = g.silu(h);
        let mut temb = self.time[1].apply(g, h)?;
        let global = self.text.text(&cond.global_text);
        if !global.is_null() {
            let ge = self.text.encode(g, std::slice::from_ref(&global))?;
            let gp = self.global_text.apply(g, ge)?;
            temb = g.add(temb, gp)?;
        }
        let temb = g.silu(temb);

        let texts: Vec<InstanceText> = cond.texts.iter().map(|t| self.text.text(t)).collect();
        let text_emb = if opts.bypass_guidance { None } else { encode_texts(g, &self.text, &texts)? };
        let f_y = self.condition_features(g, &cond.gray)?;
        let masks = self.level_masks(cond, opts)?;

        let mut x = self.conv_in.apply(g, z_t)?;
        let mut skips = Vec::new();
        for (l, (res, attn, down)) in self.encoder.iter().enumerate() {
            x = res.apply(g, x, temb)?;
            if let Some(a) = attn {
                let (fy, m) = (f_y[l].expect("condition head"), masks[l].as_ref().expect("level masks"));
                x = self.attn_block(g, a, x, text_emb, cond, fy, m, opts, &mut taps, &format!("enc{l}"))?;
            }
            skips.push(x);
            if let Some(d) = down {
                x = d.apply(g, x)?;
            }
        }
        x = self.mid.apply(g, x, temb)?;
        for (res, attn, up) in &self.decoder {
            let skip = skips.pop().expect("skip per level");
            let l = skips.len();
            let cat = g.concat(&[x, skip], 0)?;
            x = res.apply(g, cat, temb)?;
            if let Some(a) = attn {
                let (fy, m) = (f_y[l].expect("condition head"), masks[l].as_ref().expect("level masks"));
                x = self.attn_block(g, a, x, text_emb, cond, fy, m, opts, &mut taps, &format!("dec{l}"))?;
            }
            if let Some(u) = up {
                let up = g.upsample2x(x)?;
                x = u.apply(g, up)?;
            }
        }
        let h = self.out_norm.apply(g, x)?;
        let h = g.silu(h);
        let eps = self.out_conv.apply(g, h)?;
        Ok(Forward { eps, taps })
    }

    /// ε̂(z_t, t, conditions) without recording gradients.
    pub fn predict_noise<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        z_t: &Tensor<T>,
        t: usize,
        cond: &Conditioning,
        opts: &ForwardOptions,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::inference(store);
        let z = g.constant(z_t.clone());
        let out = self.forward(&mut g, z, t, cond, opts)?;
        Ok(g.value(out.eps).clone())
    }

    /// Forward pass returning ε̂ together with the values of every tap.
    pub fn predict_with_taps<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        z_t: &Tensor<T>,
        t: usize,
        cond: &Conditioning,
        opts: &ForwardOptions,
    ) -> Result<(Tensor<T>, Vec<(String, Tensor<T>)>)> {
        let mut g = Graph::inference(store);
        let z = g.constant(z_t.clone());
        let out = self.forward(&mut g, z, t, cond, opts)?;
        let taps = out.taps.iter().map(|tp| (tp.name.clone(), g.value(tp.var).clone())).collect();
        Ok((g.value(out.eps).clone(), taps))
    }
}
