//! Instance mask-and-text guidance: per-instance features from mask shape and
//! text, appended as extra keys to a masked self-attention over the latent.

use rand::Rng;

use crate::attention::{LatentGrid, MaskMode};
use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Graph, Var};
use crate::mask::{
    assemble_self_map_mask, build_latent_instance_mask, build_self_mask, resize_mask_set, AttentionMask, MaskPolicy,
    MaskSet,
};
use crate::nn::{from_tokens, to_tokens, AttentionLayer, Conv, GroupNorm, Init, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{InstanceText, TextEncoder};

/// Resolution masks are resampled to before encoding.
pub const MASK_INPUT: usize = 32;
pub const MASK_DIM: usize = 32;
const MASK_CHANNELS: [usize; 3] = [8, 16, MASK_DIM];
const FUSION_HIDDEN: usize = 128;

/// Parameters of one guidance block.
#[derive(Clone, Debug)]
pub struct GuidanceParams {
    pub channels: usize,
    pub d_text: usize,
    mask_convs: [Conv; 3],
    fusion: [Linear; 3],
    norm: GroupNorm,
    attn: AttentionLayer,
}

/// Run-time switches shared by every guidance block of a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GuidanceOptions {
    pub policy: MaskPolicy,
    pub mode: MaskMode,
    /// Replace every attention mask with all-ones.
    pub unmasked: bool,
}

impl GuidanceParams {
    /// Registers a block under `name`. The output projection starts at zero,
    /// so a fresh block is an exact identity.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        d_text: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let grp = ParamGroup::Guidance;
        let [c1, c2, c3] = MASK_CHANNELS;
        let mask_convs = [
            Conv::new(store, &format!("{name}.mask0"), grp, 1, c1, ConvSpec::down(3), Init::Lecun, rng),
            Conv::new(store, &format!("{name}.mask1"), grp, c1, c2, ConvSpec::down(3), Init::Lecun, rng),
            Conv::new(store, &format!("{name}.mask2"), grp, c2, c3, ConvSpec::down(3), Init::Lecun, rng),
        ];
        let fusion = [
            Linear::new(store, &format!("{name}.fuse0"), grp, d_text + MASK_DIM, FUSION_HIDDEN, Init::Lecun, rng),
            Linear::new(store, &format!("{name}.fuse1"), grp, FUSION_HIDDEN, FUSION_HIDDEN, Init::Lecun, rng),
            Linear::new(store, &format!("{name}.fuse2"), grp, FUSION_HIDDEN, channels, Init::Lecun, rng),
        ];
        let norm = GroupNorm::new(store, &format!("{name}.norm"), grp, channels);
        let attn = AttentionLayer::new(
            store,
            &format!("{name}.attn"),
            grp,
            channels,
            channels,
            channels,
            channels,
            heads,
            Init::Zero,
            rng,
        );
        Self { channels, d_text, mask_convs, fusion, norm, attn }
    }

    /// `n × MASK_DIM` encodings, one mask at a time; `None` for `n = 0`.
    pub fn encode_masks<T: Scalar>(&self, g: &mut Graph<'_, T>, m: &MaskSet) -> Result<Option<Var>> {
        if m.is_empty() {
            return Ok(None);
        }
        let resized = resize_mask_set(m, MASK_INPUT, MASK_INPUT)?;
        let mut rows = Vec::with_capacity(m.len());
        for mk in resized.masks() {
            let data = mk.bits().iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
            let mut x = g.constant(Tensor::from_vec(&[1, MASK_INPUT, MASK_INPUT], data)?);
            for conv in &self.mask_convs {
                let y = conv.apply(g, x)?;
                x = g.silu(y);
            }
            rows.push(g.mean_pool(x)?);
        }
        g.concat(&rows, 0).map(Some)
    }

    /// Per-row concatenation of text and mask embeddings through the
    /// three-layer stack (GELU, GELU, identity): `n × channels`.
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<'_, T>, text_emb: Var, mask_emb: Var) -> Result<Var> {
        if g.shape(text_emb)[0] != g.shape(mask_emb)[0] {
            return Err(Error::ShapeMismatch(format!(
                "{} text rows but {} mask rows",
                g.shape(text_emb)[0],
                g.shape(mask_emb)[0]
            )));
        }
        let x = g.concat(&[text_emb, mask_emb], 1)?;
        let h = self.fusion[0].apply(g, x)?;
        let h = g.gelu(h);
        let h = self.fusion[1].apply(g, h)?;
        let h = g.gelu(h);
        self.fusion[2].apply(g, h)
    }

    /// Attention mask for `h × w` latent queries over latent keys followed by
    /// `n` instance keys.
    pub fn attention_mask(m: &MaskSet, h: usize, w: usize, opts: &GuidanceOptions) -> Result<AttentionMask> {
        let n = m.len();
        if opts.unmasked {
            return Ok(AttentionMask::ones(h * w, h * w + n));
        }
        let r = resize_mask_set(m, h, w)?;
        let self_mask = build_self_mask(&r, h, w, opts.policy)?;
        let cross = build_latent_instance_mask(&r, h, w)?;
        Ok(assemble_self_map_mask(&self_mask, &cross, n)?.top_rows(h * w))
    }

    /// Residual guidance block on a `(C, H, W)` latent. `gamma` is the
    /// `n × C` instance feature set (or `None` for no instances) and `mask`
    /// the matching [`Self::attention_mask`].
    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        gamma: Option<Var>,
        mask: &AttentionMask,
        mode: MaskMode,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let hn = self.norm.apply(g, x)?;
        let q = to_tokens(g, hn)?;
        let kv = match gamma {
            Some(gm) => g.concat(&[q, gm], 0)?,
            None => q,
        };
        let out = self.attn.apply(g, q, kv, kv, mask, mode)?;
        let out = from_tokens(g, out, s[1], s[2])?;
        g.add(x, out)
    }

    /// Instance features for `masks`/`texts`, or `None` when there are none.
    pub fn instance_features<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        masks: &MaskSet,
        text_emb: Option<Var>,
    ) -> Result<Option<Var>> {
        match (self.encode_masks(g, masks)?, text_emb) {
            (Some(me), Some(te)) => self.fuse(g, te, me).map(Some),
            (None, None) => Ok(None),
            _ => Err(Error::InvalidInput("instance masks and texts must both be present or absent".into())),
        }
    }
}

/// Text embeddings of the instance texts, `None` for no instances.
pub fn encode_texts<T: Scalar>(
    g: &mut Graph<'_, T>,
    enc: &TextEncoder,
    texts: &[InstanceText],
) -> Result<Option<Var>> {
    if texts.is_empty() {
        return Ok(None);
    }
    enc.encode(g, texts).map(Some)
}

/// Forward-only guidance block over a [`LatentGrid`].
pub fn guidance_block<T: Scalar>(
    store: &ParamStore<T>,
    params: &GuidanceParams,
    enc: &TextEncoder,
    latent: &LatentGrid<T>,
    masks: &MaskSet,
    texts: &[&str],
    opts: &GuidanceOptions,
) -> Result<LatentGrid<T>> {
    if texts.len() != masks.len() {
        return Err(Error::InvalidInput(format!("{} texts for {} masks", texts.len(), masks.len())));
    }
    let (h, w) = (latent.height, latent.width);
    let mut g = Graph::inference(store);
    let texts: Vec<InstanceText> = texts.iter().map(|t| enc.text(t)).collect();
    let te = encode_texts(&mut g, enc, &texts)?;
    let gamma = params.instance_features(&mut g, masks, te)?;
    let tokens = g.constant(latent.to_matrix());
    let x = from_tokens(&mut g, tokens, h, w)?;
    let mask = GuidanceParams::attention_mask(masks, h, w, opts)?;
    let y = params.apply(&mut g, x, gamma, &mask, opts.mode)?;
    let y = to_tokens(&mut g, y)?;
    LatentGrid::from_matrix(h, w, g.value(y).clone())
}
