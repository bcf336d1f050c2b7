//! Image metrics, palette color fidelity, the color-swap leakage probe and
//! the ablation runner.

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{luma, nearest_palette, palette_index, px_f64, GrayField, PALETTE};
use crate::data::AnnotatedImage;
use crate::denoiser::{Denoiser, ForwardOptions};
use crate::diffusion::{NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::mask::{background_mask, InstanceMask};
use crate::multisample::{colorize, conditioning_from_instances, ColorizeRequest, FuseOptions};
use crate::params::ParamStore;

pub const SSIM_WINDOW: usize = 8;
pub const PSNR_CAP: f64 = 100.0;

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    if n == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Hasler–Süsstrunk colorfulness with population statistics.
pub fn colorfulness(img: &RgbImage) -> f64 {
    let rg = img.pixels().map(|p| p[0] as f64 - p[1] as f64);
    let yb = img.pixels().map(|p| 0.5 * (p[0] as f64 + p[1] as f64) - p[2] as f64);
    let (m_rg, s_rg) = mean_std(rg);
    let (m_yb, s_yb) = mean_std(yb);
    if m_rg.is_nan() {
        return 0.0;
    }
    (s_rg * s_rg + s_yb * s_yb).sqrt() + 0.3 * (m_rg * m_rg + m_yb * m_yb).sqrt()
}

fn same_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::dims(format!("{:?}", a.dimensions()), format!("{:?}", b.dimensions())));
    }
    Ok(())
}

/// PSNR over all RGB samples, capped at 100 dB.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.as_raw().len() as f64;
    let mse = a.as_raw().iter().zip(b.as_raw()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP))
}

fn luma_plane(img: &RgbImage) -> Vec<f64> {
    img.pixels().map(|p| luma(px_f64(p))).collect()
}

/// Mean SSIM over all 8×8 windows (stride 1, uniform weights) of the BT.601
/// luma planes, with `k1 = 0.01`, `k2 = 0.03` and population moments.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {w}×{h}")));
    }
    let (la, lb) = (luma_plane(a), luma_plane(b));
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let (p, q) = (la[y * w + x], lb[y * w + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Palette index named by the first color word of `text`.
pub fn text_color(text: &str) -> Option<usize> {
    text.to_lowercase().split(|c: char| !c.is_alphanumeric()).find_map(palette_index)
}

/// Mean RGB of `img` over `mask`, or `None` for an empty mask.
pub fn region_mean(img: &RgbImage, mask: &InstanceMask) -> Option<[f64; 3]> {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for (i, p) in img.pixels().enumerate() {
        if mask.get(i) {
            for k in 0..3 {
                sum[k] += p[k] as f64;
            }
            n += 1;
        }
    }
    (n > 0).then(|| sum.map(|s| s / n as f64))
}

/// Per-instance hits: `Some(true)` when the region mean is nearest to the
/// named palette color, `None` when the instance cannot be scored.
pub fn instance_hits(img: &RgbImage, ann: &AnnotatedImage) -> Result<Vec<Option<bool>>> {
    if (img.width() as usize, img.height() as usize) != (ann.width, ann.height) {
        return Err(Error::dims(
            format!("{}×{}", ann.width, ann.height),
            format!("{}×{}", img.width(), img.height()),
        ));
    }
    ann.instances
        .iter()
        .map(|inst| {
            let mask = inst.mask.decode()?;
            Ok(match (text_color(&inst.text), region_mean(img, &mask)) {
                (Some(k), Some(mean)) => Some(nearest_palette(mean) == k),
                _ => None,
            })
        })
        .collect()
}

/// Fraction of scorable instances whose region mean is nearest their named
/// color. `None` when no instance is scorable.
pub fn instance_color_fidelity(img: &RgbImage, ann: &AnnotatedImage) -> Result<Option<f64>> {
    let hits: Vec<bool> = instance_hits(img, ann)?.into_iter().flatten().collect();
    if hits.is_empty() {
        return Ok(None);
    }
    Ok(Some(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Colorfulness,
    Psnr,
    Ssim,
    Fidelity,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "colorfulness" => Ok(Metric::Colorfulness),
            "psnr" => Ok(Metric::Psnr),
            "ssim" => Ok(Metric::Ssim),
            "fidelity" => Ok(Metric::Fidelity),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub colorfulness: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub fidelity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    /// Images the metric was defined on.
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
    pub summary: std::collections::BTreeMap<String, Summary>,
    pub config: serde_json::Value,
}

/// Scores `pred` against reference images and annotations.
pub fn evaluate(
    items: &[(RgbImage, RgbImage, AnnotatedImage)],
    metrics: &[Metric],
    config: serde_json::Value,
) -> Result<MetricReport> {
    let has = |m| metrics.contains(&m);
    let images = items
        .par_iter()
        .map(|(pred, reference, ann)| {
            Ok(ImageMetrics {
                image_id: ann.image_id.clone(),
                colorfulness: has(Metric::Colorfulness).then(|| colorfulness(pred)),
                psnr: if has(Metric::Psnr) { Some(psnr(pred, reference)?) } else { None },
                ssim: if has(Metric::Ssim) { Some(ssim(pred, reference)?) } else { None },
                fidelity: if has(Metric::Fidelity) { instance_color_fidelity(pred, ann)? } else { None },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut summary = std::collections::BTreeMap::new();
    let cols: [(Metric, fn(&ImageMetrics) -> Option<f64>); 4] = [
        (Metric::Colorfulness, |m| m.colorfulness),
        (Metric::Psnr, |m| m.psnr),
        (Metric::Ssim, |m| m.ssim),
        (Metric::Fidelity, |m| m.fidelity),
    ];
    for (metric, get) in cols {
        if !has(metric) {
            continue;
        }
        let vals: Vec<f64> = images.iter().filter_map(get).collect();
        let (mean, std) = mean_std(vals.iter().copied());
        let name = serde_json::to_value(metric)?.as_str().unwrap_or_default().to_string();
        summary.insert(name, Summary { count: vals.len(), mean, std });
    }
    Ok(MetricReport { images, summary, config })
}

/// Palette color farthest (RGB) from color `k`.
pub fn contrast_color(k: usize) -> usize {
    let c = PALETTE[k].rgb.map(f64::from);
    (0..PALETTE.len())
        .max_by(|&a, &b| {
            let d = |j: usize| (0..3).map(|i| (PALETTE[j].rgb[i] as f64 - c[i]).powi(2)).sum::<f64>();
            d(a).total_cmp(&d(b))
        })
        .expect("palette is non-empty")
}

/// Replaces the first palette word of `text` by color `to`.
pub fn swap_color_word(text: &str, to: usize) -> Option<String> {
    let from = text_color(text)?;
    let words: Vec<&str> = text.split(' ').collect();
    let pos = words.iter().position(|w| w.eq_ignore_ascii_case(PALETTE[from].name))?;
    let mut out: Vec<&str> = words.clone();
    out[pos] = PALETTE[to].name;
    Some(out.join(" "))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub target: usize,
    pub original_text: String,
    pub swapped_text: String,
    /// Mean absolute change (0–255 per channel) inside the target mask.
    pub inside_delta: f64,
    /// Mean absolute change outside every instance mask.
    pub outside_delta: f64,
    /// `outside_delta / inside_delta`; `None` when nothing changed inside.
    pub ratio: Option<f64>,
}

fn mean_abs_delta(a: &RgbImage, b: &RgbImage, mask: &InstanceMask) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (i, (p, q)) in a.pixels().zip(b.pixels()).enumerate() {
        if mask.get(i) {
            s += (0..3).map(|k| (p[k] as f64 - q[k] as f64).abs()).sum::<f64>();
            n += 3;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Colorizes `req` as given and with the target instance's color word
/// swapped (in its text and in the same phrase of the global text), then
/// compares the two outputs inside the target and on the background.
pub fn leakage_probe(
    model: &Denoiser,
    store: &ParamStore<f32>,
    schedule: &NoiseSchedule,
    req: &ColorizeRequest,
    target: usize,
    baseline: Option<&RgbImage>,
) -> Result<LeakageReport> {
    let texts = &req.cond.texts;
    let original = texts
        .get(target)
        .ok_or_else(|| Error::InvalidArgument(format!("target {target} of {} instances", texts.len())))?
        .clone();
    let from = text_color(&original)
        .ok_or_else(|| Error::InvalidInput(format!("instance {target} names no palette color: {original:?}")))?;
    let swapped = swap_color_word(&original, contrast_color(from)).expect("color word present");
    let mut alt = req.clone();
    alt.cond.texts[target] = swapped.clone();
    alt.cond.global_text = req.cond.global_text.replacen(&original, &swapped, 1);
    let base = match baseline {
        Some(b) => b.clone(),
        None => colorize(req, model, store, schedule)?.image,
    };
    let other = colorize(&alt, model, store, schedule)?.image;
    let inside = mean_abs_delta(&base, &other, req.cond.masks.get(target));
    let outside = mean_abs_delta(&base, &other, &background_mask(&req.cond.masks));
    Ok(LeakageReport {
        target,
        original_text: original,
        swapped_text: swapped,
        inside_delta: inside,
        outside_delta: outside,
        ratio: (inside > 0.0).then(|| outside / inside),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Every attention mask forced to all-ones.
    NoMask,
    /// Guidance blocks bypassed.
    NoInstance,
    /// Single global pass (`α = 0`).
    Ddim,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoMask, Variant::NoInstance, Variant::Ddim];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMask => "no-mask",
            Variant::NoInstance => "no-instance",
            Variant::Ddim => "ddim",
        }
    }

    pub fn apply(self, req: &mut ColorizeRequest) {
        match self {
            Variant::Full => {}
            Variant::NoMask => req.forward = ForwardOptions { unmasked: true, ..req.forward },
            Variant::NoInstance => req.forward = ForwardOptions { bypass_guidance: true, ..req.forward },
            Variant::Ddim => req.sampler.alpha = 0.0,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Request for colorizing the gray version of a reference image with its
/// annotations. Instances with empty text are skipped.
pub fn request_for(reference: &RgbImage, ann: &AnnotatedImage, sampler: &SamplerConfig) -> Result<ColorizeRequest> {
    let instances: Vec<_> = ann
        .instances
        .iter()
        .filter(|i| !i.text.trim().is_empty())
        .map(|i| (i.mask.clone(), i.text.clone()))
        .collect();
    let cond = conditioning_from_instances(GrayField::from_rgb(reference), &ann.global_text, &instances)?;
    Ok(ColorizeRequest { fuse: FuseOptions::default(), ..ColorizeRequest::new(cond, sampler.clone()) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    /// Mean over fixtures with a defined fidelity.
    pub fidelity: f64,
    /// Instance-level hit rate over all scorable instances.
    pub instance_fidelity: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub colorfulness: f64,
    /// Mean leakage ratio over fixtures where it is defined.
    pub leakage: Option<f64>,
    pub per_image: Vec<ImageMetrics>,
    pub leakage_reports: Vec<LeakageReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub sampler: SamplerConfig,
    pub results: Vec<VariantResult>,
}

impl AblationReport {
    pub fn get(&self, v: Variant) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.variant == v)
    }
}

/// Runs every variant on every fixture. With `leakage`, instance 0 of each
/// fixture that has instances is probed.
pub fn run_ablation(
    model: &Denoiser,
    store: &ParamStore<f32>,
    schedule: &NoiseSchedule,
    fixtures: &[(RgbImage, AnnotatedImage)],
    variants: &[Variant],
    sampler: &SamplerConfig,
    leakage: bool,
) -> Result<AblationReport> {
    let mut results = Vec::new();
    for &variant in variants {
        let rows = fixtures
            .par_iter()
            .map(|(reference, ann)| {
                let mut req = request_for(reference, ann, sampler)?;
                variant.apply(&mut req);
                let out = colorize(&req, model, store, schedule)?;
                let hits = instance_hits(&out.image, ann)?;
                let probe = if leakage && !req.cond.texts.is_empty() && text_color(&req.cond.texts[0]).is_some() {
                    Some(leakage_probe(model, store, schedule, &req, 0, Some(&out.image))?)
                } else {
                    None
                };
                let m = ImageMetrics {
                    image_id: ann.image_id.clone(),
                    colorfulness: Some(colorfulness(&out.image)),
                    psnr: Some(psnr(&out.image, reference)?),
                    ssim: Some(ssim(&out.image, reference)?),
                    fidelity: instance_color_fidelity(&out.image, ann)?,
                };
                Ok((m, hits, probe))
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_of = |f: &dyn Fn(&ImageMetrics) -> Option<f64>| mean_std(rows.iter().filter_map(|r| f(&r.0))).0;
        let hits: Vec<bool> = rows.iter().flat_map(|r| r.1.iter().flatten().copied()).collect();
        let reports: Vec<LeakageReport> = rows.iter().filter_map(|r| r.2.clone()).collect();
        let ratios: Vec<f64> = reports.iter().filter_map(|r| r.ratio).collect();
        results.push(VariantResult {
            variant,
            fidelity: mean_of(&|m| m.fidelity),
            instance_fidelity: hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64,
            psnr: mean_of(&|m| m.psnr),
            ssim: mean_of(&|m| m.ssim),
            colorfulness: mean_of(&|m| m.colorfulness),
            leakage: (!ratios.is_empty()).then(|| mean_std(ratios.iter().copied()).0),
            per_image: rows.into_iter().map(|r| r.0).collect(),
            leakage_reports: reports,
        });
    }
    Ok(AblationReport { sampler: sampler.clone(), results })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn swap_changes_only_the_color_word() {
        assert_eq!(swap_color_word("a red circle", 2).unwrap(), "a blue circle");
        assert!(swap_color_word("a circle", 2).is_none());
    }

    #[test]
    fn contrast_color_differs() {
        for k in 0..PALETTE.len() {
            assert_ne!(contrast_color(k), k);
        }
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = RgbImage::from_pixel(4, 4, Rgb([1, 2, 3]));
        assert!(ssim(&a, &a).is_err());
    }
}
