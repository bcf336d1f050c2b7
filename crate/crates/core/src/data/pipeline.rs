//! Annotation pipeline: detect instances, crop them, caption each crop with a
//! primary client and fall back to a second client on refusals or failures.

use std::sync::atomic::{AtomicUsize, Ordering};

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{nearest_palette, px_f64, PALETTE};
use crate::data::annotation::{AnnotatedImage, InstanceAnnotation};
use crate::error::{Error, Result};
use crate::mask::{InstanceMask, MaskSet};

pub const FILL_GRAY: u8 = 128;

pub const DEFAULT_REFUSALS: [&str; 2] = ["unable to provide", "too blurred"];

/// Tight bounding-box crop of `image` with pixels outside `mask` set to mid-gray.
pub fn crop_instance(image: &RgbImage, mask: &InstanceMask) -> Result<RgbImage> {
    if (mask.width(), mask.height()) != (image.width() as usize, image.height() as usize) {
        return Err(Error::dims(
            format!("{}×{}", image.width(), image.height()),
            format!("{}×{}", mask.width(), mask.height()),
        ));
    }
    let [x0, y0, w, h] = mask.bbox().ok_or_else(|| Error::InvalidInput("cannot crop an empty mask".into()))?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (sx, sy) = (x0 + x as usize, y0 + y as usize);
        if mask.at(sx, sy) {
            *image.get_pixel(sx as u32, sy as u32)
        } else {
            Rgb([FILL_GRAY; 3])
        }
    }))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptionRules {
    /// Color words, matched case-insensitively as whole words.
    pub lexicon: Vec<String>,
    /// Case-insensitive substrings that mark a refusal.
    pub refusals: Vec<String>,
}

impl Default for CaptionRules {
    fn default() -> Self {
        Self {
            lexicon: PALETTE.iter().map(|c| c.name.to_string()).collect(),
            refusals: DEFAULT_REFUSALS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason", content = "detail")]
pub enum InvalidCaption {
    Empty,
    Refusal(String),
    NoColorWord,
}

impl std::fmt::Display for InvalidCaption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InvalidCaption::Empty => write!(f, "empty caption"),
            InvalidCaption::Refusal(p) => write!(f, "refusal (matched {p:?})"),
            InvalidCaption::NoColorWord => write!(f, "no color word"),
        }
    }
}

pub fn validate_caption(text: &str, rules: &CaptionRules) -> std::result::Result<(), InvalidCaption> {
    let lower = text.trim().to_lowercase();
    if lower.is_empty() {
        return Err(InvalidCaption::Empty);
    }
    if let Some(p) = rules.refusals.iter().find(|p| lower.contains(&p.to_lowercase())) {
        return Err(InvalidCaption::Refusal(p.clone()));
    }
    let has_color = lower
        .split(|c: char| !c.is_alphanumeric())
        .any(|w| rules.lexicon.iter().any(|c| c.eq_ignore_ascii_case(w)));
    if has_color {
        Ok(())
    } else {
        Err(InvalidCaption::NoColorWord)
    }
}

pub trait CaptionerClient: Sync {
    fn name(&self) -> &str;
    fn caption(&self, crop: &RgbImage) -> std::result::Result<String, String>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub masks: MaskSet,
    pub labels: Vec<String>,
}

pub trait DetectorClient: Sync {
    fn name(&self) -> &str;
    fn detect(&self, image: &RgbImage) -> Result<Detection>;
}

fn is_gray(p: &Rgb<u8>) -> bool {
    p[0] == p[1] && p[1] == p[2]
}

/// Colors present in `image`, in palette order, ignoring exact grays.
fn palette_colors(image: &RgbImage, min_pixels: usize) -> Vec<&'static str> {
    let mut counts = [0usize; PALETTE.len()];
    for p in image.pixels().filter(|p| !is_gray(p)) {
        counts[nearest_palette(px_f64(p))] += 1;
    }
    PALETTE.iter().zip(counts).filter(|(_, n)| *n >= min_pixels).map(|(c, _)| c.name).collect()
}

/// Names the palette colors it sees: "a red object" for crops, "a gray
/// background with red and blue objects" for whole images.
#[derive(Debug, Default)]
pub struct PaletteCaptioner {
    calls: AtomicUsize,
}

impl PaletteCaptioner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn describe(image: &RgbImage) -> std::result::Result<String, String> {
        let colors = palette_colors(image, 1);
        match colors.as_slice() {
            [] => Err("no colored pixels".into()),
            [one] => Ok(format!("a {one} object")),
            [init @ .., last] => Ok(format!("a gray background with {} and {last} objects", init.join(", "))),
        }
    }
}

impl CaptionerClient for PaletteCaptioner {
    fn name(&self) -> &str {
        "palette"
    }

    fn caption(&self, crop: &RgbImage) -> std::result::Result<String, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Self::describe(crop)
    }
}

/// Always answers with the same text, e.g. a refusal.
#[derive(Debug)]
pub struct FixedCaptioner {
    text: String,
    calls: AtomicUsize,
}

impl FixedCaptioner {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into(), calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl CaptionerClient for FixedCaptioner {
    fn name(&self) -> &str {
        "fixed"
    }

    fn caption(&self, _crop: &RgbImage) -> std::result::Result<String, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.text.clone())
    }
}

/// Always fails.
#[derive(Debug, Default)]
pub struct FailingCaptioner {
    calls: AtomicUsize,
}

impl FailingCaptioner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl CaptionerClient for FailingCaptioner {
    fn name(&self) -> &str {
        "failing"
    }

    fn caption(&self, _crop: &RgbImage) -> std::result::Result<String, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Err("captioner unavailable".into())
    }
}

/// Palette captioner that fails on crops narrower or shorter than `min_side`.
#[derive(Debug)]
pub struct SmallCropFailCaptioner {
    pub min_side: u32,
    calls: AtomicUsize,
}

impl SmallCropFailCaptioner {
    pub fn new(min_side: u32) -> Self {
        Self { min_side, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl CaptionerClient for SmallCropFailCaptioner {
    fn name(&self) -> &str {
        "small-crop-fail"
    }

    fn caption(&self, crop: &RgbImage) -> std::result::Result<String, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if crop.width() < self.min_side || crop.height() < self.min_side {
            return Err(format!("crop {}×{} too small", crop.width(), crop.height()));
        }
        PaletteCaptioner::describe(crop)
    }
}

/// Returns fixed masks and labels regardless of the image.
#[derive(Clone, Debug)]
pub struct GroundTruthDetector {
    detection: Detection,
}

impl GroundTruthDetector {
    pub fn new(masks: MaskSet, labels: Vec<String>) -> Result<Self> {
        if labels.len() != masks.len() {
            return Err(Error::dims(format!("{} labels", masks.len()), labels.len()));
        }
        Ok(Self { detection: Detection { masks, labels } })
    }

    pub fn from_annotation(a: &AnnotatedImage) -> Result<Self> {
        Self::new(a.mask_set()?, a.texts())
    }
}

impl DetectorClient for GroundTruthDetector {
    fn name(&self) -> &str {
        "ground-truth"
    }

    fn detect(&self, image: &RgbImage) -> Result<Detection> {
        let m = &self.detection.masks;
        if (m.width(), m.height()) != (image.width() as usize, image.height() as usize) {
            return Err(Error::Detector(format!(
                "masks are {}×{}, image is {}×{}",
                m.width(),
                m.height(),
                image.width(),
                image.height()
            )));
        }
        Ok(self.detection.clone())
    }
}

/// 4-connected components of non-gray pixels, in raster order of their
/// first pixel.
#[derive(Clone, Copy, Debug, Default)]
pub struct ColorRegionDetector {
    pub min_pixels: usize,
}

impl DetectorClient for ColorRegionDetector {
    fn name(&self) -> &str {
        "color-regions"
    }

    fn detect(&self, image: &RgbImage) -> Result<Detection> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let colored: Vec<bool> = image.pixels().map(|p| !is_gray(p)).collect();
        let mut label = vec![usize::MAX; w * h];
        let mut masks = Vec::new();
        for start in 0..w * h {
            if !colored[start] || label[start] != usize::MAX {
                continue;
            }
            let id = masks.len();
            let mut stack = vec![start];
            let mut members = Vec::new();
            label[start] = id;
            while let Some(i) = stack.pop() {
                members.push(i);
                let (x, y) = (i % w, i / w);
                let mut push = |j: usize| {
                    if colored[j] && label[j] == usize::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
            }
            masks.push(InstanceMask::from_indices(w, h, &members)?);
        }
        masks.retain(|m| m.count() >= self.min_pixels.max(1));
        let labels = vec!["object".to_string(); masks.len()];
        Ok(Detection { masks: MaskSet::new(w, h, masks)?, labels })
    }
}

/// Detector that always errors.
#[derive(Clone, Copy, Debug, Default)]
pub struct FailingDetector;

impl DetectorClient for FailingDetector {
    fn name(&self) -> &str {
        "failing"
    }

    fn detect(&self, _image: &RgbImage) -> Result<Detection> {
        Err(Error::Detector("detector unavailable".into()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    Primary,
    Fallback,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextProvenance {
    pub source: TextSource,
    /// Why the primary (and, for `None`, the fallback) answer was rejected.
    pub reasons: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationProvenance {
    pub image_id: String,
    pub detector: String,
    pub global: TextProvenance,
    pub instances: Vec<TextProvenance>,
}

impl AnnotationProvenance {
    pub fn count(&self, source: TextSource) -> usize {
        self.instances.iter().filter(|p| p.source == source).count()
    }
}

fn caption_with_fallback(
    crop: &RgbImage,
    primary: &dyn CaptionerClient,
    fallback: &dyn CaptionerClient,
    rules: &CaptionRules,
) -> (String, TextProvenance) {
    let mut reasons = Vec::new();
    for (client, source) in [(primary, TextSource::Primary), (fallback, TextSource::Fallback)] {
        match client.caption(crop) {
            Ok(text) => match validate_caption(&text, rules) {
                Ok(()) => return (text.trim().to_string(), TextProvenance { source, reasons }),
                Err(e) => reasons.push(format!("{}: {e}", client.name())),
            },
            Err(e) => reasons.push(format!("{}: failed: {e}", client.name())),
        }
    }
    (String::new(), TextProvenance { source: TextSource::None, reasons })
}

/// Detects instances and captions the whole image and every crop. Instances
/// whose captions fail on both clients keep an empty text; the provenance
/// records why.
pub fn annotate_image(
    image_id: &str,
    image: &RgbImage,
    detector: &dyn DetectorClient,
    primary: &dyn CaptionerClient,
    fallback: &dyn CaptionerClient,
    rules: &CaptionRules,
) -> Result<(AnnotatedImage, AnnotationProvenance)> {
    let det = detector.detect(image)?;
    let (global_text, global) = caption_with_fallback(image, primary, fallback, rules);
    let mut instances = Vec::with_capacity(det.masks.len());
    let mut provenance = Vec::with_capacity(det.masks.len());
    for (k, mask) in det.masks.masks().iter().enumerate() {
        let crop = crop_instance(image, mask)?;
        let (text, prov) = caption_with_fallback(&crop, primary, fallback, rules);
        instances.push(InstanceAnnotation::new(k, text, mask));
        provenance.push(prov);
    }
    let annotated = AnnotatedImage {
        image_id: image_id.to_string(),
        width: image.width() as usize,
        height: image.height() as usize,
        global_text,
        instances,
    };
    let prov = AnnotationProvenance {
        image_id: image_id.to_string(),
        detector: detector.name().to_string(),
        global,
        instances: provenance,
    };
    Ok((annotated, prov))
}

/// Annotates images in parallel; output order follows input order.
pub fn annotate_all(
    images: &[(String, RgbImage)],
    detector: &dyn DetectorClient,
    primary: &dyn CaptionerClient,
    fallback: &dyn CaptionerClient,
    rules: &CaptionRules,
) -> Result<Vec<(AnnotatedImage, AnnotationProvenance)>> {
    images.par_iter().map(|(id, img)| annotate_image(id, img, detector, primary, fallback, rules)).collect()
}
