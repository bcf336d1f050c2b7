//! Seeded synthetic scenes: flat palette-colored shapes on gray backgrounds
//! with exact masks and "a {color} {shape}" texts.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::PALETTE;
use crate::data::annotation::{AnnotatedImage, InstanceAnnotation};
use crate::error::{Error, Result};
use crate::mask::InstanceMask;
use crate::text::SHAPE_WORDS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Inclusive range of background gray levels.
    pub background: [u8; 2],
    pub min_radius: usize,
    pub max_radius: usize,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            size: 32,
            min_shapes: 1,
            max_shapes: 4,
            background: [70, 200],
            min_radius: 4,
            max_radius: 8,
            seed: 0,
            id_prefix: "synth".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!("shape count range {}..={}", self.min_shapes, self.max_shapes)));
        }
        if self.min_radius < 2 || self.min_radius > self.max_radius || 2 * self.max_radius + 2 > self.size {
            return Err(Error::Config(format!(
                "radius range {}..={} does not fit a {} image",
                self.min_radius, self.max_radius, self.size
            )));
        }
        if self.background[0] > self.background[1] {
            return Err(Error::Config("background range reversed".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Diamond];

    pub fn name(self) -> &'static str {
        SHAPE_WORDS[self as usize]
    }

    /// Whether pixel center `(px, py)` lies in the shape centered at `(cx, cy)`.
    fn contains(self, px: f64, py: f64, cx: f64, cy: f64, r: f64) -> bool {
        let (dx, dy) = (px - cx, py - cy);
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            // Apex up, base at cy + r; half-width grows linearly downward.
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
        }
    }
}

/// One generated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub annotation: AnnotatedImage,
    /// Palette index per instance.
    pub colors: Vec<usize>,
}

fn shade_word(level: u8) -> &'static str {
    match level {
        0..=100 => "dark ",
        160..=255 => "light ",
        _ => "",
    }
}

/// "a light gray background with a red circle, a blue square and ..."
pub fn global_text(background: u8, instance_texts: &[String]) -> String {
    let bg = format!("a {}gray background", shade_word(background));
    match instance_texts {
        [] => bg,
        [one] => format!("{bg} with {one}"),
        [init @ .., last] => format!("{bg} with {} and {last}", init.join(", ")),
    }
}

/// Generates scene `index` of the stream seeded by `cfg.seed`. Each scene
/// has its own RNG stream, so scenes can be produced independently.
pub fn generate_scene(cfg: &SynthConfig, index: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let n = cfg.size;
    let bg = rng.random_range(cfg.background[0]..=cfg.background[1]);
    let target = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut occupied = vec![false; n * n];
    let mut image = RgbImage::from_pixel(n as u32, n as u32, Rgb([bg, bg, bg]));
    let mut instances = Vec::new();
    let mut colors = Vec::new();
    let mut attempts = 0;
    while instances.len() < target && attempts < 200 {
        attempts += 1;
        let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        let r = rng.random_range(cfg.min_radius..=cfg.max_radius);
        let cx = rng.random_range(r..n - r) as f64;
        let cy = rng.random_range(r..n - r) as f64;
        let mask = InstanceMask::from_fn(n, n, |x, y| shape.contains(x as f64 + 0.5, y as f64 + 0.5, cx, cy, r as f64));
        if mask.count() < 6 {
            continue;
        }
        // Keep a one-pixel gap to every earlier instance.
        let clash = (0..n * n).any(|i| {
            mask.get(i) && {
                let (x, y) = (i % n, i / n);
                (y.saturating_sub(1)..=(y + 1).min(n - 1))
                    .any(|yy| (x.saturating_sub(1)..=(x + 1).min(n - 1)).any(|xx| occupied[yy * n + xx]))
            }
        });
        if clash {
            continue;
        }
        let color = rng.random_range(0..PALETTE.len());
        for i in 0..n * n {
            if mask.get(i) {
                occupied[i] = true;
                image.put_pixel((i % n) as u32, (i / n) as u32, Rgb(PALETTE[color].rgb));
            }
        }
        let text = format!("a {} {}", PALETTE[color].name, shape.name());
        instances.push(InstanceAnnotation::new(instances.len(), text, &mask));
        colors.push(color);
    }
    let texts: Vec<String> = instances.iter().map(|i| i.text.clone()).collect();
    let annotation = AnnotatedImage {
        image_id: format!("{}-{index:06}", cfg.id_prefix),
        width: n,
        height: n,
        global_text: global_text(bg, &texts),
        instances,
    };
    Scene { image, annotation, colors }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    Ok((0..cfg.count).map(|i| generate_scene(cfg, i)).collect())
}
