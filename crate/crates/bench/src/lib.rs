//! Fixtures shared by the benchmarks.

use mtcolor_core::color::GrayField;
use mtcolor_core::denoiser::{Conditioning, Denoiser, DenoiserConfig};
use mtcolor_core::mask::{InstanceMask, MaskSet};
use mtcolor_core::params::ParamStore;
use mtcolor_core::rng::keyed_rng;
use rand::Rng;

/// `n` random axis-aligned rectangles on a `size × size` grid.
pub fn rect_masks(size: usize, n: usize, seed: u64) -> MaskSet {
    let mut rng = keyed_rng(seed, &[]);
    let masks = (0..n)
        .map(|_| {
            let (x0, y0) = (rng.random_range(0..size / 2), rng.random_range(0..size / 2));
            let (w, h) = (rng.random_range(2..=size / 2), rng.random_range(2..=size / 2));
            InstanceMask::from_fn(size, size, |x, y| (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y))
        })
        .collect();
    MaskSet::new(size, size, masks).expect("masks fit the grid")
}

/// Conditions with `n` instances over a gradient gray image.
pub fn conditioning(size: usize, n: usize) -> Conditioning {
    let gray = GrayField::new(size, size, (0..size * size).map(|i| (i % size) as f32 / size as f32).collect())
        .expect("gray fits");
    let colors = ["red", "blue", "green", "yellow", "purple", "orange"];
    let texts: Vec<String> = (0..n).map(|k| format!("a {} square", colors[k % colors.len()])).collect();
    let global = format!("a gray background with {}", texts.join(" and "));
    Conditioning::new(gray, &global, rect_masks(size, n, 7), texts).expect("valid conditions")
}

pub fn model(config: DenoiserConfig) -> (Denoiser, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let model = Denoiser::new(config, &mut store, &mut keyed_rng(1, &[])).expect("valid config");
    (model, store)
}

/// The small configuration used by the end-to-end benchmarks.
pub fn small_config() -> DenoiserConfig {
    DenoiserConfig { base_channels: 16, encoder_attention: false, ..Default::default() }
}
