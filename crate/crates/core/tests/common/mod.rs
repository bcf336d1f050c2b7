//! Fixtures and oracles shared by several integration test targets.
#![allow(dead_code)]

pub mod grad;
pub mod masks;


use mtcolor_core::data::{AnnotatedImage, InstanceAnnotation};
use mtcolor_core::mask::InstanceMask;
use rand::Rng;

const WORDS: [&str; 10] = ["a", "red", "círculo", "青い", "square", "\"quoted\"", "tab\there", "émoji 🎨", "back\\slash", "line\nbreak"];

/// Random annotation record: random size, 0–4 instances with random masks
/// (possibly empty) and texts mixing unicode, quotes and control characters.
pub fn random_record<R: Rng>(rng: &mut R, index: usize) -> AnnotatedImage {
    let (w, h) = (rng.random_range(1..24), rng.random_range(1..24));
    let n = rng.random_range(0..5);
    let text = |rng: &mut R| {
        let k = rng.random_range(0..6);
        (0..k).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
    };
    let instances = (0..n)
        .map(|k| {
            let p = rng.random_range(0.0..1.0);
            let bits: Vec<bool> = (0..w * h).map(|_| rng.random_bool(p)).collect();
            let mask = InstanceMask::new(w, h, bits).unwrap();
            InstanceAnnotation::new(k, text(rng), &mask)
        })
        .collect();
    AnnotatedImage { image_id: format!("rec-{index}"), width: w, height: h, global_text: text(rng), instances }
}
