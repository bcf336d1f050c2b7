//! Annotation records, the synthetic scene generator and the captioning
//! pipeline, plus on-disk dataset directories (`images/{id}.png` and
//! `annotations.jsonl`).

pub mod annotation;
pub mod pipeline;
pub mod synth;

use std::path::{Path, PathBuf};

use image::RgbImage;

pub use annotation::{from_jsonl, read_annotations, to_jsonl, write_annotations, AnnotatedImage, InstanceAnnotation};
pub use synth::{generate_synthetic, Scene, SynthConfig};

use crate::color::{load_png, save_png};
use crate::error::{Error, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const IMAGES_DIR: &str = "images";

pub fn image_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(IMAGES_DIR).join(format!("{image_id}.png"))
}

/// Writes images and the annotation file under `dir`.
pub fn save_dataset(dir: &Path, items: &[(RgbImage, AnnotatedImage)]) -> Result<()> {
    std::fs::create_dir_all(dir.join(IMAGES_DIR))?;
    for (img, a) in items {
        if a.image_id.is_empty() || a.image_id.contains(['/', '\\']) || a.image_id.starts_with('.') {
            return Err(Error::InvalidInput(format!("image id {:?} is not a plain file name", a.image_id)));
        }
        save_png(img, &image_path(dir, &a.image_id))?;
    }
    let records: Vec<AnnotatedImage> = items.iter().map(|(_, a)| a.clone()).collect();
    write_annotations(&records, &dir.join(ANNOTATIONS_FILE))
}

/// Loads every annotated image in `dir`, checking image sizes against records.
pub fn load_dataset(dir: &Path) -> Result<Vec<(RgbImage, AnnotatedImage)>> {
    let records = read_annotations(&dir.join(ANNOTATIONS_FILE))?;
    records
        .into_iter()
        .map(|a| {
            let img = load_png(&image_path(dir, &a.image_id))?;
            if (img.width() as usize, img.height() as usize) != (a.width, a.height) {
                return Err(Error::dims(
                    format!("{}×{} for {}", a.width, a.height, a.image_id),
                    format!("{}×{}", img.width(), img.height()),
                ));
            }
            Ok((img, a))
        })
        .collect()
}
