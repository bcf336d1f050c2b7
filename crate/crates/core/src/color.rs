//! RGB/grayscale conversions, the named palette, and the luma-lock postprocess.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A named color with its canonical 8-bit RGB value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct NamedColor {
    pub name: &'static str,
    pub rgb: [u8; 3],
}

pub const PALETTE: [NamedColor; 8] = [
    NamedColor { name: "red", rgb: [230, 30, 30] },
    NamedColor { name: "green", rgb: [30, 200, 60] },
    NamedColor { name: "blue", rgb: [40, 80, 230] },
    NamedColor { name: "yellow", rgb: [235, 220, 40] },
    NamedColor { name: "purple", rgb: [150, 60, 200] },
    NamedColor { name: "orange", rgb: [240, 140, 30] },
    NamedColor { name: "cyan", rgb: [40, 200, 210] },
    NamedColor { name: "brown", rgb: [140, 90, 40] },
];

pub fn palette_index(word: &str) -> Option<usize> {
    PALETTE.iter().position(|c| c.name == word)
}

/// Index of the palette entry nearest (Euclidean RGB) to `rgb`.
pub fn nearest_palette(rgb: [f64; 3]) -> usize {
    let dist = |c: &NamedColor| (0..3).map(|k| (rgb[k] - c.rgb[k] as f64).powi(2)).sum::<f64>();
    let mut best = 0;
    for k in 1..PALETTE.len() {
        if dist(&PALETTE[k]) < dist(&PALETTE[best]) {
            best = k;
        }
    }
    best
}

/// BT.601 luma on the 0–255 scale.
pub fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Single-channel luminance in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayField {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayField {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dims(format!("{width}×{height} gray values"), data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("gray value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn constant(width: usize, height: usize, v: f32) -> Result<Self> {
        Self::new(width, height, vec![v; width * height])
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let data = img.pixels().map(|p| (luma(px_f64(p)) / 255.0) as f32).collect();
        Self { width: img.width() as usize, height: img.height() as usize, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Gray RGB rendering, each channel the rounded luminance.
    pub fn to_rgb(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = (self.get(x as usize, y as usize) * 255.0).round() as u8;
            Rgb([v, v, v])
        })
    }

    /// `1 × H × W` tensor of the raw `[0, 1]` values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::from_f64(v as f64)).collect();
        Tensor::from_vec(&[1, self.height, self.width], data).expect("gray field shape")
    }
}

pub fn px_f64(p: &Rgb<u8>) -> [f64; 3] {
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

/// `3 × H × W` tensor in `[-1, 1]`.
pub fn image_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = T::from_f64(p[c] as f64 / 127.5 - 1.0);
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("image shape")
}

/// Inverse of [`image_to_tensor`], clamping to the valid range.
pub fn tensor_to_image<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    if t.shape().len() != 3 || t.dim(0) != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3×H×W image tensor, got {:?}", t.shape())));
    }
    let (h, w) = (t.dim(1), t.dim(2));
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let mut px = [0u8; 3];
        for (c, v) in px.iter_mut().enumerate() {
            let f = (d[c * h * w + y as usize * w + x as usize].as_f64() + 1.0) * 127.5;
            *v = f.round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    }))
}

/// Replaces each pixel's BT.601 luma with the input gray, keeping its chroma
/// where possible. Chroma is shrunk toward gray until the pixel fits the RGB
/// gamut, so the output luma matches `gray` up to 8-bit rounding.
pub fn luma_lock(img: &RgbImage, gray: &GrayField) -> Result<RgbImage> {
    if img.width() as usize != gray.width() || img.height() as usize != gray.height() {
        return Err(Error::dims(
            format!("{}×{}", gray.width(), gray.height()),
            format!("{}×{}", img.width(), img.height()),
        ));
    }
    Ok(RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let rgb = px_f64(img.get_pixel(x, y));
        let y_in = luma(rgb);
        let target = gray.get(x as usize, y as usize) as f64 * 255.0;
        // Offsets from the pixel's own luma are pure chroma.
        let chroma = [rgb[0] - y_in, rgb[1] - y_in, rgb[2] - y_in];
        let mut s: f64 = 1.0;
        for c in chroma {
            if c > 0.0 {
                s = s.min((255.0 - target) / c);
            } else if c < 0.0 {
                s = s.min(target / -c);
            }
        }
        let s = s.max(0.0);
        let mut out = [0u8; 3];
        for k in 0..3 {
            out[k] = (target + s * chroma[k]).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    }))
}

pub fn load_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(img.to_rgb8())
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Writes a PNG atomically (temporary file then rename).
pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &encode_png(img)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_entries_are_their_own_nearest() {
        for (k, c) in PALETTE.iter().enumerate() {
            let rgb = [c.rgb[0] as f64, c.rgb[1] as f64, c.rgb[2] as f64];
            assert_eq!(nearest_palette(rgb), k);
        }
    }

    #[test]
    fn tensor_round_trip_is_exact() {
        let img = RgbImage::from_fn(5, 4, |x, y| Rgb([(x * 50) as u8, (y * 60) as u8, 7]));
        let t = image_to_tensor::<f32>(&img);
        assert_eq!(tensor_to_image(&t).unwrap(), img);
    }

    #[test]
    fn luma_lock_matches_gray() {
        let img = RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 16) as u8, 255 - (y * 16) as u8, ((x * y) % 256) as u8]));
        let gray = GrayField::new(16, 16, (0..256).map(|i| i as f32 / 255.0).collect()).unwrap();
        let out = luma_lock(&img, &gray).unwrap();
        for (x, y, p) in out.enumerate_pixels() {
            let d = (luma(px_f64(p)) - gray.get(x as usize, y as usize) as f64 * 255.0).abs();
            assert!(d <= 1.0, "pixel ({x},{y}) off by {d}");
        }
    }

    #[test]
    fn gray_range_is_checked() {
        assert!(GrayField::new(1, 1, vec![1.5]).is_err());
        assert!(GrayField::new(2, 1, vec![0.5]).is_err());
    }
}
