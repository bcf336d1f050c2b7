//! Binary instance masks and every attention mask derived from them.
//!
//! Pixels are flattened row-major: index `i = y * w + x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major flattening of an `h × w` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelIndex {
    pub width: usize,
    pub height: usize,
}

impl PixelIndex {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    #[inline]
    pub fn flatten(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn unflatten(&self, i: usize) -> (usize, usize) {
        (i % self.width, i / self.width)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One binary instance mask over an `height × width` grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InstanceMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl InstanceMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::dims(format!("{}×{} bits", height, width), bits.len()));
        }
        Ok(Self { width, height, bits })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![true; width * height] }
    }

    /// Builds a mask from a predicate over `(x, y)`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    /// Builds a mask with the given flat indices set.
    pub fn from_indices(width: usize, height: usize, on: &[usize]) -> Result<Self> {
        let mut bits = vec![false; width * height];
        for &i in on {
            *bits.get_mut(i).ok_or_else(|| {
                Error::InvalidArgument(format!("pixel {i} outside {height}×{width} grid"))
            })? = true;
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// A valid instance has at least one set pixel.
    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight bounding box `[x, y, w, h]`, `None` for an empty mask.
    pub fn bbox(&self) -> Option<[usize; 4]> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.at(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| [x0, y0, x1 - x0 + 1, y1 - y0 + 1])
    }

    /// Nearest-neighbour resize sampling source pixel centers.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!("resize target {height}×{width}")));
        }
        let (sw, sh) = (self.width, self.height);
        // src = floor((dst + 0.5) * src_len / dst_len), in integers.
        let sx: Vec<usize> = (0..width).map(|x| ((2 * x + 1) * sw) / (2 * width)).collect();
        let sy: Vec<usize> = (0..height).map(|y| ((2 * y + 1) * sh) / (2 * height)).collect();
        let mut bits = Vec::with_capacity(width * height);
        for &y in &sy {
            for &x in &sx {
                bits.push(self.bits[y * sw + x]);
            }
        }
        Ok(Self { width, height, bits })
    }

    pub fn and(&self, other: &Self) -> Self {
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect();
        Self { width: self.width, height: self.height, bits }
    }

    pub fn not(&self) -> Self {
        Self { width: self.width, height: self.height, bits: self.bits.iter().map(|b| !b).collect() }
    }
}

/// Ordered set of instance masks sharing one grid. Index `k` is the instance
/// identity shared with instance texts and instance features.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSet {
    width: usize,
    height: usize,
    masks: Vec<InstanceMask>,
}

impl MaskSet {
    pub fn new(width: usize, height: usize, masks: Vec<InstanceMask>) -> Result<Self> {
        for (k, m) in masks.iter().enumerate() {
            if m.width != width || m.height != height {
                return Err(Error::dims(
                    format!("mask {k} of {height}×{width}"),
                    format!("{}×{}", m.height, m.width),
                ));
            }
        }
        Ok(Self { width, height, masks })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, masks: Vec::new() }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[InstanceMask] {
        &self.masks
    }

    pub fn get(&self, k: usize) -> &InstanceMask {
        &self.masks[k]
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// The subset containing only instance `k`.
    pub fn single(&self, k: usize) -> Self {
        Self { width: self.width, height: self.height, masks: vec![self.masks[k].clone()] }
    }

    /// Lowest-index instance covering each pixel.
    pub fn first_match_labels(&self) -> Vec<Option<usize>> {
        (0..self.pixels()).map(|i| self.masks.iter().position(|m| m.get(i))).collect()
    }

    /// Each pixel kept only in the lowest-index mask that covers it.
    pub fn disjoint_first_match(&self) -> Self {
        let labels = self.first_match_labels();
        let masks = (0..self.len())
            .map(|k| InstanceMask {
                width: self.width,
                height: self.height,
                bits: labels.iter().map(|&l| l == Some(k)).collect(),
            })
            .collect();
        Self { width: self.width, height: self.height, masks }
    }

    fn covered(&self) -> Vec<bool> {
        (0..self.pixels()).map(|i| self.masks.iter().any(|m| m.get(i))).collect()
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        if self.height != h || self.width != w {
            return Err(Error::dims(format!("{h}×{w}"), format!("{}×{}", self.height, self.width)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundPolicy {
    /// Uncovered pixels attend only to themselves.
    SelfOnly,
    /// The uncovered region acts as one implicit instance.
    #[default]
    BackgroundRegion,
    /// Uncovered pixels attend everywhere.
    AllOnes,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapPolicy {
    #[default]
    Union,
    FirstMatch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub background: BackgroundPolicy,
    pub overlap: OverlapPolicy,
}

/// Boolean `rows × cols` matrix gating an attention map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::dims(format!("{rows}×{cols} bits"), bits.len()));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self { rows, cols, bits: vec![true; rows * cols] }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, bits: vec![false; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.bits[i * n + i] = true;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Self { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// The first `n` rows.
    pub fn top_rows(&self, n: usize) -> Self {
        assert!(n <= self.rows);
        Self { rows: n, cols: self.cols, bits: self.bits[..n * self.cols].to_vec() }
    }

    /// Sub-block `rows r0..r0+nr`, `cols c0..c0+nc`.
    pub fn block(&self, r0: usize, nr: usize, c0: usize, nc: usize) -> Self {
        Self::from_fn(nr, nc, |i, j| self.get(r0 + i, c0 + j))
    }
}

/// Resizes every mask with nearest-neighbour sampling at pixel centers.
pub fn resize_mask_set(m: &MaskSet, h: usize, w: usize) -> Result<MaskSet> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("resize target {h}×{w}")));
    }
    let masks = m.masks.iter().map(|mk| mk.resize(h, w)).collect::<Result<Vec<_>>>()?;
    Ok(MaskSet { width: w, height: h, masks })
}

/// Per-query key support: the union (or first) of the instance masks that
/// contain the query pixel, with the background policy for uncovered pixels.
/// An empty set gives all-ones.
pub fn build_pixel_attention_mask(
    m: &MaskSet,
    h: usize,
    w: usize,
    policy: MaskPolicy,
) -> Result<AttentionMask> {
    m.check_dims(h, w)?;
    let l = h * w;
    if m.is_empty() {
        return Ok(AttentionMask::ones(l, l));
    }
    let covered = m.covered();
    let mut bits = vec![false; l * l];
    for i in 0..l {
        let row = &mut bits[i * l..(i + 1) * l];
        let containing: Vec<&InstanceMask> = match policy.overlap {
            OverlapPolicy::Union => m.masks.iter().filter(|mk| mk.get(i)).collect(),
            OverlapPolicy::FirstMatch => m.masks.iter().find(|mk| mk.get(i)).into_iter().collect(),
        };
        if containing.is_empty() {
            match policy.background {
                BackgroundPolicy::SelfOnly => row[i] = true,
                BackgroundPolicy::BackgroundRegion => {
                    for (r, &c) in row.iter_mut().zip(&covered) {
                        *r = !c;
                    }
                }
                BackgroundPolicy::AllOnes => row.fill(true),
            }
        } else {
            for mk in containing {
                for (r, &b) in row.iter_mut().zip(&mk.bits) {
                    *r |= b;
                }
            }
        }
    }
    Ok(AttentionMask { rows: l, cols: l, bits })
}

/// Latent-to-latent mask: pixels attend to each other iff some instance
/// covers both. Symmetric under every policy; all-ones for an empty set.
pub fn build_self_mask(m: &MaskSet, h: usize, w: usize, policy: MaskPolicy) -> Result<AttentionMask> {
    m.check_dims(h, w)?;
    let l = h * w;
    if m.is_empty() {
        return Ok(AttentionMask::ones(l, l));
    }
    let covered = m.covered();
    let labels = m.first_match_labels();
    let n = m.len();
    let membership: Vec<Vec<bool>> =
        (0..l).map(|i| m.masks.iter().map(|mk| mk.get(i)).collect()).collect();
    let mut bits = vec![false; l * l];
    for i in 0..l {
        for j in 0..l {
            let v = if covered[i] && covered[j] {
                match policy.overlap {
                    OverlapPolicy::Union => (0..n).any(|k| membership[i][k] && membership[j][k]),
                    OverlapPolicy::FirstMatch => labels[i] == labels[j],
                }
            } else {
                match policy.background {
                    BackgroundPolicy::SelfOnly => i == j && !covered[i],
                    BackgroundPolicy::BackgroundRegion => !covered[i] && !covered[j],
                    BackgroundPolicy::AllOnes => true,
                }
            };
            bits[i * l + j] = v;
        }
    }
    Ok(AttentionMask { rows: l, cols: l, bits })
}

/// Latent-to-instance mask: entry `(i, k)` is set iff mask `k` covers pixel `i`.
pub fn build_latent_instance_mask(m: &MaskSet, h: usize, w: usize) -> Result<AttentionMask> {
    m.check_dims(h, w)?;
    let l = h * w;
    let n = m.len();
    Ok(AttentionMask::from_fn(l, n, |i, k| m.masks[k].get(i)))
}

/// Full `(l + n) × (l + n)` mask over the concatenated latent+instance
/// sequence: `[[self, cross], [crossᵀ, I_n]]`.
pub fn assemble_self_map_mask(
    self_mask: &AttentionMask,
    cross_mask: &AttentionMask,
    n: usize,
) -> Result<AttentionMask> {
    let l = self_mask.rows;
    if self_mask.cols != l {
        return Err(Error::ShapeMismatch(format!(
            "self mask must be square, got {}×{}",
            self_mask.rows, self_mask.cols
        )));
    }
    if cross_mask.rows != l || cross_mask.cols != n {
        return Err(Error::ShapeMismatch(format!(
            "cross mask must be {l}×{n}, got {}×{}",
            cross_mask.rows, cross_mask.cols
        )));
    }
    let size = l + n;
    Ok(AttentionMask::from_fn(size, size, |i, j| match (i < l, j < l) {
        (true, true) => self_mask.get(i, j),
        (true, false) => cross_mask.get(i, j - l),
        (false, true) => cross_mask.get(j, i - l),
        (false, false) => i == j,
    }))
}

/// `¬ ⋁ m_k`: pixels covered by no instance. All-ones for an empty set.
pub fn background_mask(m: &MaskSet) -> InstanceMask {
    let covered = m.covered();
    InstanceMask { width: m.width, height: m.height, bits: covered.iter().map(|c| !c).collect() }
}

/// Uncompressed row-major run-length code, zero-run first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub h: usize,
    pub w: usize,
    pub runs: Vec<u32>,
}

pub fn rle_encode(m: &InstanceMask) -> Rle {
    let mut runs = Vec::new();
    let mut current = false;
    let mut count = 0u32;
    for &b in &m.bits {
        if b != current {
            runs.push(count);
            count = 0;
            current = b;
        }
        count += 1;
    }
    runs.push(count);
    Rle { h: m.height, w: m.width, runs }
}

pub fn rle_decode(runs: &[u32], h: usize, w: usize) -> Result<InstanceMask> {
    let total: u64 = runs.iter().map(|&r| r as u64).sum();
    if total != (h * w) as u64 {
        return Err(Error::CorruptMask(format!("runs sum to {total}, expected {}", h * w)));
    }
    let mut bits = Vec::with_capacity(h * w);
    let mut value = false;
    for &r in runs {
        bits.extend(std::iter::repeat_n(value, r as usize));
        value = !value;
    }
    Ok(InstanceMask { width: w, height: h, bits })
}

impl Rle {
    pub fn decode(&self) -> Result<InstanceMask> {
        rle_decode(&self.runs, self.h, self.w)
    }
}
