//! Patchification and random masking.
//!
//! Patch vectors are flattened row-major over
//! `(patch_row, patch_col, pixel_row, pixel_col, channel)`, so patch `i` of an
//! `H×W` image covers grid cell `(i / (W/P), i % (W/P))`.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Images `[B×H×W×C]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageBatch {
    pub fn new(batch: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != batch * height * width * channels {
            return Err(Error::shape(format!(
                "image batch {batch}x{height}x{width}x{channels} needs {} values, got {}",
                batch * height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            batch,
            height,
            width,
            channels,
            data,
        })
    }

    /// Stacks equally sized `H×W×C` images.
    pub fn stack(images: &[&[f32]], height: usize, width: usize, channels: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(images.len() * height * width * channels);
        for im in images {
            data.extend_from_slice(im);
        }
        Self::new(images.len(), height, width, channels, data)
    }
}

/// Patch sequences `[B×N×(P·P·C)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub batch: usize,
    /// Patches per image.
    pub tokens: usize,
    pub patch: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PatchBatch {
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn patch_vec(&self, b: usize, i: usize) -> &[f32] {
        let d = self.patch_dim();
        let start = (b * self.tokens + i) * d;
        &self.data[start..start + d]
    }
}

pub fn patchify(images: &ImageBatch, patch: usize) -> Result<PatchBatch> {
    let (h, w, c) = (images.height, images.width, images.channels);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} is not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let tokens = gh * gw;
    let mut data = Vec::with_capacity(images.data.len());
    for b in 0..images.batch {
        let img = &images.data[b * h * w * c..(b + 1) * h * w * c];
        for pr in 0..gh {
            for pc in 0..gw {
                for y in 0..patch {
                    let row = pr * patch + y;
                    let start = (row * w + pc * patch) * c;
                    data.extend_from_slice(&img[start..start + patch * c]);
                }
            }
        }
    }
    Ok(PatchBatch {
        batch: images.batch,
        tokens,
        patch,
        channels: c,
        data,
    })
}

/// Inverse of [`patchify`] for square patch grids of the given image size.
pub fn unpatchify(patches: &PatchBatch, height: usize, width: usize) -> Result<ImageBatch> {
    let (p, c) = (patches.patch, patches.channels);
    if p == 0 || height % p != 0 || width % p != 0 || (height / p) * (width / p) != patches.tokens {
        return Err(Error::shape(format!(
            "{} patches of side {p} do not tile a {height}x{width} image",
            patches.tokens
        )));
    }
    let gw = width / p;
    let mut data = vec![0.0f32; patches.batch * height * width * c];
    for b in 0..patches.batch {
        let img = &mut data[b * height * width * c..(b + 1) * height * width * c];
        for i in 0..patches.tokens {
            let (pr, pc) = (i / gw, i % gw);
            let v = patches.patch_vec(b, i);
            for y in 0..p {
                let start = ((pr * p + y) * width + pc * p) * c;
                img[start..start + p * c].copy_from_slice(&v[y * p * c..(y + 1) * p * c]);
            }
        }
    }
    Ok(ImageBatch {
        batch: patches.batch,
        height,
        width,
        channels: c,
        data,
    })
}

/// Binary mask over `N` patches: `true` is visible, `false` is masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVector {
    pub visible: Vec<bool>,
    /// Set when `round(N·r)` had to be clamped into `[1, N-1]`.
    pub clamped: bool,
}

impl MaskVector {
    pub fn from_bits(bits: &[u8]) -> Self {
        Self {
            visible: bits.iter().map(|&b| b != 0).collect(),
            clamped: false,
        }
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.visible.iter().filter(|v| !**v).count()
    }

    pub fn visible_count(&self) -> usize {
        self.len() - self.masked_count()
    }
}

/// `round_half_up(N·r)` clamped to `[1, N-1]`; the flag reports clamping.
pub fn masked_count(n: usize, ratio: f64) -> (usize, bool) {
    let raw = (n as f64 * ratio + 0.5).floor() as usize;
    let clamped = raw.clamp(1, n.saturating_sub(1).max(1));
    (clamped, clamped != raw)
}

fn check_mask_args(n: usize, ratio: f64) -> Result<()> {
    if n < 2 {
        return Err(Error::Config(format!("masking needs at least 2 patches, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} must lie in (0, 1)")));
    }
    Ok(())
}

/// Draws a mask from an existing generator.
pub fn sample_mask_with(rng: &mut Rng, n: usize, ratio: f64) -> Result<MaskVector> {
    check_mask_args(n, ratio)?;
    let (count, clamped) = masked_count(n, ratio);
    if clamped {
        log::warn!("mask count for N={n}, r={ratio} clamped to {count}");
    }
    let mut visible = vec![true; n];
    for i in index::sample(rng, n, count) {
        visible[i] = false;
    }
    Ok(MaskVector { visible, clamped })
}

/// Uniform mask with exactly `round(N·r)` masked positions, deterministic in `seed`.
pub fn sample_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskVector> {
    let mut rng = rng::seeded(seed, rng::stream::MASKS);
    sample_mask_with(&mut rng, n, ratio)
}

/// One independent mask per image.
pub fn sample_batch_masks(rng: &mut Rng, batch: usize, n: usize, ratio: f64) -> Result<Vec<MaskVector>> {
    (0..batch).map(|_| sample_mask_with(rng, n, ratio)).collect()
}

/// Visible and masked patch indices of one image, each ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSplit {
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
}

impl MaskSplit {
    pub fn from_mask(mask: &MaskVector) -> Self {
        let (vis, msk): (Vec<usize>, Vec<usize>) = (0..mask.len()).partition(|&i| mask.visible[i]);
        Self {
            visible_idx: vis,
            masked_idx: msk,
        }
    }

    pub fn tokens(&self) -> usize {
        self.visible_idx.len() + self.masked_idx.len()
    }

    /// Checks the two index sets partition `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.visible_idx.iter().chain(&self.masked_idx) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::shape(format!(
                    "index map collision or out-of-range index {i} for {n} tokens"
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::shape(format!("index maps do not cover all {n} tokens")));
        }
        Ok(())
    }
}

/// Patches partitioned by per-image masks.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPatches {
    pub visible: PatchBatch,
    pub masked: PatchBatch,
    pub maps: Vec<MaskSplit>,
}

fn gather(patches: &PatchBatch, rows: &[&[usize]]) -> PatchBatch {
    let tokens = rows.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(patches.batch * tokens * patches.patch_dim());
    for (b, idx) in rows.iter().enumerate() {
        for &i in idx.iter() {
            data.extend_from_slice(patches.patch_vec(b, i));
        }
    }
    PatchBatch {
        batch: patches.batch,
        tokens,
        patch: patches.patch,
        channels: patches.channels,
        data,
    }
}

/// Splits each image's patches into visible and masked sets.
///
/// All masks must have the same visible count so the visible set stays a
/// rectangular batch.
pub fn split_by_mask(patches: &PatchBatch, masks: &[MaskVector]) -> Result<SplitPatches> {
    if masks.len() != patches.batch {
        return Err(Error::shape(format!(
            "{} masks for a batch of {}",
            masks.len(),
            patches.batch
        )));
    }
    if let Some(m) = masks.iter().find(|m| m.len() != patches.tokens) {
        return Err(Error::shape(format!(
            "mask of length {} for {} patches",
            m.len(),
            patches.tokens
        )));
    }
    let maps: Vec<MaskSplit> = masks.iter().map(MaskSplit::from_mask).collect();
    if let Some(first) = maps.first() {
        if maps.iter().any(|m| m.visible_idx.len() != first.visible_idx.len()) {
            return Err(Error::shape("masks in a batch must hide the same number of patches"));
        }
    }
    let vis: Vec<&[usize]> = maps.iter().map(|m| m.visible_idx.as_slice()).collect();
    let msk: Vec<&[usize]> = maps.iter().map(|m| m.masked_idx.as_slice()).collect();
    Ok(SplitPatches {
        visible: gather(patches, &vis),
        masked: gather(patches, &msk),
        maps,
    })
}

/// Restores original patch order from a split.
pub fn reassemble(split: &SplitPatches) -> Result<PatchBatch> {
    let v = &split.visible;
    let m = &split.masked;
    let d = v.patch_dim();
    let n = v.tokens + m.tokens;
    let mut data = vec![0.0f32; v.batch * n * d];
    for (b, map) in split.maps.iter().enumerate() {
        map.validate(n)?;
        for (r, &i) in map.visible_idx.iter().enumerate() {
            data[(b * n + i) * d..(b * n + i + 1) * d].copy_from_slice(v.patch_vec(b, r));
        }
        for (r, &i) in map.masked_idx.iter().enumerate() {
            data[(b * n + i) * d..(b * n + i + 1) * d].copy_from_slice(m.patch_vec(b, r));
        }
    }
    Ok(PatchBatch {
        batch: v.batch,
        tokens: n,
        patch: v.patch,
        channels: v.channels,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_counts() {
        let img = ImageBatch::new(1, 32, 32, 3, vec![0.25; 32 * 32 * 3]).unwrap();
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.tokens, 64);
        assert_eq!(p.patch_dim(), 48);
    }

    #[test]
    fn constant_image_gives_constant_patches() {
        let img = ImageBatch::new(1, 8, 8, 1, vec![0.5; 64]).unwrap();
        let p = patchify(&img, 4).unwrap();
        assert!(p.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn indivisible_is_shape_error() {
        let img = ImageBatch::new(1, 10, 8, 1, vec![0.0; 80]).unwrap();
        assert!(matches!(patchify(&img, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn flattening_order_is_row_major() {
        // 4x4 single-channel image with value = pixel index, P=2.
        let data: Vec<f32> = (0..16).map(|i| i as f32 / 16.0).collect();
        let img = ImageBatch::new(1, 4, 4, 1, data).unwrap();
        let p = patchify(&img, 2).unwrap();
        let idx = |v: f32| (v * 16.0).round() as usize;
        let first: Vec<usize> = p.patch_vec(0, 0).iter().map(|&v| idx(v)).collect();
        let second: Vec<usize> = p.patch_vec(0, 1).iter().map(|&v| idx(v)).collect();
        let third: Vec<usize> = p.patch_vec(0, 2).iter().map(|&v| idx(v)).collect();
        assert_eq!(first, vec![0, 1, 4, 5]);
        assert_eq!(second, vec![2, 3, 6, 7]);
        assert_eq!(third, vec![8, 9, 12, 13]);
    }

    #[test]
    fn mask_counts_and_clamp() {
        let m = sample_mask(64, 0.75, 3).unwrap();
        assert_eq!((m.masked_count(), m.visible_count()), (48, 16));
        let m = sample_mask(2, 0.99, 3).unwrap();
        assert_eq!(m.masked_count(), 1);
        assert!(m.clamped);
        let m = sample_mask(10, 0.01, 3).unwrap();
        assert_eq!(m.masked_count(), 1);
        assert!(m.clamped);
    }

    #[test]
    fn round_half_up() {
        assert_eq!(masked_count(10, 0.25), (3, false));
        assert_eq!(masked_count(10, 0.35), (4, false));
    }

    #[test]
    fn mask_is_seed_deterministic() {
        assert_eq!(sample_mask(16, 0.5, 7).unwrap(), sample_mask(16, 0.5, 7).unwrap());
    }

    #[test]
    fn invalid_mask_args() {
        assert!(sample_mask(1, 0.5, 0).is_err());
        assert!(sample_mask(8, 0.0, 0).is_err());
        assert!(sample_mask(8, 1.0, 0).is_err());
    }

    fn labeled(n: usize) -> PatchBatch {
        PatchBatch {
            batch: 1,
            tokens: n,
            patch: 1,
            channels: 1,
            data: (0..n).map(|i| i as f32).collect(),
        }
    }

    #[test]
    fn split_known_mask() {
        let p = labeled(4);
        let s = split_by_mask(&p, &[MaskVector::from_bits(&[1, 0, 1, 0])]).unwrap();
        assert_eq!(s.visible.data, vec![0.0, 2.0]);
        assert_eq!(s.masked.data, vec![1.0, 3.0]);
        assert_eq!(s.maps[0].visible_idx, vec![0, 2]);
        assert_eq!(reassemble(&s).unwrap(), p);
    }

    #[test]
    fn all_visible_mask_is_legal() {
        let p = labeled(4);
        let s = split_by_mask(&p, &[MaskVector::from_bits(&[1, 1, 1, 1])]).unwrap();
        assert_eq!(s.visible, p);
        assert_eq!(s.masked.tokens, 0);
    }

    #[test]
    fn split_length_mismatch() {
        let p = labeled(4);
        assert!(matches!(
            split_by_mask(&p, &[MaskVector::from_bits(&[1, 0, 1])]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn collision_detected() {
        let m = MaskSplit {
            visible_idx: vec![0, 1],
            masked_idx: vec![1, 2],
        };
        assert!(m.validate(3).is_err());
    }
}
