//! Two-domain synthetic shape dataset.
//!
//! Domain A draws one of five shapes at a random position and size on a
//! tinted background. Domain B keeps the exact geometry and shifts only
//! low-level statistics: permuted channels, a brightness offset and a smooth
//! sinusoidal color cast.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const CLASS_NAMES: [&str; 5] = ["square", "disk", "cross", "stripes", "ring"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub side: usize,
    pub background: f64,
    pub foreground: f64,
    pub channel_gains: [f64; 3],
    pub noise_std: f64,
    pub min_size: usize,
    pub max_size: usize,
    pub b_offset: f64,
    pub b_permutation: [usize; 3],
    pub b_cast_amplitude: f64,
    /// Whole periods of the cast across the image, so it averages to zero.
    pub b_cast_periods: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            per_class: 100,
            side: 32,
            background: 0.1,
            foreground: 0.55,
            channel_gains: [1.0, 0.75, 0.5],
            noise_std: 0.05,
            min_size: 10,
            max_size: 13,
            b_offset: 0.3,
            b_permutation: [2, 0, 1],
            b_cast_amplitude: 0.15,
            b_cast_periods: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be at least 1".into()));
        }
        if self.min_size == 0 || self.min_size > self.max_size || 2 * self.max_size + 3 > self.side {
            return Err(Error::Config(format!(
                "shape sizes {}..={} do not fit a {}-pixel image",
                self.min_size, self.max_size, self.side
            )));
        }
        let mut perm = self.b_permutation;
        perm.sort_unstable();
        if perm != [0, 1, 2] {
            return Err(Error::Config(format!("{:?} is not a channel permutation", self.b_permutation)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub a: LabeledDataset,
    pub b: LabeledDataset,
}

fn inside(class: usize, dx: f64, dy: f64, s: f64) -> bool {
    match class {
        0 => dx.abs() <= s && dy.abs() <= s,
        1 => dx * dx + dy * dy <= s * s,
        2 => {
            let w = (s / 3.0).max(1.0);
            (dx.abs() <= w && dy.abs() <= s) || (dy.abs() <= w && dx.abs() <= s)
        }
        3 => {
            let band = ((dx + dy + 2.0 * s) / 3.0).floor() as i64;
            dx.abs() <= s && dy.abs() <= s && band % 2 == 0
        }
        _ => {
            let r2 = dx * dx + dy * dy;
            r2 <= s * s && r2 >= (0.55 * s) * (0.55 * s)
        }
    }
}

fn render_a(spec: &SyntheticSpec, class: usize, rng: &mut Rng, noise: &Normal<f64>) -> Vec<f64> {
    let side = spec.side;
    let s = rng.random_range(spec.min_size..=spec.max_size);
    let lo = s + 1;
    let hi = side - s - 2;
    let cx = rng.random_range(lo..=hi) as f64;
    let cy = rng.random_range(lo..=hi) as f64;
    let s = s as f64;
    let mut out = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let on = inside(class, x as f64 - cx, y as f64 - cy, s);
            for c in 0..3 {
                let v = spec.background + if on { spec.foreground * spec.channel_gains[c] } else { 0.0 };
                out.push((v + noise.sample(rng)).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Domain-B transform of one domain-A image before clamping.
pub fn domain_b_unclamped(spec: &SyntheticSpec, a: &[f64], phases: [f64; 3]) -> Vec<f64> {
    let side = spec.side;
    let k = 2.0 * PI * spec.b_cast_periods as f64 / side as f64;
    let mut out = Vec::with_capacity(a.len());
    for y in 0..side {
        for x in 0..side {
            let px = &a[(y * side + x) * 3..(y * side + x) * 3 + 3];
            for c in 0..3 {
                let cast = spec.b_cast_amplitude * (k * (x + y) as f64 + phases[c]).sin();
                out.push(px[spec.b_permutation[c]] + spec.b_offset + cast);
            }
        }
    }
    out
}

/// Domain-A images and their domain-B counterparts, in class-major order.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticPair> {
    spec.validate()?;
    let mut rng = rng::seeded(seed, rng::stream::SYNTHETIC);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let n = CLASS_NAMES.len() * spec.per_class;
    let mut a_px = Vec::with_capacity(n * spec.side * spec.side * 3);
    let mut b_px = Vec::with_capacity(a_px.capacity());
    let mut labels = Vec::with_capacity(n);
    for class in 0..CLASS_NAMES.len() {
        for _ in 0..spec.per_class {
            let a = render_a(spec, class, &mut rng, &noise);
            let phases = [0, 1, 2].map(|_| rng.random_range(0.0..2.0 * PI));
            let b = domain_b_unclamped(spec, &a, phases);
            a_px.extend(a.iter().map(|&v| v as f32));
            b_px.extend(b.iter().map(|&v| v.clamp(0.0, 1.0) as f32));
            labels.push(class);
        }
    }
    Ok(SyntheticPair {
        a: LabeledDataset::new(spec.side, 3, a_px, labels.clone())?,
        b: LabeledDataset::new(spec.side, 3, b_px, labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            per_class: 4,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn class_counts_are_exact() {
        let pair = generate_synthetic(&small(), 3).unwrap();
        assert_eq!(pair.a.len(), 20);
        for idx in pair.a.by_class() {
            assert_eq!(idx.len(), 4);
        }
        assert_eq!(pair.a.labels, pair.b.labels);
    }

    #[test]
    fn values_in_unit_range() {
        let pair = generate_synthetic(&small(), 3).unwrap();
        assert!(pair.b.pixels.iter().chain(&pair.a.pixels).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn unclamped_offset_is_brightness_shift() {
        let spec = small();
        let mut rng = rng::seeded(5, 0);
        let noise = Normal::new(0.0, spec.noise_std).unwrap();
        let a = render_a(&spec, 2, &mut rng, &noise);
        let b = domain_b_unclamped(&spec, &a, [0.3, 1.0, 2.0]);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&b) - mean(&a) - 0.3).abs() < 0.02);
    }

    #[test]
    fn bad_permutation_rejected() {
        let spec = SyntheticSpec {
            b_permutation: [0, 0, 1],
            ..small()
        };
        assert!(generate_synthetic(&spec, 0).is_err());
    }
}
