//! Datasets, image ingestion, checkpoints and config files.

pub mod checkpoint;
pub mod config;
pub mod ppm;
pub mod synthetic;

pub use checkpoint::{ArrayData, Checkpoint, NamedArray};
pub use config::ConfigFile;
pub use ppm::{load_images, parse_ppm, write_ppm};
pub use synthetic::{generate_synthetic, SyntheticPair, SyntheticSpec};

use crate::error::{Error, Result};
use crate::patch::ImageBatch;

/// Square `side×side×channels` images with class labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub side: usize,
    pub channels: usize,
    /// Images concatenated, each `side·side·channels` values in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(side: usize, channels: usize, pixels: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if pixels.len() != side * side * channels * labels.len() {
            return Err(Error::Data(format!(
                "{} pixel values for {} images of {side}x{side}x{channels}",
                pixels.len(),
                labels.len()
            )));
        }
        Ok(Self {
            side,
            channels,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.side * self.side * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Number of classes, taken as `max label + 1`.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Sample indices per class, each list ascending.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn batch(&self, indices: &[usize]) -> Result<ImageBatch> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Data(format!("sample {bad} out of range for {} images", self.len())));
        }
        let imgs: Vec<&[f32]> = indices.iter().map(|&i| self.image(i)).collect();
        ImageBatch::stack(&imgs, self.side, self.side, self.channels)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let b = self.batch(indices)?;
        Self::new(
            self.side,
            self.channels,
            b.data,
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}
