//! Representation analysis: linear CKA, cross-domain similarity of final
//! features, token disruption at one layer, and per-layer target probes.

use std::io::Write;

use log::warn;
use rand::seq::index;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::patch::patchify;
use crate::rng::{self, stream};
use crate::tensor::{ParamStore, Real};
use crate::trainer::{train, Regime, TrainConfig};
use crate::vit::{Disruption, VitEncoder};

/// Row-major `n×p` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        if rows < 2 {
            return Err(Error::Contract(format!("feature matrix needs at least 2 samples, got {rows}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature matrix contains non-finite values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged feature rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

fn centered_gram(x: &FeatureMatrix) -> Vec<f64> {
    let n = x.rows;
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    let means: Vec<f64> = (0..n).map(|i| k[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let grand = means.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] += grand - means[i] - means[j];
        }
    }
    k
}

/// Linear CKA between two representations of the same `n` samples.
///
/// Constant features have a zero centered Gram matrix; the result is then
/// defined as 0.
pub fn cka(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    if x.rows != y.rows {
        return Err(Error::shape(format!("CKA over {} vs {} samples", x.rows, y.rows)));
    }
    let kc = centered_gram(x);
    let lc = centered_gram(y);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let kk = dot(&kc, &kc);
    let ll = dot(&lc, &lc);
    let scale = |m: &FeatureMatrix| m.data.iter().map(|v| v * v).sum::<f64>().powi(2);
    if kk <= 1e-24 * scale(x) || ll <= 1e-24 * scale(y) || kk == 0.0 || ll == 0.0 {
        warn!("CKA of constant features is undefined; reporting 0");
        return Ok(0.0);
    }
    Ok(dot(&kc, &lc) / (kk.sqrt() * ll.sqrt()))
}

/// Pooled final features of `indices`, optionally disrupted.
pub fn final_features<T: Real>(
    store: &ParamStore<T>,
    encoder: &VitEncoder,
    data: &LabeledDataset,
    indices: &[usize],
    disrupt: Option<&Disruption>,
) -> Result<FeatureMatrix> {
    let mut out = Vec::with_capacity(indices.len() * encoder.config.dim);
    for chunk in indices.chunks(64) {
        let patches = patchify(&data.batch(chunk)?, encoder.config.patch)?;
        let f = encoder.pooled_features(store, &patches, disrupt.cloned())?;
        out.extend(f.data().iter().map(|v| v.as_f64()));
    }
    FeatureMatrix::new(indices.len(), encoder.config.dim, out)
}

/// Sample indices for an `n`-sample comparison; all when `len == n`.
pub fn subsample(len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Contract(format!("domain similarity needs n ≥ 2, got {n}")));
    }
    if len < n {
        return Err(Error::Data(format!("{n} samples requested from a set of {len}")));
    }
    if len == n {
        return Ok((0..n).collect());
    }
    let mut idx = index::sample(&mut rng::seeded(seed, stream::SUBSAMPLE), len, n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// CKA between `n` source and `n` target final features.
///
/// When both sets have the same size the same sample indices are used for
/// both, so a target that is a transformed copy of the source is compared
/// sample by sample.
pub fn domain_similarity<T: Real>(
    store: &ParamStore<T>,
    encoder: &VitEncoder,
    source: &LabeledDataset,
    target: &LabeledDataset,
    n: usize,
    seed: u64,
    disrupt: Option<&Disruption>,
) -> Result<f64> {
    let si = subsample(source.len(), n, seed)?;
    let ti = if target.len() == source.len() {
        si.clone()
    } else {
        subsample(target.len(), n, seed.wrapping_add(1))?
    };
    let x = final_features(store, encoder, source, &si, disrupt)?;
    let y = final_features(store, encoder, target, &ti, disrupt)?;
    cka(&x, &y)
}

/// Token positions zeroed for a disruption of `fraction` of `tokens`.
pub fn disruption_positions(tokens: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("disruption fraction {fraction} outside [0, 1]")));
    }
    let count = ((tokens as f64 * fraction) + 0.5).floor() as usize;
    let count = count.min(tokens);
    let mut idx = index::sample(&mut rng::seeded(seed, stream::DISRUPT), tokens, count).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

pub struct DisruptionSpec {
    pub layer: usize,
    pub fraction: f64,
    pub seed: u64,
}

/// Domain similarity after zeroing a fraction of token vectors at the output
/// of one block.
pub fn disruption_probe<T: Real>(
    store: &ParamStore<T>,
    encoder: &VitEncoder,
    source: &LabeledDataset,
    target: &LabeledDataset,
    spec: &DisruptionSpec,
    n: usize,
) -> Result<f64> {
    let depth = encoder.config.depth;
    if spec.layer == 0 || spec.layer > depth {
        return Err(Error::Config(format!("disruption layer {} outside 1..={depth}", spec.layer)));
    }
    let zero = disruption_positions(encoder.config.num_patches(), spec.fraction, spec.seed)?;
    let d = Disruption {
        layer: spec.layer,
        zero_tokens: zero,
    };
    domain_similarity(store, encoder, source, target, n, spec.seed, Some(&d))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Disruption,
    LayerLoss,
    LayerSimilarity,
}

/// One value per probed layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    pub layers: Vec<usize>,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl ProbeReport {
    pub fn value(&self, layer: usize) -> Option<f64> {
        self.layers.iter().position(|&l| l == layer).map(|i| self.values[i])
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "layer,value")?;
        for (l, v) in self.layers.iter().zip(&self.values) {
            writeln!(w, "{l},{v}")?;
        }
        Ok(())
    }
}

/// Disruption at every layer `1..=L`, averaged over `seeds`.
#[allow(clippy::too_many_arguments)]
pub fn disruption_sweep<T: Real>(
    store: &ParamStore<T>,
    encoder: &VitEncoder,
    source: &LabeledDataset,
    target: &LabeledDataset,
    fraction: f64,
    n: usize,
    seeds: &[u64],
    exec: Execution,
) -> Result<ProbeReport> {
    let layers: Vec<usize> = (1..=encoder.config.depth).collect();
    let jobs: Vec<(usize, u64)> = layers.iter().flat_map(|&l| seeds.iter().map(move |&s| (l, s))).collect();
    let vals = exec::map_slice(exec, &jobs, |&(layer, seed)| {
        disruption_probe(store, encoder, source, target, &DisruptionSpec { layer, fraction, seed }, n)
    });
    let vals = vals.into_iter().collect::<Result<Vec<_>>>()?;
    let values = vals
        .chunks(seeds.len().max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    Ok(ProbeReport {
        kind: ProbeKind::Disruption,
        layers,
        values,
        seeds: seeds.to_vec(),
    })
}

/// Fraction of the log used for the final-loss window.
pub const FINAL_WINDOW: f64 = 0.1;

/// Trains one layer-target model per `(layer, seed)` with identical budgets
/// and reports mean final-window loss and mean post-training domain
/// similarity per layer.
#[allow(clippy::too_many_arguments)]
pub fn layer_target_probe(
    template: &TrainConfig,
    source: &LabeledDataset,
    target: &LabeledDataset,
    layers: &[usize],
    seeds: &[u64],
    n: usize,
    exec: Execution,
) -> Result<(ProbeReport, ProbeReport)> {
    if seeds.is_empty() || layers.is_empty() {
        return Err(Error::Config("layer probe needs at least one layer and one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = layers.iter().flat_map(|&l| seeds.iter().map(move |&s| (l, s))).collect();
    let results = exec::map_slice(exec, &jobs, |&(layer, seed)| -> Result<(f64, f64)> {
        let cfg = TrainConfig {
            regime: Regime::Layer(layer),
            seed,
            ..template.clone()
        };
        let out = train::<f32>(&cfg, source)?;
        let loss = out
            .final_window_loss(FINAL_WINDOW)
            .ok_or_else(|| Error::Config("layer probe needs at least one training step".into()))?;
        let sim = domain_similarity(&out.model.store, &out.model.encoder, source, target, n, seed, None)?;
        Ok((loss, sim))
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mean = |f: fn(&(f64, f64)) -> f64| -> Vec<f64> {
        results
            .chunks(seeds.len())
            .map(|c| c.iter().map(f).sum::<f64>() / c.len() as f64)
            .collect()
    };
    let report = |kind, values| ProbeReport {
        kind,
        layers: layers.to_vec(),
        values,
        seeds: seeds.to_vec(),
    };
    Ok((
        report(ProbeKind::LayerLoss, mean(|r| r.0)),
        report(ProbeKind::LayerSimilarity, mean(|r| r.1)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> FeatureMatrix {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        FeatureMatrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn self_similarity_is_one() {
        let x = mat(6, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.3 * j as f64);
        assert!((cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_features_give_zero() {
        let x = mat(5, 2, |_, _| 0.7);
        let y = mat(5, 2, |i, j| (i + j) as f64);
        assert_eq!(cka(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn sample_mismatch_is_shape_error() {
        let x = mat(4, 2, |i, _| i as f64);
        let y = mat(5, 2, |i, _| i as f64);
        assert!(matches!(cka(&x, &y), Err(Error::Shape(_))));
    }

    #[test]
    fn single_sample_rejected() {
        assert!(matches!(FeatureMatrix::new(1, 2, vec![0.0, 1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn disruption_counts_round_half_up() {
        assert_eq!(disruption_positions(64, 0.5, 1).unwrap().len(), 32);
        assert_eq!(disruption_positions(5, 0.5, 1).unwrap().len(), 3);
        assert!(disruption_positions(64, 0.0, 1).unwrap().is_empty());
        assert!(disruption_positions(64, 1.5, 1).is_err());
    }
}
