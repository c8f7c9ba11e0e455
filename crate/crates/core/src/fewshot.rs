//! Episodic few-shot evaluation.
//!
//! Episodes draw `k` classes and `n` support plus `q` query samples per
//! class. Queries are classified by the nearest class prototype (mean support
//! embedding), or by a linear classifier trained on the support set of an
//! adapted weight copy.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::patch::patchify;
use crate::rng::{self, stream};
use crate::tensor::{Graph, OptimizerKind, OptimizerState, ParamGroup, ParamStore, Real};
use crate::vit::{ForwardOptions, Linear, VitEncoder};

/// One `k`-way `n`-shot task. Labels are relabeled to `0..k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub k: usize,
    pub n: usize,
    pub q: usize,
    /// Original class of each relabeled index.
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

/// Samples classes and per-class samples uniformly without replacement.
pub fn sample_episode(labels: &[usize], k: usize, n: usize, q: usize, seed: u64) -> Result<Episode> {
    if k == 0 || n == 0 {
        return Err(Error::Config("episodes need k ≥ 1 and n ≥ 1".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let eligible: Vec<usize> = (0..classes).filter(|&c| by_class[c].len() >= n + q).collect();
    if eligible.len() < k {
        let short: Vec<String> = (0..classes)
            .filter(|&c| !by_class[c].is_empty() && by_class[c].len() < n + q)
            .map(|c| format!("class {c} has {}", by_class[c].len()))
            .collect();
        let detail = if short.is_empty() { String::new() } else { format!(" ({})", short.join(", ")) };
        return Err(Error::Data(format!(
            "episode needs {k} classes with at least {} samples each, found {}{detail}",
            n + q,
            eligible.len()
        )));
    }
    let mut rng = rng::seeded(seed, stream::EPISODES);
    let chosen: Vec<usize> = index::sample(&mut rng, eligible.len(), k)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let mut ep = Episode {
        k,
        n,
        q,
        classes: chosen.clone(),
        support: Vec::with_capacity(k * n),
        support_labels: Vec::with_capacity(k * n),
        query: Vec::with_capacity(k * q),
        query_labels: Vec::with_capacity(k * q),
    };
    for (label, &c) in chosen.iter().enumerate() {
        let pool = &by_class[c];
        let picks = index::sample(&mut rng, pool.len(), n + q).into_vec();
        for (j, &p) in picks.iter().enumerate() {
            if j < n {
                ep.support.push(pool[p]);
                ep.support_labels.push(label);
            } else {
                ep.query.push(pool[p]);
                ep.query_labels.push(label);
            }
        }
    }
    Ok(ep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Distance {
    /// Squared Euclidean distance.
    #[default]
    Euclidean,
    /// `1 − cos`.
    Cosine,
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Distance::Euclidean),
            "cosine" => Ok(Distance::Cosine),
            other => Err(Error::Config(format!("unknown distance `{other}`"))),
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distance::Euclidean => "euclidean",
            Distance::Cosine => "cosine",
        })
    }
}

pub fn distance(kind: Distance, a: &[f64], b: &[f64]) -> f64 {
    match kind {
        Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        Distance::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let denom = na * nb;
            if denom == 0.0 {
                1.0
            } else {
                1.0 - dot / denom
            }
        }
    }
}

/// Class means of `support` rows.
pub fn prototypes(support: &[&[f64]], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = support.first().map_or(0, |s| s.len());
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (row, &l) in support.iter().zip(labels) {
        for (s, &v) in sums[l].iter_mut().zip(row.iter()) {
            *s += v;
        }
        counts[l] += 1;
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    sums
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Nearest-prototype predictions for each query row.
pub fn classify_prototype(
    support: &[&[f64]],
    support_labels: &[usize],
    k: usize,
    queries: &[&[f64]],
    kind: Distance,
) -> Vec<usize> {
    let protos = prototypes(support, support_labels, k);
    queries
        .iter()
        .map(|q| {
            let d: Vec<f64> = protos.iter().map(|p| distance(kind, p, q)).collect();
            argmin(&d)
        })
        .collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    100.0 * hits as f64 / truth.len() as f64
}

/// Precomputed embeddings, one row per dataset sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub rows: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        Self { rows }
    }

    /// Mean-pooled final encoder features of every sample, computed in chunks.
    pub fn from_encoder<T: Real>(
        store: &ParamStore<T>,
        encoder: &VitEncoder,
        data: &LabeledDataset,
        exec: Execution,
    ) -> Result<Self> {
        Ok(Self {
            rows: pooled_embeddings(store, encoder, data, &(0..data.len()).collect::<Vec<_>>(), exec)?,
        })
    }

    pub fn get(&self, idx: &[usize]) -> Vec<&[f64]> {
        idx.iter().map(|&i| self.rows[i].as_slice()).collect()
    }
}

const EMBED_CHUNK: usize = 50;

/// Mean-pooled final features of `indices` under frozen weights.
pub fn pooled_embeddings<T: Real>(
    store: &ParamStore<T>,
    encoder: &VitEncoder,
    data: &LabeledDataset,
    indices: &[usize],
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<&[usize]> = indices.chunks(EMBED_CHUNK).collect();
    let parts = exec::map_slice(exec, &chunks, |idx| -> Result<Vec<Vec<f64>>> {
        let patches = patchify(&data.batch(idx)?, encoder.config.patch)?;
        let feats = encoder.pooled_features(store, &patches, None)?;
        let d = encoder.config.dim;
        Ok(feats.data().chunks(d).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
    });
    let mut out = Vec::with_capacity(indices.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Support-set adaptation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub steps: usize,
    /// Classifier learning rate.
    pub lr: f64,
    /// Encoder learning rate; zero keeps the encoder fixed.
    pub backbone_lr: f64,
    pub momentum: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            lr: 1e-3,
            backbone_lr: 1e-7,
            momentum: 0.9,
        }
    }
}

/// Adapted weight copy plus the episode classifier.
#[derive(Debug, Clone)]
pub struct Adapted<T> {
    pub store: ParamStore<T>,
    pub classifier: Linear,
    pub support_accuracy: f64,
}

fn logits<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    encoder: &VitEncoder,
    classifier: &Linear,
    data: &LabeledDataset,
    idx: &[usize],
    frozen_encoder: bool,
) -> Result<crate::tensor::Var> {
    let patches = patchify(&data.batch(idx)?, encoder.config.patch)?;
    let opts = ForwardOptions {
        frozen: frozen_encoder,
        ..ForwardOptions::default()
    };
    let out = encoder.encode_full(g, store, &patches, &opts)?;
    let z = g.reshape(out.output.expect("full depth"), &[idx.len(), patches.tokens, encoder.config.dim])?;
    let pooled = g.mean_tokens(z)?;
    classifier.forward(g, store, pooled, false)
}

fn argmax_rows<T: Real>(values: &[T], k: usize) -> Vec<usize> {
    values
        .chunks(k)
        .map(|r| {
            let neg: Vec<f64> = r.iter().map(|v| -v.as_f64()).collect();
            argmin(&neg)
        })
        .collect()
}

/// Trains a `k`-way linear classifier on pooled features of the support set,
/// with SGD momentum, on a copy of `store`.
pub fn finetune_episode<T: Real>(
    store: &ParamStore<T>,
    encoder: &VitEncoder,
    data: &LabeledDataset,
    episode: &Episode,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Adapted<T>> {
    if !(cfg.lr > 0.0) || cfg.backbone_lr < 0.0 {
        return Err(Error::Config(format!(
            "fine-tune learning rates must be positive (lr {}, backbone {})",
            cfg.lr, cfg.backbone_lr
        )));
    }
    if episode.support.is_empty() {
        return Err(Error::Contract("fine-tuning needs a nonempty support set".into()));
    }
    let mut local = store.clone();
    let classifier = Linear::new(
        &mut local,
        "head.classifier",
        encoder.config.dim,
        episode.k,
        &mut rng::seeded(seed, stream::CLASSIFIER_INIT),
    )?;
    let train_backbone = cfg.backbone_lr > 0.0;
    let mut groups = vec![ParamGroup::new("classifier", cfg.lr, 0.0, classifier.ids().to_vec())];
    if train_backbone {
        groups.push(ParamGroup::new("backbone", cfg.backbone_lr, 0.0, encoder.param_ids()));
    }
    let mut opt = OptimizerState::new(OptimizerKind::sgd(cfg.momentum), groups)?;
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let out = logits(&mut g, &local, encoder, &classifier, data, &episode.support, !train_backbone)?;
        let loss = g.cross_entropy(out, &episode.support_labels)?;
        if !g.value(loss).is_finite() {
            return Err(Error::Numeric("fine-tuning loss is not finite".into()));
        }
        g.backward_into(loss, &mut local)?;
        opt.step(&mut local)?;
    }
    local.zero_grads();
    let mut g = Graph::new();
    let out = logits(&mut g, &local, encoder, &classifier, data, &episode.support, true)?;
    let pred = argmax_rows(g.value(out).data(), episode.k);
    Ok(Adapted {
        support_accuracy: accuracy(&pred, &episode.support_labels),
        store: local,
        classifier,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalMode {
    #[default]
    Proto,
    Finetune,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proto" => Ok(EvalMode::Proto),
            "finetune" => Ok(EvalMode::Finetune),
            other => Err(Error::Config(format!("unknown evaluation mode `{other}`"))),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Proto => "proto",
            EvalMode::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub n: usize,
    pub q: usize,
    pub episodes: usize,
    pub seed: u64,
    pub mode: EvalMode,
    pub distance: Distance,
    pub finetune: FinetuneConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 5,
            n: 5,
            q: 15,
            episodes: 600,
            seed: 1,
            mode: EvalMode::Proto,
            distance: Distance::Euclidean,
            finetune: FinetuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub n: usize,
    pub q: usize,
    pub mode: EvalMode,
    pub distance: Distance,
    /// Percent.
    pub mean_acc: f64,
    /// 95% half-width `1.96·std/√E` with the population standard deviation.
    pub ci95: f64,
    /// Per-episode accuracy in episode order.
    pub accuracies: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(cfg: &EvalConfig, accuracies: Vec<f64>) -> Self {
        let mut sorted = accuracies.clone();
        sorted.sort_by(f64::total_cmp);
        let e = sorted.len().max(1) as f64;
        let mean = sorted.iter().sum::<f64>() / e;
        let var = sorted.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / e;
        Self {
            k: cfg.k,
            n: cfg.n,
            q: cfg.q,
            mode: cfg.mode,
            distance: cfg.distance,
            mean_acc: mean,
            ci95: 1.96 * var.sqrt() / e.sqrt(),
            accuracies,
        }
    }

    pub fn episodes(&self) -> usize {
        self.accuracies.len()
    }

    pub const CSV_HEADER: &'static str = "k,n,q,episodes,mode,distance,mean_acc,ci95";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.k,
            self.n,
            self.q,
            self.episodes(),
            self.mode,
            self.distance,
            self.mean_acc,
            self.ci95
        )
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        writeln!(w, "{}", self.csv_row())
    }
}

/// Prototype evaluation over precomputed embeddings; episode `i` uses seed
/// `cfg.seed + i`.
pub fn evaluate_table(table: &EmbeddingTable, labels: &[usize], cfg: &EvalConfig, exec: Execution) -> Result<EvalReport> {
    if cfg.episodes == 0 {
        return Err(Error::Config("at least one episode is required".into()));
    }
    if table.rows.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} embeddings for {} labels",
            table.rows.len(),
            labels.len()
        )));
    }
    let accs = exec::map_range(exec, cfg.episodes, |i| -> Result<f64> {
        let ep = sample_episode(labels, cfg.k, cfg.n, cfg.q, cfg.seed.wrapping_add(i as u64))?;
        let pred = classify_prototype(
            &table.get(&ep.support),
            &ep.support_labels,
            ep.k,
            &table.get(&ep.query),
            cfg.distance,
        );
        Ok(accuracy(&pred, &ep.query_labels))
    });
    let accs = accs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_accuracies(cfg, accs))
}

/// Episode evaluation of a frozen encoder in either mode.
pub fn evaluate<T: Real>(
    store: &ParamStore<T>,
    encoder: &VitEncoder,
    data: &LabeledDataset,
    cfg: &EvalConfig,
    exec: Execution,
) -> Result<EvalReport> {
    match cfg.mode {
        EvalMode::Proto => {
            let table = EmbeddingTable::from_encoder(store, encoder, data, exec)?;
            evaluate_table(&table, &data.labels, cfg, exec)
        }
        EvalMode::Finetune => {
            if cfg.episodes == 0 {
                return Err(Error::Config("at least one episode is required".into()));
            }
            let accs = exec::map_range(exec, cfg.episodes, |i| -> Result<f64> {
                let seed = cfg.seed.wrapping_add(i as u64);
                let ep = sample_episode(&data.labels, cfg.k, cfg.n, cfg.q, seed)?;
                let adapted = finetune_episode(store, encoder, data, &ep, &cfg.finetune, seed)?;
                let mut g = Graph::new();
                let out = logits(&mut g, &adapted.store, encoder, &adapted.classifier, data, &ep.query, true)?;
                Ok(accuracy(&argmax_rows(g.value(out).data(), ep.k), &ep.query_labels))
            });
            let accs = accs.into_iter().collect::<Result<Vec<_>>>()?;
            Ok(EvalReport::from_accuracies(cfg, accs))
        }
    }
}

/// Relabels an episode's classes by `perm` (new label = `perm[old]`).
pub fn relabel(ep: &Episode, perm: &[usize]) -> Episode {
    let mut out = ep.clone();
    out.support_labels = ep.support_labels.iter().map(|&l| perm[l]).collect();
    out.query_labels = ep.query_labels.iter().map(|&l| perm[l]).collect();
    let mut classes = ep.classes.clone();
    for (old, &new) in perm.iter().enumerate() {
        classes[new] = ep.classes[old];
    }
    out.classes = classes;
    out
}

/// Random relabeling permutation for `k` classes.
pub fn random_permutation(k: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..k).collect();
    p.shuffle(&mut rng::seeded(seed, stream::EPISODES));
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(classes: usize, per: usize) -> Vec<usize> {
        (0..classes).flat_map(|c| std::iter::repeat_n(c, per)).collect()
    }

    #[test]
    fn one_shot_episode_sizes() {
        let ep = sample_episode(&labels(6, 20), 5, 1, 15, 3).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        let mut c = ep.classes.clone();
        c.sort();
        c.dedup();
        assert_eq!(c.len(), 5);
        assert!(ep.support.iter().all(|s| !ep.query.contains(s)));
    }

    #[test]
    fn deficit_is_named() {
        match sample_episode(&labels(3, 4), 5, 1, 15, 0) {
            Err(Error::Data(m)) => assert!(m.contains("5 classes") && m.contains("16")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmin(&[1.0, 0.5, 0.5]), 1);
        let s: Vec<&[f64]> = vec![&[0.0], &[2.0]];
        let q: Vec<&[f64]> = vec![&[1.0]];
        assert_eq!(classify_prototype(&s, &[0, 1], 2, &q, Distance::Euclidean), vec![0]);
    }

    #[test]
    fn single_episode_ci_is_zero() {
        let cfg = EvalConfig::default();
        let r = EvalReport::from_accuracies(&cfg, vec![60.0]);
        assert_eq!(r.ci95, 0.0);
        assert_eq!(r.mean_acc, 60.0);
    }

    #[test]
    fn cosine_distance_of_parallel_vectors() {
        assert!(distance(Distance::Cosine, &[1.0, 2.0], &[2.0, 4.0]).abs() < 1e-12);
        assert_eq!(distance(Distance::Euclidean, &[0.0, 0.0], &[3.0, 4.0]), 25.0);
    }
}
