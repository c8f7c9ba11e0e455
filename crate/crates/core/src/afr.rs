//! Aggregated feature reconstruction targets.
//!
//! Each encoder layer tap is aligned by its own projection (`f̃ = f·Wᵀ`,
//! row-vector convention), scored against the decoder output, and the scores
//! drive a linear+softmax head whose weights mix the aligned layers into a
//! single target `F = Σ α_l f̃_l`.

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Per-layer `d×d` projections, identity initialized.
#[derive(Debug, Clone)]
pub struct ProjectionBank {
    pub weights: Vec<ParamId>,
    pub dim: usize,
}

impl ProjectionBank {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, layers: usize, dim: usize) -> Result<Self> {
        let weights = (0..layers)
            .map(|l| store.add(format!("{prefix}.proj.{}", l + 1), Tensor::eye(dim)))
            .collect::<Result<_>>()?;
        Ok(Self { weights, dim })
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, prefix: &str, layers: usize, dim: usize) -> Result<Self> {
        let weights = (0..layers)
            .map(|l| {
                let name = format!("{prefix}.proj.{}", l + 1);
                store
                    .lookup(&name)
                    .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { weights, dim })
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    /// `f̃_l = f_l · W_lᵀ` for every layer.
    pub fn align<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feats: &[Var]) -> Result<Vec<Var>> {
        if feats.len() != self.weights.len() {
            return Err(Error::Config(format!(
                "{} layer features for a bank of {} projections",
                feats.len(),
                self.weights.len()
            )));
        }
        feats
            .iter()
            .zip(&self.weights)
            .map(|(&f, &w)| {
                let w = g.param(store, w);
                g.matmul_nt(f, w)
            })
            .collect()
    }
}

/// `ℓ_l = mse(R, f̃_l)` on plain values; nothing is recorded.
pub fn layer_losses<T: Real>(g: &Graph<T>, recon: Var, aligned: &[Var]) -> Result<Vec<f64>> {
    let r = g.value(recon);
    aligned
        .iter()
        .map(|&f| {
            let fv = g.value(f);
            if fv.shape() != r.shape() {
                return Err(Error::shape(format!(
                    "layer loss between {:?} and {:?}",
                    r.shape(),
                    fv.shape()
                )));
            }
            let s: f64 = r
                .data()
                .iter()
                .zip(fv.data())
                .map(|(&a, &b)| {
                    let e = a.as_f64() - b.as_f64();
                    e * e
                })
                .sum();
            Ok(s / r.len().max(1) as f64)
        })
        .collect()
}

/// Linear map `L → L` followed by softmax, zero initialized.
#[derive(Debug, Clone)]
pub struct AlphaHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub layers: usize,
}

impl AlphaHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, layers: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{prefix}.alpha.weight"), Tensor::zeros(&[layers, layers]))?,
            bias: store.add(format!("{prefix}.alpha.bias"), Tensor::zeros(&[layers]))?,
            layers,
        })
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, prefix: &str, layers: usize) -> Result<Self> {
        let get = |name: String| {
            store
                .lookup(&name)
                .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
        };
        Ok(Self {
            weight: get(format!("{prefix}.alpha.weight"))?,
            bias: get(format!("{prefix}.alpha.bias"))?,
            layers,
        })
    }

    /// `α = softmax(W·ℓ + b)` as an `[L]` var.
    pub fn compute_alpha<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, losses: &[f64]) -> Result<Var> {
        if losses.len() != self.layers {
            return Err(Error::Config(format!(
                "{} layer losses for an alpha head over {} layers",
                losses.len(),
                self.layers
            )));
        }
        if let Some(bad) = losses.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite layer loss {bad}")));
        }
        let x = g.constant(Tensor::from_f64_slice(&[1, self.layers], losses)?);
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let logits = g.matmul_nt(x, w)?;
        let logits = g.add_row(logits, b)?;
        let a = g.softmax(logits)?;
        g.reshape(a, &[self.layers])
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// `F = Σ α_l f̃_l`.
pub fn aggregate<T: Real>(g: &mut Graph<T>, aligned: &[Var], alpha: Var) -> Result<Var> {
    g.weighted_sum(aligned, alpha)
}

/// Aggregated target for one step.
#[derive(Debug, Clone)]
pub struct AggregatedTarget {
    pub target: Var,
    pub alpha: Var,
    pub aligned: Vec<Var>,
    pub losses: Vec<f64>,
}

/// Projections, alpha head and optional loss smoothing.
#[derive(Debug, Clone)]
pub struct AfrModule {
    pub bank: ProjectionBank,
    pub head: AlphaHead,
    /// Exponential smoothing factor for `ℓ` across steps; `None` uses the
    /// current step's losses directly.
    pub smoothing: Option<f64>,
    smoothed: Option<Vec<f64>>,
}

impl AfrModule {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, layers: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            bank: ProjectionBank::new(store, prefix, layers, dim)?,
            head: AlphaHead::new(store, prefix, layers)?,
            smoothing: None,
            smoothed: None,
        })
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, prefix: &str, layers: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            bank: ProjectionBank::bind(store, prefix, layers, dim)?,
            head: AlphaHead::bind(store, prefix, layers)?,
            smoothing: None,
            smoothed: None,
        })
    }

    pub fn with_smoothing(mut self, smoothing: Option<f64>) -> Result<Self> {
        if let Some(s) = smoothing {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::Config(format!("loss smoothing {s} outside [0, 1)")));
            }
        }
        self.smoothing = smoothing;
        Ok(self)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.bank.weights.clone();
        ids.extend(self.head.ids());
        ids
    }

    pub fn target<T: Real>(
        &mut self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        recon: Var,
        feats: &[Var],
    ) -> Result<AggregatedTarget> {
        let aligned = self.bank.align(g, store, feats)?;
        let mut losses = layer_losses(g, recon, &aligned)?;
        if let Some(s) = self.smoothing {
            let next = match &self.smoothed {
                Some(prev) => prev.iter().zip(&losses).map(|(p, c)| s * p + (1.0 - s) * c).collect(),
                None => losses.clone(),
            };
            self.smoothed = Some(next.clone());
            losses = next;
        }
        let alpha = self.head.compute_alpha(g, store, &losses)?;
        let target = aggregate(g, &aligned, alpha)?;
        Ok(AggregatedTarget {
            target,
            alpha,
            aligned,
            losses,
        })
    }
}
