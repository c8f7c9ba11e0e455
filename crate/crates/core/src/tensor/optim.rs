use std::collections::HashMap;

use super::{ParamId, ParamStore, Real};
use crate::error::{Error, Result};

/// Update rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64 },
    /// Heavy-ball momentum: `v = μ·v + g; w -= lr·v`.
    SgdMomentum { momentum: f64 },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }
}

/// Parameters sharing a learning rate and weight decay.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub params: Vec<ParamId>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, lr: f64, weight_decay: f64, params: Vec<ParamId>) -> Self {
        Self {
            name: name.into(),
            lr,
            weight_decay,
            params,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Optimizer with its per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    groups: Vec<ParamGroup>,
    moments: HashMap<ParamId, Moments>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, groups: Vec<ParamGroup>) -> Result<Self> {
        for g in &groups {
            if !(g.lr.is_finite() && g.lr >= 0.0) {
                return Err(Error::Config(format!(
                    "group `{}` has invalid learning rate {}",
                    g.name, g.lr
                )));
            }
        }
        Ok(Self {
            kind,
            groups,
            moments: HashMap::new(),
            steps: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every grouped parameter, then clears all grads.
    ///
    /// Fails without modifying anything when a grouped trainable parameter
    /// has no gradient.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for g in &self.groups {
            for &id in &g.params {
                let p = store.get(id);
                if p.requires_grad && p.grad.is_none() {
                    return Err(Error::Contract(format!(
                        "parameter `{}` has no gradient",
                        p.name
                    )));
                }
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        for g in &self.groups {
            for &id in &g.params {
                let p = store.get_mut(id);
                if !p.requires_grad {
                    continue;
                }
                let grad = p.grad.take().expect("checked above");
                let n = p.value.len();
                let m = self.moments.entry(id).or_insert_with(|| Moments {
                    first: vec![0.0; n],
                    second: vec![0.0; n],
                });
                let w = p.value.data_mut();
                match self.kind {
                    OptimizerKind::AdamW { beta1, beta2, eps } => {
                        let bc1 = 1.0 - beta1.powi(t);
                        let bc2 = 1.0 - beta2.powi(t);
                        for i in 0..n {
                            let gi = grad.data()[i].as_f64();
                            let mut wi = w[i].as_f64();
                            wi -= g.lr * g.weight_decay * wi;
                            m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * gi;
                            m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * gi * gi;
                            let mhat = m.first[i] / bc1;
                            let vhat = m.second[i] / bc2;
                            wi -= g.lr * mhat / (vhat.sqrt() + eps);
                            w[i] = T::of(wi);
                        }
                    }
                    OptimizerKind::SgdMomentum { momentum } => {
                        for i in 0..n {
                            let wi = w[i].as_f64();
                            let gi = grad.data()[i].as_f64() + g.weight_decay * wi;
                            m.first[i] = momentum * m.first[i] + gi;
                            w[i] = T::of(wi - g.lr * m.first[i]);
                        }
                    }
                }
            }
        }
        store.zero_grads();
        Ok(())
    }
}
