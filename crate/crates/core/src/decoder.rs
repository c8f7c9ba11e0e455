//! Lightweight decoder.
//!
//! Visible representations and mask tokens are assembled in original patch
//! order, then each block mixes tokens with `softmax(S/τ)·V(T)`, where the
//! correlation `S` is cosine similarity by default. Query and key projections
//! exist only for the `qk_attention` correlation.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::patch::MaskSplit;
use crate::rng::{self, Rng};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::vit::{load, Linear, Norm, VitEncoder};

pub const COSINE_EPS: f64 = 1e-8;
const MASK_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Correlation {
    #[default]
    Cosine,
    Euclidean,
    Identity,
    QkAttention,
}

impl FromStr for Correlation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" | "cos" => Ok(Correlation::Cosine),
            "euclidean" | "euc" => Ok(Correlation::Euclidean),
            "identity" | "iden" => Ok(Correlation::Identity),
            "qk_attention" | "qk" | "attn" => Ok(Correlation::QkAttention),
            other => Err(Error::Config(format!("unknown correlation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Correlation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Correlation::Cosine => "cosine",
            Correlation::Euclidean => "euclidean",
            Correlation::Identity => "identity",
            Correlation::QkAttention => "qk_attention",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub correlation: Correlation,
    pub use_mlp: bool,
    pub temperature: f64,
    pub dim: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
}

impl DecoderConfig {
    /// Single cosine block without MLP.
    pub fn lightweight(dim: usize) -> Self {
        Self {
            correlation: Correlation::Cosine,
            use_mlp: false,
            temperature: 1.0,
            dim,
            depth: 1,
            mlp_ratio: 4.0,
        }
    }

    /// Two query-key attention blocks with MLP, a small stand-in for a
    /// conventional masked-autoencoder decoder.
    pub fn standard(dim: usize) -> Self {
        Self {
            correlation: Correlation::QkAttention,
            use_mlp: true,
            depth: 2,
            ..Self::lightweight(dim)
        }
    }

    pub fn preset(name: &str, dim: usize) -> Result<Self> {
        match name {
            "ld" | "lightweight" => Ok(Self::lightweight(dim)),
            "mae" | "standard" => Ok(Self::standard(dim)),
            other => Err(Error::Config(format!("unknown decoder preset `{other}`"))),
        }
    }

    pub fn hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.depth == 0 {
            return Err(Error::Config("decoder dim and depth must be positive".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.use_mlp && self.hidden() == 0 {
            return Err(Error::Config("decoder MLP hidden width is zero".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count including the mask token.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let mut block = 2 * (d * d + d) + 2 * d;
        if self.correlation == Correlation::QkAttention {
            block += 2 * (d * d + d);
        }
        if self.use_mlp {
            let h = self.hidden();
            block += 2 * d + (d * h + h) + (h * d + d);
        }
        d + self.depth * block
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    qk: Option<(Linear, Linear)>,
    value: Linear,
    out: Linear,
    mlp: Option<(Norm, Linear, Linear)>,
    norm: Norm,
}

impl DecoderBlock {
    fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some((q, k)) = &self.qk {
            ids.extend(q.ids());
            ids.extend(k.ids());
        }
        ids.extend(self.value.ids());
        ids.extend(self.out.ids());
        if let Some((n, a, b)) = &self.mlp {
            ids.extend(n.ids());
            ids.extend(a.ids());
            ids.extend(b.ids());
        }
        ids.extend(self.norm.ids());
        ids
    }
}

#[derive(Debug, Clone)]
pub struct LightDecoder {
    pub config: DecoderConfig,
    mask_token: ParamId,
    blocks: Vec<DecoderBlock>,
}

impl LightDecoder {
    pub fn new<T: Real>(config: DecoderConfig, store: &mut ParamStore<T>, prefix: &str, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mask_token = store.add(format!("{prefix}.mask_token"), rng::normal(rng, &[d], MASK_STD))?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("{prefix}.blocks.{i}");
            let qk = if config.correlation == Correlation::QkAttention {
                Some((
                    Linear::new(store, &format!("{p}.q"), d, d, rng)?,
                    Linear::new(store, &format!("{p}.k"), d, d, rng)?,
                ))
            } else {
                None
            };
            let value = Linear::new(store, &format!("{p}.v"), d, d, rng)?;
            let out = Linear::new(store, &format!("{p}.o"), d, d, rng)?;
            let mlp = if config.use_mlp {
                Some((
                    Norm::new(store, &format!("{p}.mlp_norm"), d)?,
                    Linear::new(store, &format!("{p}.fc1"), d, config.hidden(), rng)?,
                    Linear::new(store, &format!("{p}.fc2"), config.hidden(), d, rng)?,
                ))
            } else {
                None
            };
            let norm = Norm::new(store, &format!("{p}.norm"), d)?;
            blocks.push(DecoderBlock {
                qk,
                value,
                out,
                mlp,
                norm,
            });
        }
        Ok(Self {
            config,
            mask_token,
            blocks,
        })
    }

    /// Rebinds a decoder whose parameters already exist under `prefix`.
    pub fn bind<T: Real>(config: DecoderConfig, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        config.validate()?;
        let get = |name: String| {
            store
                .lookup(&name)
                .ok_or_else(|| Error::Data(format!("missing parameter `{name}`")))
        };
        let lin = |name: String| -> Result<Linear> {
            Ok(Linear {
                weight: get(format!("{name}.weight"))?,
                bias: get(format!("{name}.bias"))?,
            })
        };
        let norm = |name: String| -> Result<Norm> {
            Ok(Norm {
                gamma: get(format!("{name}.gamma"))?,
                beta: get(format!("{name}.beta"))?,
            })
        };
        let mut blocks = Vec::new();
        for i in 0..config.depth {
            let p = format!("{prefix}.blocks.{i}");
            let qk = match config.correlation {
                Correlation::QkAttention => Some((lin(format!("{p}.q"))?, lin(format!("{p}.k"))?)),
                _ => None,
            };
            let mlp = if config.use_mlp {
                Some((
                    norm(format!("{p}.mlp_norm"))?,
                    lin(format!("{p}.fc1"))?,
                    lin(format!("{p}.fc2"))?,
                ))
            } else {
                None
            };
            blocks.push(DecoderBlock {
                qk,
                value: lin(format!("{p}.v"))?,
                out: lin(format!("{p}.o"))?,
                mlp,
                norm: norm(format!("{p}.norm"))?,
            });
        }
        Ok(Self {
            config,
            mask_token: get(format!("{prefix}.mask_token"))?,
            blocks,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.mask_token];
        for b in &self.blocks {
            ids.extend(b.ids());
        }
        ids
    }

    pub fn mask_token(&self) -> ParamId {
        self.mask_token
    }

    /// Places visible rows of `z` (`[B·N′ × d]`) and mask tokens with
    /// positional embeddings back into original order, giving `[B·N × d]`.
    pub fn assemble<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        encoder: &VitEncoder,
        z: Var,
        maps: &[MaskSplit],
    ) -> Result<Var> {
        let d = self.config.dim;
        let batch = maps.len();
        if batch == 0 {
            return Err(Error::shape("decoder needs at least one index map"));
        }
        let n = maps[0].tokens();
        let nv = maps[0].visible_idx.len();
        let nm = n - nv;
        for m in maps {
            m.validate(n)?;
            if m.visible_idx.len() != nv {
                return Err(Error::shape("index maps disagree on the visible count"));
            }
        }
        if g.shape(z) != [batch * nv, d] {
            return Err(Error::shape(format!(
                "visible representations {:?} for {batch} maps of {nv} visible tokens at d={d}",
                g.shape(z)
            )));
        }
        let mut perm = vec![0usize; batch * n];
        for (b, m) in maps.iter().enumerate() {
            for (j, &p) in m.visible_idx.iter().enumerate() {
                perm[b * n + p] = b * nv + j;
            }
            for (j, &p) in m.masked_idx.iter().enumerate() {
                perm[b * n + p] = batch * nv + b * nm + j;
            }
        }
        if nm == 0 {
            return g.gather_rows(z, &perm);
        }
        let token = load(g, store, self.mask_token, false);
        let token = g.reshape(token, &[1, d])?;
        let tokens = g.gather_rows(token, &vec![0; batch * nm])?;
        let pos = load(g, store, encoder.pos_embed(), false);
        let masked: Vec<usize> = maps.iter().flat_map(|m| m.masked_idx.iter().copied()).collect();
        let pos = g.gather_rows(pos, &masked)?;
        let mask_rows = g.add(tokens, pos)?;
        let all = g.concat_rows(z, mask_rows)?;
        g.gather_rows(all, &perm)
    }

    /// Applies the decoder blocks to tokens in original order, `[B·N × d]`.
    pub fn forward_tokens<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut t: Var,
        batch: usize,
        n: usize,
    ) -> Result<Var> {
        let d = self.config.dim;
        let inv_tau = T::of(1.0 / self.config.temperature);
        for blk in &self.blocks {
            let t3 = g.reshape(t, &[batch, n, d])?;
            let s = match self.config.correlation {
                Correlation::Cosine => g.cosine_scores(t3, COSINE_EPS)?,
                Correlation::Euclidean => g.euclidean_scores(t3)?,
                Correlation::Identity => {
                    let mut eye = Vec::with_capacity(batch * n * n);
                    for _ in 0..batch {
                        eye.extend_from_slice(Tensor::<T>::eye(n).data());
                    }
                    g.constant(Tensor::from_vec(&[batch, n, n], eye)?)
                }
                Correlation::QkAttention => {
                    let (q, k) = blk.qk.as_ref().expect("qk projections");
                    let qv = q.forward(g, store, t, false)?;
                    let kv = k.forward(g, store, t, false)?;
                    let qv = g.reshape(qv, &[batch, n, d])?;
                    let kv = g.reshape(kv, &[batch, n, d])?;
                    let s = g.matmul_nt(qv, kv)?;
                    g.scale(s, T::of(1.0 / (d as f64).sqrt()))
                }
            };
            let s = g.scale(s, inv_tau);
            let p = g.softmax(s)?;
            let v = blk.value.forward(g, store, t, false)?;
            let v = g.reshape(v, &[batch, n, d])?;
            let mixed = g.matmul(p, v)?;
            let mixed = g.reshape(mixed, &[batch * n, d])?;
            let o = blk.out.forward(g, store, mixed, false)?;
            let mut out = g.add(t, o)?;
            if let Some((norm, fc1, fc2)) = &blk.mlp {
                let h = norm.forward(g, store, out, false)?;
                let h = fc1.forward(g, store, h, false)?;
                let h = g.gelu(h);
                let h = fc2.forward(g, store, h, false)?;
                out = g.add(out, h)?;
            }
            t = blk.norm.forward(g, store, out, false)?;
        }
        Ok(t)
    }

    /// `R = Decoder(Z, M)` as `[B·N × d]`.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        encoder: &VitEncoder,
        z: Var,
        maps: &[MaskSplit],
    ) -> Result<Var> {
        let t = self.assemble(g, store, encoder, z, maps)?;
        let n = maps[0].tokens();
        self.forward_tokens(g, store, t, maps.len(), n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lightweight_count_closed_form() {
        let d = 32;
        let ld = DecoderConfig::lightweight(d);
        assert_eq!(ld.param_count(), 2 * d * d + 5 * d);
        let mut store = ParamStore::<f32>::new();
        let dec = LightDecoder::new(ld, &mut store, "dec", &mut rng::seeded(0, 2)).unwrap();
        assert_eq!(store.numel(&dec.param_ids()), ld.param_count());
    }

    #[test]
    fn standard_count_matches_store() {
        let cfg = DecoderConfig::standard(16);
        let mut store = ParamStore::<f32>::new();
        let dec = LightDecoder::new(cfg, &mut store, "dec", &mut rng::seeded(0, 2)).unwrap();
        assert_eq!(store.numel(&dec.param_ids()), cfg.param_count());
        assert!(DecoderConfig::lightweight(16).param_count() < cfg.param_count());
    }

    #[test]
    fn parse_correlation() {
        assert_eq!("Euc".parse::<Correlation>().unwrap(), Correlation::Euclidean);
        assert!("dot".parse::<Correlation>().is_err());
    }

    #[test]
    fn temperature_must_be_positive() {
        let cfg = DecoderConfig {
            temperature: 0.0,
            ..DecoderConfig::lightweight(4)
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
