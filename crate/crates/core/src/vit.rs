//! Small Vision Transformer encoder.
//!
//! Pre-norm blocks (`x + attn(ln(x))`, then `x + mlp(ln(x))`), learned
//! positional embeddings and no class token. Layer taps `f^(l)` are block
//! outputs before the final layer norm; only the encoder output `Z` passes
//! through it.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::patch::{MaskSplit, PatchBatch};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;
const POS_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_side: usize,
    pub channels: usize,
    pub mlp_ratio: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            dim: 32,
            heads: 4,
            patch: 4,
            image_side: 32,
            channels: 3,
            mlp_ratio: 4.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.dim == 0 || self.heads == 0 || self.patch == 0 || self.channels == 0 {
            return bad(format!("encoder dimensions must be positive: {self:?}"));
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.image_side % self.patch != 0 {
            return bad(format!(
                "image side {} is not divisible by patch {}",
                self.image_side, self.patch
            ));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden() == 0 {
            return bad(format!("mlp_ratio {} gives an empty hidden layer", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_side / self.patch;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, h) = (self.dim, self.hidden());
        let embed = self.patch_dim() * d + d + self.num_patches() * d;
        let block = 4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d);
        embed + self.depth * block + 2 * d
    }
}

/// Affine linear map `y = x·W + b` with `W` stored `[in×out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), rng::xavier_uniform(rng, fan_in, fan_out))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, frozen: bool) -> Result<Var> {
        let w = load(g, store, self.weight, frozen);
        let b = load(g, store, self.bias, frozen);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, frozen: bool) -> Result<Var> {
        let gm = load(g, store, self.gamma, frozen);
        let bt = load(g, store, self.beta, frozen);
        g.layer_norm(x, gm, bt, LN_EPS)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

pub(crate) fn load<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, id: ParamId, frozen: bool) -> Var {
    if frozen {
        g.param_frozen(store, id)
    } else {
        g.param(store, id)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(self.ln1.ids());
        for l in [&self.q, &self.k, &self.v, &self.proj] {
            ids.extend(l.ids());
        }
        ids.extend(self.ln2.ids());
        ids.extend(self.fc1.ids());
        ids.extend(self.fc2.ids());
        ids
    }
}

/// Zeroes whole token vectors at the output of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct Disruption {
    /// 1-based block index.
    pub layer: usize,
    /// Token positions zeroed in every image.
    pub zero_tokens: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub disrupt: Option<Disruption>,
    /// Stop after this many blocks; the final output is then absent.
    pub max_layer: Option<usize>,
    /// Load weights as constants (no gradient recording).
    pub frozen: bool,
}

/// Per-block taps plus the normalized encoder output.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `f^(1..)` as `[B·n × d]`.
    pub taps: Vec<Var>,
    /// `LN(f^(L))` as `[B·n × d]`, absent when stopped early.
    pub output: Option<Var>,
}

/// Encoder weights as handles into a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct VitEncoder {
    pub config: EncoderConfig,
    prefix: String,
    patch_embed: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    norm: Norm,
}

impl VitEncoder {
    pub fn new<T: Real>(config: EncoderConfig, store: &mut ParamStore<T>, prefix: &str, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let patch_embed = Linear::new(store, &format!("{prefix}.patch_embed"), config.patch_dim(), d, rng)?;
        let pos = store.add(
            format!("{prefix}.pos_embed"),
            rng::normal(rng, &[config.num_patches(), d], POS_STD),
        )?;
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let p = format!("{prefix}.blocks.{l}");
            blocks.push(Block {
                ln1: Norm::new(store, &format!("{p}.ln1"), d)?,
                q: Linear::new(store, &format!("{p}.attn.q"), d, d, rng)?,
                k: Linear::new(store, &format!("{p}.attn.k"), d, d, rng)?,
                v: Linear::new(store, &format!("{p}.attn.v"), d, d, rng)?,
                proj: Linear::new(store, &format!("{p}.attn.proj"), d, d, rng)?,
                ln2: Norm::new(store, &format!("{p}.ln2"), d)?,
                fc1: Linear::new(store, &format!("{p}.mlp.fc1"), d, config.hidden(), rng)?,
                fc2: Linear::new(store, &format!("{p}.mlp.fc2"), config.hidden(), d, rng)?,
            });
        }
        let norm = Norm::new(store, &format!("{prefix}.norm"), d)?;
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            patch_embed,
            pos,
            blocks,
            norm,
        })
    }

    /// Rebinds an encoder whose parameters already exist in `store` under `prefix`.
    pub fn bind<T: Real>(config: EncoderConfig, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
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
        for l in 0..config.depth {
            let p = format!("{prefix}.blocks.{l}");
            blocks.push(Block {
                ln1: norm(format!("{p}.ln1"))?,
                q: lin(format!("{p}.attn.q"))?,
                k: lin(format!("{p}.attn.k"))?,
                v: lin(format!("{p}.attn.v"))?,
                proj: lin(format!("{p}.attn.proj"))?,
                ln2: norm(format!("{p}.ln2"))?,
                fc1: lin(format!("{p}.mlp.fc1"))?,
                fc2: lin(format!("{p}.mlp.fc2"))?,
            });
        }
        let enc = Self {
            config,
            prefix: prefix.to_string(),
            patch_embed: lin(format!("{prefix}.patch_embed"))?,
            pos: get(format!("{prefix}.pos_embed"))?,
            blocks,
            norm: norm(format!("{prefix}.norm"))?,
        };
        let d = config.dim;
        let expect = [
            (enc.patch_embed.weight, vec![config.patch_dim(), d]),
            (enc.pos, vec![config.num_patches(), d]),
        ];
        for (id, shape) in expect {
            if store.value(id).shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "parameter `{}` has shape {:?}, config expects {shape:?}",
                    store.get(id).name,
                    store.value(id).shape()
                )));
            }
        }
        Ok(enc)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn pos_embed(&self) -> ParamId {
        self.pos
    }

    /// Every parameter id, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(self.patch_embed.ids());
        ids.push(self.pos);
        for b in &self.blocks {
            ids.extend(b.ids());
        }
        ids.extend(self.norm.ids());
        ids
    }

    /// Registers a copy of every parameter under `prefix`.
    pub fn duplicate<T: Real>(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<Self> {
        for id in self.param_ids() {
            let p = store.get(id);
            let name = p.name.replacen(&self.prefix, prefix, 1);
            let value = p.value.clone();
            store.add(name, value)?;
        }
        Self::bind(self.config, store, prefix)
    }

    fn embed<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        patches: &PatchBatch,
        positions: &[usize],
        frozen: bool,
    ) -> Result<Var> {
        let pd = self.config.patch_dim();
        if patches.patch_dim() != pd {
            return Err(Error::shape(format!(
                "patch vectors of length {} for an encoder expecting {pd}",
                patches.patch_dim()
            )));
        }
        let rows = patches.batch * patches.tokens;
        if positions.len() != rows {
            return Err(Error::shape(format!("{} positions for {rows} tokens", positions.len())));
        }
        let x = g.constant(Tensor::from_vec(
            &[rows, pd],
            patches.data.iter().map(|&v| T::of_f32(v)).collect(),
        )?);
        let x = self.patch_embed.forward(g, store, x, frozen)?;
        let pos = load(g, store, self.pos, frozen);
        let p = g.gather_rows(pos, positions)?;
        g.add(x, p)
    }

    fn block<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        blk: &Block,
        x: Var,
        n: usize,
        frozen: bool,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let dh = self.config.dim / heads;
        let h = blk.ln1.forward(g, store, x, frozen)?;
        let q = blk.q.forward(g, store, h, frozen)?;
        let k = blk.k.forward(g, store, h, frozen)?;
        let v = blk.v.forward(g, store, h, frozen)?;
        let q = g.split_heads(q, n, heads)?;
        let k = g.split_heads(k, n, heads)?;
        let v = g.split_heads(v, n, heads)?;
        let s = g.matmul_nt(q, k)?;
        let s = g.scale(s, T::of(1.0 / (dh as f64).sqrt()));
        let p = g.softmax(s)?;
        let o = g.matmul(p, v)?;
        let o = g.merge_heads(o, heads)?;
        let o = blk.proj.forward(g, store, o, frozen)?;
        let x = g.add(x, o)?;
        let h = blk.ln2.forward(g, store, x, frozen)?;
        let h = blk.fc1.forward(g, store, h, frozen)?;
        let h = g.gelu(h);
        let h = blk.fc2.forward(g, store, h, frozen)?;
        g.add(x, h)
    }

    fn run<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut x: Var,
        batch: usize,
        n: usize,
        opts: &ForwardOptions,
    ) -> Result<EncoderOutput> {
        let depth = opts.max_layer.unwrap_or(self.config.depth);
        if depth == 0 || depth > self.config.depth {
            return Err(Error::Config(format!(
                "layer {depth} outside 1..={}",
                self.config.depth
            )));
        }
        let mut taps = Vec::with_capacity(depth);
        for (l, blk) in self.blocks.iter().take(depth).enumerate() {
            x = self.block(g, store, blk, x, n, opts.frozen)?;
            if let Some(dis) = &opts.disrupt {
                if dis.layer == l + 1 && !dis.zero_tokens.is_empty() {
                    x = zero_tokens(g, x, batch, n, self.config.dim, &dis.zero_tokens)?;
                }
            }
            taps.push(x);
        }
        let output = if depth == self.config.depth {
            Some(self.norm.forward(g, store, x, opts.frozen)?)
        } else {
            None
        };
        Ok(EncoderOutput { taps, output })
    }

    /// Encodes visible patches; `positions[b]` gives each visible token's
    /// original patch index. Returns `Z` as `[B·N' × d]`.
    pub fn encode_visible<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        visible: &PatchBatch,
        positions: &[Vec<usize>],
    ) -> Result<Var> {
        if positions.len() != visible.batch || positions.iter().any(|p| p.len() != visible.tokens) {
            return Err(Error::shape("position maps must match the visible batch layout"));
        }
        if let Some(&bad) = positions.iter().flatten().find(|&&p| p >= self.config.num_patches()) {
            return Err(Error::shape(format!(
                "position {bad} out of range for {} patches",
                self.config.num_patches()
            )));
        }
        let flat: Vec<usize> = positions.iter().flatten().copied().collect();
        let x = self.embed(g, store, visible, &flat, false)?;
        let out = self.run(g, store, x, visible.batch, visible.tokens, &ForwardOptions::default())?;
        Ok(out.output.expect("full depth"))
    }

    /// Convenience wrapper taking the split's index maps.
    pub fn encode_split<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        visible: &PatchBatch,
        maps: &[MaskSplit],
    ) -> Result<Var> {
        let pos: Vec<Vec<usize>> = maps.iter().map(|m| m.visible_idx.clone()).collect();
        self.encode_visible(g, store, visible, &pos)
    }

    /// Encodes all `N` patches of every image, returning every block tap.
    pub fn encode_full<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        patches: &PatchBatch,
        opts: &ForwardOptions,
    ) -> Result<EncoderOutput> {
        let n = self.config.num_patches();
        if patches.tokens != n {
            return Err(Error::shape(format!("{} patches for an encoder of {n}", patches.tokens)));
        }
        let positions: Vec<usize> = (0..patches.batch).flat_map(|_| 0..n).collect();
        let x = self.embed(g, store, patches, &positions, opts.frozen)?;
        self.run(g, store, x, patches.batch, n, opts)
    }

    /// Mean-pooled final features `[B × d]` without gradient recording.
    pub fn pooled_features<T: Real>(
        &self,
        store: &ParamStore<T>,
        patches: &PatchBatch,
        disrupt: Option<Disruption>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let opts = ForwardOptions {
            disrupt,
            max_layer: None,
            frozen: true,
        };
        let out = self.encode_full(&mut g, store, patches, &opts)?;
        let z = out.output.expect("full depth");
        let z = g.reshape(z, &[patches.batch, patches.tokens, self.config.dim])?;
        let pooled = g.mean_tokens(z)?;
        Ok(g.value(pooled).clone())
    }
}

fn zero_tokens<T: Real>(g: &mut Graph<T>, x: Var, batch: usize, n: usize, d: usize, zero: &[usize]) -> Result<Var> {
    let mut keep = vec![T::one(); n];
    for &t in zero {
        if t >= n {
            return Err(Error::shape(format!("disrupted token {t} out of range for {n}")));
        }
        keep[t] = T::zero();
    }
    let mut mask = Vec::with_capacity(batch * n * d);
    for _ in 0..batch {
        for &k in &keep {
            mask.extend(std::iter::repeat_n(k, d));
        }
    }
    let m = g.constant(Tensor::from_vec(&[batch * n, d], mask)?);
    g.mul(x, m)
}

/// How the auxiliary full-image encoder relates to the primary one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AuxMode {
    /// Same weights, taps recorded with gradient then detached.
    #[default]
    SharedDetached,
    /// Independent weights trained through the targets.
    Iwg,
    /// Independent weights frozen at their initial copy.
    Iog,
    /// Independent weights tracking the primary by exponential moving average.
    Ie,
    /// Same weights evaluated without gradient recording.
    Sog,
}

impl FromStr for AuxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shared" | "shared_with_grad_detached" => Ok(AuxMode::SharedDetached),
            "iwg" => Ok(AuxMode::Iwg),
            "iog" => Ok(AuxMode::Iog),
            "ie" => Ok(AuxMode::Ie),
            "sog" => Ok(AuxMode::Sog),
            other => Err(Error::Config(format!("unknown auxiliary encoder mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for AuxMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AuxMode::SharedDetached => "shared",
            AuxMode::Iwg => "iwg",
            AuxMode::Iog => "iog",
            AuxMode::Ie => "ie",
            AuxMode::Sog => "sog",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Attached,
    Detached,
}

/// Per-layer full-image features `f^(l)`, each `[B·N × d]`.
#[derive(Debug, Clone)]
pub struct LayerFeatures {
    pub layers: Vec<Var>,
    pub provenance: Provenance,
}

/// Auxiliary encoder supplying layer features for feature targets.
#[derive(Debug, Clone)]
pub struct AuxEncoder {
    pub mode: AuxMode,
    pub ema_decay: f64,
    independent: Option<VitEncoder>,
}

impl AuxEncoder {
    pub fn new<T: Real>(mode: AuxMode, primary: &VitEncoder, store: &mut ParamStore<T>, ema_decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ema_decay) {
            return Err(Error::Config(format!("EMA decay {ema_decay} outside [0, 1]")));
        }
        let independent = match mode {
            AuxMode::SharedDetached | AuxMode::Sog => None,
            AuxMode::Iwg | AuxMode::Iog | AuxMode::Ie => {
                let enc = primary.duplicate(store, "aux")?;
                if mode != AuxMode::Iwg {
                    for id in enc.param_ids() {
                        store.set_requires_grad(id, false);
                    }
                }
                Some(enc)
            }
        };
        Ok(Self {
            mode,
            ema_decay,
            independent,
        })
    }

    /// Independent weights, when the mode has them.
    pub fn independent(&self) -> Option<&VitEncoder> {
        self.independent.as_ref()
    }

    /// Runs the full image through the auxiliary weights, returning taps
    /// `f^(1..=layers)` (all layers when `layers` is `None`).
    pub fn encode_full_with_taps<T: Real>(
        &self,
        primary: &VitEncoder,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        patches: &PatchBatch,
        layers: Option<usize>,
    ) -> Result<LayerFeatures> {
        let (enc, frozen, detach) = match self.mode {
            AuxMode::SharedDetached => (primary, false, true),
            AuxMode::Sog => (primary, true, false),
            AuxMode::Iwg => (self.independent.as_ref().expect("independent"), false, false),
            AuxMode::Iog | AuxMode::Ie => (self.independent.as_ref().expect("independent"), true, false),
        };
        let opts = ForwardOptions {
            disrupt: None,
            max_layer: layers,
            frozen,
        };
        let out = enc.encode_full(g, store, patches, &opts)?;
        let layers = if detach {
            out.taps.iter().map(|&t| g.detach(t)).collect()
        } else {
            out.taps
        };
        let provenance = if self.mode == AuxMode::Iwg {
            Provenance::Attached
        } else {
            Provenance::Detached
        };
        Ok(LayerFeatures { layers, provenance })
    }

    /// `aux = decay·aux + (1 − decay)·primary`; no-op outside EMA mode.
    pub fn ema_update<T: Real>(&self, primary: &VitEncoder, store: &mut ParamStore<T>, decay: f64) {
        let Some(aux) = self.independent.as_ref().filter(|_| self.mode == AuxMode::Ie) else {
            return;
        };
        let keep = T::of(decay);
        let mix = T::of(1.0 - decay);
        for (src, dst) in primary.param_ids().into_iter().zip(aux.param_ids()) {
            let p = store.value(src).data().to_vec();
            for (a, b) in store.value_mut(dst).data_mut().iter_mut().zip(p) {
                *a = keep * *a + mix * b;
            }
        }
    }

    /// Per-step hook after the optimizer update.
    pub fn after_step<T: Real>(&self, primary: &VitEncoder, store: &mut ParamStore<T>) {
        self.ema_update(primary, store, self.ema_decay);
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.independent.as_ref().map(|e| e.param_ids()).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::{patchify, ImageBatch};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            depth: 2,
            dim: 8,
            heads: 2,
            patch: 2,
            image_side: 4,
            channels: 1,
            mlp_ratio: 2.0,
        }
    }

    fn patches(seed: u64, batch: usize, cfg: &EncoderConfig) -> PatchBatch {
        use rand::Rng as _;
        let mut rng = rng::seeded(seed, 99);
        let n = batch * cfg.image_side * cfg.image_side * cfg.channels;
        let data = (0..n).map(|_| rng.random_range(0.0f32..1.0)).collect();
        let img = ImageBatch::new(batch, cfg.image_side, cfg.image_side, cfg.channels, data).unwrap();
        patchify(&img, cfg.patch).unwrap()
    }

    #[test]
    fn param_count_matches_store() {
        for cfg in [tiny(), EncoderConfig::default()] {
            let mut store = ParamStore::<f32>::new();
            let enc = VitEncoder::new(cfg, &mut store, "enc", &mut rng::seeded(0, 1)).unwrap();
            assert_eq!(store.numel(&enc.param_ids()), cfg.param_count());
            assert_eq!(store.len(), enc.param_ids().len());
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let cfg = EncoderConfig { heads: 3, ..tiny() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn taps_have_layer_shapes() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let enc = VitEncoder::new(cfg, &mut store, "enc", &mut rng::seeded(0, 1)).unwrap();
        let p = patches(1, 3, &cfg);
        let mut g = Graph::new();
        let out = enc.encode_full(&mut g, &store, &p, &ForwardOptions::default()).unwrap();
        assert_eq!(out.taps.len(), 2);
        for t in &out.taps {
            assert_eq!(g.shape(*t), &[3 * 4, 8]);
        }
    }

    #[test]
    fn out_of_range_position_is_shape_error() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let enc = VitEncoder::new(cfg, &mut store, "enc", &mut rng::seeded(0, 1)).unwrap();
        let p = patches(1, 1, &cfg);
        let vis = PatchBatch {
            tokens: 1,
            data: p.patch_vec(0, 0).to_vec(),
            ..p
        };
        let mut g = Graph::new();
        let err = enc.encode_visible(&mut g, &store, &vis, &[vec![7]]);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn unknown_aux_mode() {
        assert!(matches!("teacher".parse::<AuxMode>(), Err(Error::Config(_))));
        assert_eq!("IE".parse::<AuxMode>().unwrap(), AuxMode::Ie);
    }

    #[test]
    fn bind_recovers_same_ids() {
        let cfg = tiny();
        let mut store = ParamStore::<f32>::new();
        let enc = VitEncoder::new(cfg, &mut store, "enc", &mut rng::seeded(0, 1)).unwrap();
        let again = VitEncoder::bind(cfg, &store, "enc").unwrap();
        assert_eq!(enc.param_ids(), again.param_ids());
    }
}
