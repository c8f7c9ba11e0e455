//! Masked-image-modeling pretraining.
//!
//! Three regimes share one loop: raw-pixel reconstruction through a linear
//! head, reconstruction of a single detached encoder layer, and reconstruction
//! of the aggregated multi-layer target.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;

use crate::afr::AfrModule;
use crate::data::{Checkpoint, ConfigFile, LabeledDataset};
use crate::decoder::{Correlation, DecoderConfig, LightDecoder};
use crate::error::{Error, Result};
use crate::patch::{patchify, sample_batch_masks, split_by_mask, MaskSplit, PatchBatch};
use crate::rng::{self, stream};
use crate::tensor::{Graph, OptimizerKind, OptimizerState, ParamGroup, ParamId, ParamStore, Real, Tensor, Var};
use crate::vit::{AuxEncoder, AuxMode, EncoderConfig, Linear, VitEncoder};

pub const ENCODER_PREFIX: &str = "enc";
pub const DECODER_PREFIX: &str = "dec";
pub const AFR_PREFIX: &str = "afr";
pub const PIXEL_HEAD: &str = "head.pixel";
const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Pixel,
    /// Target is encoder layer `l` (1-based).
    Layer(usize),
    Damim,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        match s.as_str() {
            "pixel" => return Ok(Regime::Pixel),
            "damim" => return Ok(Regime::Damim),
            _ => {}
        }
        s.strip_prefix("layer")
            .map(|r| r.trim_start_matches(['_', ':', '-']))
            .and_then(|r| r.parse().ok())
            .map(Regime::Layer)
            .ok_or_else(|| Error::Config(format!("unknown regime `{s}`")))
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Pixel => f.write_str("pixel"),
            Regime::Layer(l) => write!(f, "layer_{l}"),
            Regime::Damim => f.write_str("damim"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossScope {
    MaskedOnly,
    AllTokens,
}

impl FromStr for LossScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked_only" | "masked" => Ok(LossScope::MaskedOnly),
            "all_tokens" | "all" => Ok(LossScope::AllTokens),
            other => Err(Error::Config(format!("unknown loss scope `{other}`"))),
        }
    }
}

/// Learning-rate layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OptimizerPreset {
    /// One learning rate for every group, for training from scratch.
    #[default]
    Desk,
    /// Backbone 1e-7, decoder 1e-6, for adapting an already trained model.
    Finetune,
}

impl FromStr for OptimizerPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(OptimizerPreset::Desk),
            "finetune" => Ok(OptimizerPreset::Finetune),
            other => Err(Error::Config(format!("unknown optimizer preset `{other}`"))),
        }
    }
}

pub const FINETUNE_CLASSIFIER_LR: f64 = 1e-3;
pub const FINETUNE_BACKBONE_LR: f64 = 1e-7;
pub const FINETUNE_DECODER_LR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub steps: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub seed: u64,
    /// `None` picks masked-only for pixels and all tokens for features.
    pub loss_scope: Option<LossScope>,
    pub normalize_pixels: bool,
    pub optimizer: OptimizerPreset,
    pub lr: f64,
    pub weight_decay: f64,
    pub encoder: EncoderConfig,
    /// `None` picks the lightweight decoder for the aggregated regime and the
    /// standard decoder otherwise.
    pub decoder: Option<DecoderConfig>,
    pub aux_mode: AuxMode,
    pub ema_decay: f64,
    pub alpha_smoothing: Option<f64>,
    /// Fill the `ms` log column with wall-clock time. Off keeps logs
    /// byte-reproducible.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Damim,
            steps: 500,
            batch_size: 16,
            mask_ratio: 0.75,
            seed: 1,
            loss_scope: None,
            normalize_pixels: false,
            optimizer: OptimizerPreset::Desk,
            lr: 1e-3,
            weight_decay: 0.05,
            encoder: EncoderConfig::default(),
            decoder: None,
            aux_mode: AuxMode::SharedDetached,
            ema_decay: 0.996,
            alpha_smoothing: None,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "regime",
        "steps",
        "batch_size",
        "mask_ratio",
        "seed",
        "loss_scope",
        "normalize_pixels",
        "optimizer",
        "lr",
        "weight_decay",
        "depth",
        "dim",
        "heads",
        "patch",
        "image_side",
        "mlp_ratio",
        "decoder",
        "decoder_correlation",
        "decoder_mlp",
        "decoder_temperature",
        "decoder_depth",
        "aux_mode",
        "ema_decay",
        "alpha_smoothing",
        "record_time",
    ];

    /// Overrides fields from `cfg`; keys outside [`Self::KEYS`] are ignored
    /// here and must be checked by the caller.
    pub fn apply(&mut self, cfg: &ConfigFile) -> Result<()> {
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = cfg.parsed($key)? {
                    $field = v;
                }
            };
        }
        set!("regime", self.regime);
        set!("steps", self.steps);
        set!("batch_size", self.batch_size);
        set!("mask_ratio", self.mask_ratio);
        set!("seed", self.seed);
        if let Some(v) = cfg.parsed("loss_scope")? {
            self.loss_scope = Some(v);
        }
        if let Some(v) = cfg.bool("normalize_pixels")? {
            self.normalize_pixels = v;
        }
        set!("optimizer", self.optimizer);
        set!("lr", self.lr);
        set!("weight_decay", self.weight_decay);
        set!("depth", self.encoder.depth);
        set!("dim", self.encoder.dim);
        set!("heads", self.encoder.heads);
        set!("patch", self.encoder.patch);
        set!("image_side", self.encoder.image_side);
        set!("mlp_ratio", self.encoder.mlp_ratio);
        let mut dec = self.decoder;
        if let Some(name) = cfg.get("decoder") {
            dec = match name {
                "auto" => None,
                n => Some(DecoderConfig::preset(n, self.encoder.dim)?),
            };
        }
        let touched = ["decoder_correlation", "decoder_mlp", "decoder_temperature", "decoder_depth"]
            .iter()
            .any(|k| cfg.get(k).is_some());
        if touched {
            let mut d = dec.unwrap_or_else(|| self.default_decoder());
            if let Some(v) = cfg.parsed::<Correlation>("decoder_correlation")? {
                d.correlation = v;
            }
            if let Some(v) = cfg.bool("decoder_mlp")? {
                d.use_mlp = v;
            }
            if let Some(v) = cfg.parsed("decoder_temperature")? {
                d.temperature = v;
            }
            if let Some(v) = cfg.parsed("decoder_depth")? {
                d.depth = v;
            }
            dec = Some(d);
        }
        self.decoder = dec;
        set!("aux_mode", self.aux_mode);
        set!("ema_decay", self.ema_decay);
        if let Some(v) = cfg.parsed::<f64>("alpha_smoothing")? {
            self.alpha_smoothing = (v > 0.0).then_some(v);
        }
        if let Some(v) = cfg.bool("record_time")? {
            self.record_time = v;
        }
        Ok(())
    }

    pub fn default_decoder(&self) -> DecoderConfig {
        match self.regime {
            Regime::Damim => DecoderConfig::lightweight(self.encoder.dim),
            _ => DecoderConfig::standard(self.encoder.dim),
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        let mut d = self.decoder.unwrap_or_else(|| self.default_decoder());
        d.dim = self.encoder.dim;
        d
    }

    pub fn scope(&self) -> LossScope {
        self.loss_scope.unwrap_or(match self.regime {
            Regime::Pixel => LossScope::MaskedOnly,
            _ => LossScope::AllTokens,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder_config().validate()?;
        if let Regime::Layer(l) = self.regime {
            if l == 0 || l > self.encoder.depth {
                return Err(Error::Config(format!(
                    "layer target {l} outside 1..={}",
                    self.encoder.depth
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Encoder, decoder and regime-specific heads in one parameter store.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub store: ParamStore<T>,
    pub encoder: VitEncoder,
    pub decoder: LightDecoder,
    pub aux: AuxEncoder,
    pub pixel_head: Option<Linear>,
    pub afr: Option<AfrModule>,
    pub regime: Regime,
}

fn encoder_meta(c: &EncoderConfig) -> [f64; 7] {
    [
        c.depth as f64,
        c.dim as f64,
        c.heads as f64,
        c.patch as f64,
        c.image_side as f64,
        c.channels as f64,
        c.mlp_ratio,
    ]
}

pub const ENCODER_META: &str = "encoder_config";

/// Reads the encoder config recorded in a checkpoint.
pub fn encoder_config_from(ck: &Checkpoint) -> Result<EncoderConfig> {
    let m = ck
        .meta(ENCODER_META)
        .ok_or_else(|| Error::Data("checkpoint has no encoder config".into()))?;
    if m.len() != 7 || m[..6].iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
        return Err(Error::Data(format!("malformed encoder config {m:?}")));
    }
    let cfg = EncoderConfig {
        depth: m[0] as usize,
        dim: m[1] as usize,
        heads: m[2] as usize,
        patch: m[3] as usize,
        image_side: m[4] as usize,
        channels: m[5] as usize,
        mlp_ratio: m[6],
    };
    cfg.validate().map_err(|e| Error::Data(e.to_string()))?;
    Ok(cfg)
}

/// Encoder weights from a checkpoint, alone in a fresh store.
pub fn load_encoder<T: Real>(ck: &Checkpoint) -> Result<(ParamStore<T>, VitEncoder)> {
    let cfg = encoder_config_from(ck)?;
    let mut store = ParamStore::new();
    let prefix = format!("{ENCODER_PREFIX}.");
    for a in ck.arrays.iter().filter(|a| a.name.starts_with(&prefix)) {
        store.add(a.name.clone(), ck.tensor(&a.name)?)?;
    }
    let enc = VitEncoder::bind(cfg, &store, ENCODER_PREFIX)?;
    Ok((store, enc))
}

/// Encoder weights alone, with the config recorded.
pub fn encoder_checkpoint<T: Real>(store: &ParamStore<T>, encoder: &VitEncoder) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.push_meta(ENCODER_META, &encoder_meta(&encoder.config))?;
    for id in encoder.param_ids() {
        let p = store.get(id);
        ck.push_tensor(p.name.clone(), &p.value)?;
    }
    Ok(ck)
}

impl<T: Real> Model<T> {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = VitEncoder::new(
            cfg.encoder,
            &mut store,
            ENCODER_PREFIX,
            &mut rng::seeded(cfg.seed, stream::ENCODER_INIT),
        )?;
        let decoder = LightDecoder::new(
            cfg.decoder_config(),
            &mut store,
            DECODER_PREFIX,
            &mut rng::seeded(cfg.seed, stream::DECODER_INIT),
        )?;
        let mut pixel_head = None;
        let mut afr = None;
        let aux_mode = match cfg.regime {
            Regime::Pixel => AuxMode::SharedDetached,
            _ => cfg.aux_mode,
        };
        match cfg.regime {
            Regime::Pixel => {
                pixel_head = Some(Linear::new(
                    &mut store,
                    PIXEL_HEAD,
                    cfg.encoder.dim,
                    cfg.encoder.patch_dim(),
                    &mut rng::seeded(cfg.seed, stream::HEAD_INIT),
                )?);
            }
            Regime::Damim => {
                afr = Some(
                    AfrModule::new(&mut store, AFR_PREFIX, cfg.encoder.depth, cfg.encoder.dim)?
                        .with_smoothing(cfg.alpha_smoothing)?,
                );
            }
            Regime::Layer(_) => {}
        }
        let aux = AuxEncoder::new(aux_mode, &encoder, &mut store, cfg.ema_decay)?;
        Ok(Self {
            store,
            encoder,
            decoder,
            aux,
            pixel_head,
            afr,
            regime: cfg.regime,
        })
    }

    /// Trainable parameter groups: backbone (encoder plus a trained
    /// independent auxiliary copy) and decoder (decoder, heads, projections).
    pub fn groups(&self) -> (Vec<ParamId>, Vec<ParamId>) {
        let mut backbone = self.encoder.param_ids();
        if self.aux.mode == AuxMode::Iwg {
            backbone.extend(self.aux.param_ids());
        }
        let mut decoder = self.decoder.param_ids();
        if let Some(h) = &self.pixel_head {
            decoder.extend(h.ids());
        }
        if let Some(a) = &self.afr {
            decoder.extend(a.param_ids());
        }
        (backbone, decoder)
    }

    pub fn optimizer(&self, cfg: &TrainConfig) -> Result<OptimizerState> {
        let (backbone, decoder) = self.groups();
        let (lb, ld) = match cfg.optimizer {
            OptimizerPreset::Desk => (cfg.lr, cfg.lr),
            OptimizerPreset::Finetune => (FINETUNE_BACKBONE_LR, FINETUNE_DECODER_LR),
        };
        let mut groups = Vec::with_capacity(4);
        for (name, lr, ids) in [("backbone", lb, backbone), ("decoder", ld, decoder)] {
            let (decay, plain): (Vec<_>, Vec<_>) = ids.into_iter().partition(|&id| decays(&self.store, id));
            groups.push(ParamGroup::new(name, lr, cfg.weight_decay, decay));
            groups.push(ParamGroup::new(format!("{name}.no_decay"), lr, 0.0, plain));
        }
        OptimizerState::new(OptimizerKind::adamw(), groups)
    }

    /// Every parameter plus the encoder config.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push_meta(ENCODER_META, &encoder_meta(&self.encoder.config))?;
        for (_, p) in self.store.iter() {
            ck.push_tensor(p.name.clone(), &p.value)?;
        }
        Ok(ck)
    }

    /// One forward pass; returns `(loss, alpha)`.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        patches: &PatchBatch,
        maps: &[MaskSplit],
        visible: &PatchBatch,
        cfg: &TrainConfig,
    ) -> Result<(Var, Option<Var>)> {
        let z = self.encoder.encode_split(g, &self.store, visible, maps)?;
        let recon = self.decoder.decode(g, &self.store, &self.encoder, z, maps)?;
        let scope = cfg.scope();
        let scope_maps = (scope == LossScope::MaskedOnly).then_some(maps);
        match self.regime {
            Regime::Pixel => {
                let head = self.pixel_head.as_ref().expect("pixel head");
                let pred = head.forward(g, &self.store, recon, false)?;
                let loss = pixel_loss(g, pred, patches, scope_maps, cfg.normalize_pixels)?;
                Ok((loss, None))
            }
            Regime::Layer(l) => {
                let feats = self
                    .aux
                    .encode_full_with_taps(&self.encoder, g, &self.store, patches, Some(l))?;
                let target = feats.layers[l - 1];
                Ok((damim_loss(g, recon, target, scope_maps)?, None))
            }
            Regime::Damim => {
                let feats = self
                    .aux
                    .encode_full_with_taps(&self.encoder, g, &self.store, patches, None)?;
                let afr = self.afr.as_mut().expect("afr module");
                let agg = afr.target(g, &self.store, recon, &feats.layers)?;
                Ok((damim_loss(g, recon, agg.target, scope_maps)?, Some(agg.alpha)))
            }
        }
    }
}

/// Weight decay applies to matrices only; biases, norm parameters, the
/// positional embedding and the mask token are exempt.
fn decays<T: Real>(store: &ParamStore<T>, id: ParamId) -> bool {
    let p = store.get(id);
    p.value.shape().len() >= 2 && !p.name.ends_with("pos_embed") && !p.name.ends_with("mask_token")
}

fn masked_rows(maps: &[MaskSplit]) -> Vec<usize> {
    maps.iter()
        .enumerate()
        .flat_map(|(b, m)| {
            let n = m.tokens();
            m.masked_idx.iter().map(move |&i| b * n + i)
        })
        .collect()
}

fn normalized_patch(v: &[f32]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    v.iter().map(|&x| (x as f64 - mean) * inv).collect()
}

/// Squared error between predicted patch pixels `[B·N × P²C]` and the
/// target patches, over masked patches when `maps` is given.
///
/// Each patch contributes its per-pixel mean squared error and the sum is
/// divided by the number of contributing patches, so the masked-only form
/// divides by the masked count `B·N·r`.
pub fn pixel_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: &PatchBatch,
    maps: Option<&[MaskSplit]>,
    normalize: bool,
) -> Result<Var> {
    let d = target.patch_dim();
    let rows = target.batch * target.tokens;
    if g.shape(pred) != [rows, d] {
        return Err(Error::shape(format!(
            "prediction {:?} for {rows} patches of {d} values",
            g.shape(pred)
        )));
    }
    let picked: Vec<usize> = match maps {
        Some(m) => {
            if m.len() != target.batch {
                return Err(Error::shape(format!("{} masks for {} images", m.len(), target.batch)));
            }
            masked_rows(m)
        }
        None => (0..rows).collect(),
    };
    if picked.is_empty() {
        return Err(Error::Contract("pixel loss over zero masked patches".into()));
    }
    let mut tv = Vec::with_capacity(picked.len() * d);
    for &r in &picked {
        let p = &target.data[r * d..(r + 1) * d];
        if normalize {
            tv.extend(normalized_patch(p).into_iter().map(T::of));
        } else {
            tv.extend(p.iter().map(|&x| T::of_f32(x)));
        }
    }
    let t = g.constant(Tensor::from_vec(&[picked.len(), d], tv)?);
    let p = if maps.is_some() { g.gather_rows(pred, &picked)? } else { pred };
    g.mse(p, t)
}

/// Token-feature reconstruction error `mean ‖F_i − R_i‖²/d` over all tokens,
/// or over masked tokens when `maps` is given.
pub fn damim_loss<T: Real>(g: &mut Graph<T>, recon: Var, target: Var, maps: Option<&[MaskSplit]>) -> Result<Var> {
    if g.shape(recon) != g.shape(target) {
        return Err(Error::shape(format!(
            "reconstruction {:?} vs target {:?}",
            g.shape(recon),
            g.shape(target)
        )));
    }
    match maps {
        None => g.mse(recon, target),
        Some(m) => {
            let rows = masked_rows(m);
            if rows.is_empty() {
                return Err(Error::Contract("feature loss over zero masked tokens".into()));
            }
            let r = g.gather_rows(recon, &rows)?;
            let t = g.gather_rows(target, &rows)?;
            g.mse(r, t)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub step: usize,
    pub regime: Regime,
    pub loss: f64,
    pub alpha: Vec<f64>,
    pub ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub log: Vec<TrainLogRecord>,
}

impl<T> TrainOutcome<T> {
    /// Mean loss over the last `fraction` of logged steps (at least one).
    pub fn final_window_loss(&self, fraction: f64) -> Option<f64> {
        window_mean(&self.log, fraction, true)
    }

    pub fn first_window_loss(&self, fraction: f64) -> Option<f64> {
        window_mean(&self.log, fraction, false)
    }
}

fn window_mean(log: &[TrainLogRecord], fraction: f64, tail: bool) -> Option<f64> {
    if log.is_empty() {
        return None;
    }
    let w = ((log.len() as f64 * fraction).ceil() as usize).clamp(1, log.len());
    let slice = if tail { &log[log.len() - w..] } else { &log[..w] };
    Some(slice.iter().map(|r| r.loss).sum::<f64>() / w as f64)
}

fn abort(step: usize, reason: String, snapshot: &Option<Checkpoint>) -> Error {
    Error::NumericAbort {
        step,
        reason,
        last_good: snapshot.as_ref().and_then(|c| c.to_bytes().ok()),
    }
}

/// Trains a fresh model.
pub fn train<T: Real>(cfg: &TrainConfig, data: &LabeledDataset) -> Result<TrainOutcome<T>> {
    let model = Model::init(cfg)?;
    train_model(cfg, model, data)
}

/// Continues training `model` for `cfg.steps` steps.
pub fn train_model<T: Real>(cfg: &TrainConfig, mut model: Model<T>, data: &LabeledDataset) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut log = Vec::with_capacity(cfg.steps);
    if cfg.steps == 0 {
        return Ok(TrainOutcome { model, log });
    }
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let ec = &cfg.encoder;
    if data.side != ec.image_side || data.channels != ec.channels {
        return Err(Error::Data(format!(
            "dataset images are {}x{}x{}, encoder expects {}x{}x{}",
            data.side, data.side, data.channels, ec.image_side, ec.image_side, ec.channels
        )));
    }
    let mut opt = model.optimizer(cfg)?;
    let mut batch_rng = rng::seeded(cfg.seed, stream::BATCHES);
    let mut mask_rng = rng::seeded(cfg.seed, stream::MASKS);
    let b = cfg.batch_size.min(data.len());
    let n = ec.num_patches();
    let mut last_good: Option<Checkpoint> = None;
    for step in 1..=cfg.steps {
        let started = Instant::now();
        let idx = index::sample(&mut batch_rng, data.len(), b).into_vec();
        let patches = patchify(&data.batch(&idx)?, ec.patch)?;
        let masks = sample_batch_masks(&mut mask_rng, b, n, cfg.mask_ratio)?;
        let split = split_by_mask(&patches, &masks)?;
        let mut g = Graph::new();
        let (loss, alpha) = match model.forward(&mut g, &patches, &split.maps, &split.visible, cfg) {
            Ok(v) => v,
            Err(Error::Numeric(m)) => return Err(abort(step, m, &last_good)),
            Err(e) => return Err(e),
        };
        let loss_value = g.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            return Err(abort(step, format!("loss became {loss_value}"), &last_good));
        }
        last_good = Some(model.checkpoint()?);
        g.backward_into(loss, &mut model.store)?;
        opt.step(&mut model.store)?;
        model.aux.after_step(&model.encoder, &mut model.store);
        log.push(TrainLogRecord {
            step,
            regime: cfg.regime,
            loss: loss_value,
            alpha: alpha.map(|a| g.value(a).to_f64_vec()).unwrap_or_default(),
            ms: if cfg.record_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        });
    }
    Ok(TrainOutcome { model, log })
}

/// Writes `step,regime,loss,alpha_1..alpha_L,ms`; alpha cells are empty
/// outside the aggregated regime.
pub fn write_log_csv<W: Write>(mut w: W, log: &[TrainLogRecord], layers: usize) -> std::io::Result<()> {
    let alpha_cols: Vec<String> = (1..=layers).map(|l| format!("alpha_{l}")).collect();
    writeln!(w, "step,regime,loss,{},ms", alpha_cols.join(","))?;
    for r in log {
        let alpha: Vec<String> = (0..layers)
            .map(|l| r.alpha.get(l).map(|a| a.to_string()).unwrap_or_default())
            .collect();
        writeln!(w, "{},{},{},{},{}", r.step, r.regime, r.loss, alpha.join(","), r.ms)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regime_parsing() {
        assert_eq!("layer_3".parse::<Regime>().unwrap(), Regime::Layer(3));
        assert_eq!("layer6".parse::<Regime>().unwrap(), Regime::Layer(6));
        assert_eq!("DAMIM".parse::<Regime>().unwrap(), Regime::Damim);
        assert!("layer_x".parse::<Regime>().is_err());
        assert_eq!(Regime::Layer(2).to_string(), "layer_2");
    }

    #[test]
    fn layer_out_of_range_rejected() {
        let cfg = TrainConfig {
            regime: Regime::Layer(7),
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn decoder_defaults_follow_regime() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.decoder_config().correlation, Correlation::Cosine);
        cfg.regime = Regime::Pixel;
        assert_eq!(cfg.decoder_config().correlation, Correlation::QkAttention);
    }

    #[test]
    fn config_file_overrides() {
        let file = ConfigFile::parse("regime = pixel\nsteps = 7\ndecoder = ld\ndecoder_temperature = 0.5").unwrap();
        let mut cfg = TrainConfig::default();
        cfg.apply(&file).unwrap();
        assert_eq!(cfg.regime, Regime::Pixel);
        assert_eq!(cfg.steps, 7);
        let d = cfg.decoder_config();
        assert_eq!((d.correlation, d.temperature), (Correlation::Cosine, 0.5));
    }

    #[test]
    fn window_means() {
        let log: Vec<TrainLogRecord> = (1..=10)
            .map(|s| TrainLogRecord {
                step: s,
                regime: Regime::Pixel,
                loss: s as f64,
                alpha: vec![],
                ms: 0,
            })
            .collect();
        assert_eq!(window_mean(&log, 0.1, true), Some(10.0));
        assert_eq!(window_mean(&log, 0.2, false), Some(1.5));
    }
}
