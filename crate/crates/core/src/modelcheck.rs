//! Finite-difference checks of composed model gradients.
//!
//! Parameters are perturbed in place and the full forward pass re-run, so
//! these checks cover the encoder, decoder variants, heads and aggregation
//! exactly as training uses them. Targets that are detached by design (layer
//! taps, layer losses) are held fixed by using an independent frozen auxiliary
//! encoder and a zero alpha head, where the detached paths have no
//! first-order effect.

use rand::Rng as _;

use crate::decoder::{Correlation, DecoderConfig};
use crate::error::Result;
use crate::patch::{patchify, sample_batch_masks, split_by_mask, ImageBatch, SplitPatches};
use crate::rng::{self, stream};
use crate::tensor::gradcheck::{rel_err, OpCheck};
use crate::tensor::{Graph, ParamStore, Var};
use crate::trainer::{Model, Regime, TrainConfig};
use crate::vit::{AuxMode, EncoderConfig};

const STEP: f64 = 1e-6;

/// Max relative error over up to `per_param` sampled elements of every
/// trainable parameter.
pub fn check_params(
    store: &mut ParamStore<f64>,
    loss: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    per_param: usize,
    seed: u64,
) -> Result<f64> {
    store.zero_grads();
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    g.backward_into(l, store)?;
    let mut rng = rng::seeded(seed, stream::GRADCHECK);
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).requires_grad).collect();
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.value(id).len();
        let analytic = store
            .get(id)
            .grad
            .as_ref()
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        for _ in 0..per_param.min(n) {
            let j = rng.random_range(0..n);
            let orig = store.value(id).data()[j];
            let eval = |v: f64, store: &mut ParamStore<f64>| -> Result<f64> {
                store.value_mut(id).data_mut()[j] = v;
                let mut g = Graph::new();
                let l = loss(&mut g, store)?;
                Ok(g.value(l).data()[0])
            };
            let up = eval(orig + STEP, store)?;
            let down = eval(orig - STEP, store)?;
            store.value_mut(id).data_mut()[j] = orig;
            worst = worst.max(rel_err(analytic[j], (up - down) / (2.0 * STEP)));
        }
    }
    store.zero_grads();
    Ok(worst)
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        depth: 2,
        dim: 8,
        heads: 2,
        patch: 2,
        image_side: 4,
        channels: 3,
        mlp_ratio: 2.0,
    }
}

fn batch(seed: u64) -> Result<(crate::patch::PatchBatch, SplitPatches)> {
    let cfg = tiny_encoder();
    let mut rng = rng::seeded(seed, stream::GRADCHECK);
    let n = 2 * cfg.image_side * cfg.image_side * cfg.channels;
    let data = (0..n).map(|_| rng.random_range(0.0f32..1.0)).collect();
    let img = ImageBatch::new(2, cfg.image_side, cfg.image_side, cfg.channels, data)?;
    let patches = patchify(&img, cfg.patch)?;
    let masks = sample_batch_masks(&mut rng, 2, cfg.num_patches(), 0.5)?;
    let split = split_by_mask(&patches, &masks)?;
    Ok((patches, split))
}

fn case(name: &str, regime: Regime, decoder: DecoderConfig, seed: u64, per_param: usize) -> Result<OpCheck> {
    let cfg = TrainConfig {
        regime,
        seed,
        encoder: tiny_encoder(),
        decoder: Some(decoder),
        aux_mode: AuxMode::Iog,
        ..TrainConfig::default()
    };
    let model = Model::<f64>::init(&cfg)?;
    let (patches, split) = batch(seed)?;
    let mut store = model.store.clone();
    let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
        let mut m = model.clone();
        m.store = s.clone();
        Ok(m.forward(g, &patches, &split.maps, &split.visible, &cfg)?.0)
    };
    let max_rel_err = check_params(&mut store, &loss, per_param, seed)?;
    Ok(OpCheck {
        op: name.to_string(),
        points: per_param,
        max_rel_err,
    })
}

/// Whole-model gradient checks for each regime and decoder correlation.
pub fn model_suite(seed: u64, per_param: usize) -> Result<Vec<OpCheck>> {
    let d = tiny_encoder().dim;
    let ld = DecoderConfig::lightweight(d);
    let with = |correlation, use_mlp| DecoderConfig {
        correlation,
        use_mlp,
        ..ld
    };
    Ok(vec![
        case("model_pixel_qk_mlp", Regime::Pixel, DecoderConfig::standard(d), seed, per_param)?,
        case("model_pixel_cosine", Regime::Pixel, ld, seed, per_param)?,
        case("model_pixel_euclidean", Regime::Pixel, with(Correlation::Euclidean, true), seed, per_param)?,
        case("model_pixel_identity", Regime::Pixel, with(Correlation::Identity, false), seed, per_param)?,
        case("model_layer_target", Regime::Layer(1), ld, seed, per_param)?,
        case("model_aggregated", Regime::Damim, ld, seed, per_param)?,
    ])
}
