use damim_core::decoder::{Correlation, DecoderConfig, LightDecoder};
use damim_core::patch::{sample_mask, MaskSplit};
use damim_core::rng;
use damim_core::tensor::{Graph, ParamStore, Tensor};
use damim_core::vit::{EncoderConfig, VitEncoder, LN_EPS};

fn set(store: &mut ParamStore<f64>, name: &str, shape: &[usize], v: &[f64]) {
    let id = store.lookup(name).unwrap_or_else(|| panic!("no {name}"));
    *store.value_mut(id) = Tensor::from_vec(shape, v.to_vec()).unwrap();
}

fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + LN_EPS).sqrt()).collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// x·W + b with `W` stored `[in, out]`.
fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out).map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + j]).sum::<f64>()).collect()
}

fn hand_decoder(cfg: DecoderConfig) -> (ParamStore<f64>, LightDecoder) {
    let mut store = ParamStore::<f64>::new();
    let dec = LightDecoder::new(cfg, &mut store, "dec", &mut rng::seeded(0, 2)).unwrap();
    set(&mut store, "dec.blocks.0.v.weight", &[2, 2], &[0.5, -1.0, 2.0, 0.25]);
    set(&mut store, "dec.blocks.0.v.bias", &[2], &[0.1, -0.2]);
    set(&mut store, "dec.blocks.0.o.weight", &[2, 2], &[1.5, 0.0, -0.5, 1.0]);
    set(&mut store, "dec.blocks.0.o.bias", &[2], &[0.0, 0.3]);
    (store, dec)
}

const V_W: [f64; 4] = [0.5, -1.0, 2.0, 0.25];
const V_B: [f64; 2] = [0.1, -0.2];
const O_W: [f64; 4] = [1.5, 0.0, -0.5, 1.0];
const O_B: [f64; 2] = [0.0, 0.3];

fn run(dec: &LightDecoder, store: &ParamStore<f64>, tokens: &[[f64; 2]]) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let n = tokens.len();
    let t = g.constant(Tensor::from_vec(&[n, 2], tokens.iter().flatten().copied().collect()).unwrap());
    let out = dec.forward_tokens(&mut g, store, t, 1, n).unwrap();
    (0..n).map(|i| g.value(out).row(i).to_vec()).collect()
}

fn oracle(tokens: &[[f64; 2]], scores: impl Fn(&[f64; 2], &[f64; 2]) -> f64, tau: f64) -> Vec<Vec<f64>> {
    let vs: Vec<Vec<f64>> = tokens.iter().map(|t| linear(t, &V_W, &V_B)).collect();
    tokens
        .iter()
        .map(|ti| {
            let s: Vec<f64> = tokens.iter().map(|tj| scores(ti, tj) / tau).collect();
            let p = softmax(&s);
            let mixed: Vec<f64> = (0..2).map(|c| p.iter().zip(&vs).map(|(pj, v)| pj * v[c]).sum()).collect();
            let o = linear(&mixed, &O_W, &O_B);
            layer_norm(&[ti[0] + o[0], ti[1] + o[1]])
        })
        .collect()
}

const TOKENS: [[f64; 2]; 3] = [[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0]];

#[test]
fn cosine_block_matches_hand_forward() {
    let (store, dec) = hand_decoder(DecoderConfig::lightweight(2));
    let cos = |a: &[f64; 2], b: &[f64; 2]| {
        (a[0] * b[0] + a[1] * b[1]) / ((a[0] * a[0] + a[1] * a[1]).sqrt() * (b[0] * b[0] + b[1] * b[1]).sqrt())
    };
    let got = run(&dec, &store, &TOKENS);
    let want = oracle(&TOKENS, cos, 1.0);
    for (g, w) in got.iter().zip(&want) {
        for (a, b) in g.iter().zip(w) {
            assert!((a - b).abs() < 1e-9, "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn euclidean_block_matches_hand_forward() {
    let cfg = DecoderConfig {
        correlation: Correlation::Euclidean,
        temperature: 2.0,
        ..DecoderConfig::lightweight(2)
    };
    let (store, dec) = hand_decoder(cfg);
    let neg_sq = |a: &[f64; 2], b: &[f64; 2]| -((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2));
    let got = run(&dec, &store, &TOKENS);
    let want = oracle(&TOKENS, neg_sq, 2.0);
    for (g, w) in got.iter().zip(&want) {
        for (a, b) in g.iter().zip(w) {
            assert!((a - b).abs() < 1e-9, "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn identity_correlation_low_temperature_is_per_token() {
    let cfg = DecoderConfig {
        correlation: Correlation::Identity,
        temperature: 1e-4,
        ..DecoderConfig::lightweight(2)
    };
    let (store, dec) = hand_decoder(cfg);
    let got = run(&dec, &store, &TOKENS);
    for (t, row) in TOKENS.iter().zip(&got) {
        let o = linear(&linear(t, &V_W, &V_B), &O_W, &O_B);
        let want = layer_norm(&[t[0] + o[0], t[1] + o[1]]);
        for (a, b) in row.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn rows_of_mixing_are_stochastic() {
    // with V = I, O = I and zero biases, constant tokens stay fixed points of mixing
    let mut store = ParamStore::<f64>::new();
    let dec = LightDecoder::new(DecoderConfig::lightweight(2), &mut store, "dec", &mut rng::seeded(1, 2)).unwrap();
    for name in ["v", "o"] {
        set(&mut store, &format!("dec.blocks.0.{name}.weight"), &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        set(&mut store, &format!("dec.blocks.0.{name}.bias"), &[2], &[0.0, 0.0]);
    }
    let tok = [[0.3, -0.7]; 4];
    let got = run(&dec, &store, &tok);
    let want = layer_norm(&[0.6, -1.4]);
    for row in got {
        assert!((row[0] - want[0]).abs() < 1e-9 && (row[1] - want[1]).abs() < 1e-9);
    }
}

#[test]
fn assemble_restores_order_with_mask_tokens() {
    let ec = EncoderConfig {
        depth: 1,
        dim: 4,
        heads: 2,
        patch: 2,
        image_side: 4,
        channels: 3,
        mlp_ratio: 2.0,
    };
    let mut store = ParamStore::<f64>::new();
    let enc = VitEncoder::new(ec, &mut store, "enc", &mut rng::seeded(0, 1)).unwrap();
    let dec = LightDecoder::new(DecoderConfig::lightweight(4), &mut store, "dec", &mut rng::seeded(0, 2)).unwrap();
    let maps: Vec<MaskSplit> = (0..2).map(|s| MaskSplit::from_mask(&sample_mask(4, 0.5, s).unwrap())).collect();
    let z_rows: Vec<f64> = (0..2 * 2 * 4).map(|i| i as f64).collect();
    let mut g = Graph::new();
    let z = g.constant(Tensor::from_vec(&[4, 4], z_rows.clone()).unwrap());
    let t = dec.assemble(&mut g, &store, &enc, z, &maps).unwrap();
    let t = g.value(t).clone();
    let mask = store.value(dec.mask_token()).data().to_vec();
    let pos = store.value(enc.pos_embed()).clone();
    for (b, m) in maps.iter().enumerate() {
        for (j, &p) in m.visible_idx.iter().enumerate() {
            assert_eq!(t.row(b * 4 + p), &z_rows[(b * 2 + j) * 4..(b * 2 + j + 1) * 4]);
        }
        for &p in &m.masked_idx {
            let want: Vec<f64> = mask.iter().zip(pos.row(p)).map(|(a, b)| a + b).collect();
            assert_eq!(t.row(b * 4 + p), want.as_slice());
        }
    }
}

#[test]
fn lightweight_has_fewer_parameters_than_standard() {
    for d in [2, 8, 32, 64] {
        let ld = DecoderConfig::lightweight(d);
        let qk_mlp = DecoderConfig {
            correlation: Correlation::QkAttention,
            use_mlp: true,
            ..ld
        };
        let h = ld.hidden();
        assert_eq!(ld.param_count(), d + 2 * (d * d + d) + 2 * d);
        assert_eq!(qk_mlp.param_count(), ld.param_count() + 2 * (d * d + d) + 2 * d + d * h + h + h * d + d);
        assert!(ld.param_count() < qk_mlp.param_count());
        for cfg in [ld, qk_mlp, DecoderConfig::standard(d)] {
            let mut store = ParamStore::<f32>::new();
            let dec = LightDecoder::new(cfg, &mut store, "dec", &mut rng::seeded(0, 2)).unwrap();
            assert_eq!(store.numel(&dec.param_ids()), cfg.param_count());
            assert_eq!(store.len(), dec.param_ids().len());
        }
    }
}
