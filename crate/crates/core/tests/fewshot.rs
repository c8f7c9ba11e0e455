use damim_core::data::LabeledDataset;
use damim_core::exec::Execution;
use damim_core::fewshot::{
    classify_prototype, evaluate, evaluate_table, finetune_episode, random_permutation, relabel, sample_episode,
    Distance, EmbeddingTable, EvalConfig, EvalMode, FinetuneConfig,
};
use damim_core::trainer::{Model, TrainConfig};
use damim_core::vit::EncoderConfig;
use damim_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn labels(classes: usize, per: usize) -> Vec<usize> {
    (0..classes * per).map(|i| i / per).collect()
}

/// Nearest prototype by exhaustive comparison, prototypes from explicit sums.
fn brute_force(rows: &[Vec<f64>], support: &[usize], sl: &[usize], k: usize, query: &[usize], cosine: bool) -> Vec<usize> {
    let dim = rows[0].len();
    let mut protos = vec![vec![0.0; dim]; k];
    for c in 0..k {
        let members: Vec<usize> = support.iter().zip(sl).filter(|(_, &l)| l == c).map(|(&s, _)| s).collect();
        for &m in &members {
            for j in 0..dim {
                protos[c][j] += rows[m][j] / members.len() as f64;
            }
        }
    }
    query
        .iter()
        .map(|&qi| {
            let mut best = (0, f64::INFINITY);
            for (c, p) in protos.iter().enumerate() {
                let d = if cosine {
                    let dot: f64 = (0..dim).map(|j| rows[qi][j] * p[j]).sum();
                    let nq: f64 = rows[qi].iter().map(|v| v * v).sum::<f64>().sqrt();
                    let np: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                    1.0 - dot / (nq * np)
                } else {
                    (0..dim).map(|j| (rows[qi][j] - p[j]).powi(2)).sum()
                };
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect()
}

#[test]
fn prototype_classifier_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lab = labels(6, 8);
    for e in 0..100 {
        let dim = rng.random_range(1..5);
        let rows: Vec<Vec<f64>> = (0..lab.len()).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let k = rng.random_range(2..6);
        let n = rng.random_range(1..4);
        let ep = sample_episode(&lab, k, n, 3, e).unwrap();
        let table = EmbeddingTable::from_rows(rows.clone());
        for (kind, cosine) in [(Distance::Euclidean, false), (Distance::Cosine, true)] {
            let got = classify_prototype(&table.get(&ep.support), &ep.support_labels, k, &table.get(&ep.query), kind);
            assert_eq!(got, brute_force(&rows, &ep.support, &ep.support_labels, k, &ep.query, cosine));
        }
    }
}

#[test]
fn uninformative_embeddings_score_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lab = labels(10, 30);
    let rows: Vec<Vec<f64>> = lab.iter().map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let table = EmbeddingTable::from_rows(rows);
    for k in [2, 5] {
        let cfg = EvalConfig { k, ..EvalConfig::default() };
        let rep = evaluate_table(&table, &lab, &cfg, Execution::Sequential).unwrap();
        assert_eq!(rep.accuracies.len(), 600);
        let chance = 100.0 / k as f64;
        assert!((rep.mean_acc - chance).abs() < 2.0, "k={k}: {}", rep.mean_acc);
    }
}

#[test]
fn episodes_are_disjoint_balanced_and_deterministic() {
    let lab = labels(7, 25);
    for seed in 0..30 {
        let ep = sample_episode(&lab, 5, 5, 15, seed).unwrap();
        assert_eq!(ep, sample_episode(&lab, 5, 5, 15, seed).unwrap());
        assert_eq!(ep.support.len(), 25);
        assert_eq!(ep.query.len(), 75);
        let mut all: Vec<usize> = ep.support.iter().chain(&ep.query).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 100);
        let mut classes = ep.classes.clone();
        classes.sort_unstable();
        classes.dedup();
        assert_eq!(classes.len(), 5);
        for (&s, &l) in ep.support.iter().zip(&ep.support_labels) {
            assert_eq!(lab[s], ep.classes[l]);
        }
        for c in 0..5 {
            assert_eq!(ep.support_labels.iter().filter(|&&l| l == c).count(), 5);
        }
    }
}

#[test]
fn too_few_samples_names_the_deficit() {
    let lab = labels(5, 10);
    match sample_episode(&lab, 5, 5, 15, 1) {
        Err(Error::Data(msg)) => assert!(msg.contains("5 classes") && msg.contains("20"), "{msg}"),
        other => panic!("expected data error, got {other:?}"),
    }
}

#[test]
fn accuracy_is_invariant_to_relabeling() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let lab = labels(5, 20);
    let rows: Vec<Vec<f64>> = lab.iter().map(|&l| vec![l as f64 + rng.random_range(-0.8..0.8), rng.random_range(-1.0..1.0)]).collect();
    let table = EmbeddingTable::from_rows(rows);
    for seed in 0..20 {
        let ep = sample_episode(&lab, 5, 3, 5, seed).unwrap();
        let perm = random_permutation(5, seed);
        let rl = relabel(&ep, &perm);
        let acc = |e: &damim_core::fewshot::Episode| {
            let p = classify_prototype(&table.get(&e.support), &e.support_labels, 5, &table.get(&e.query), Distance::Euclidean);
            damim_core::fewshot::accuracy(&p, &e.query_labels)
        };
        assert_eq!(acc(&ep), acc(&rl));
    }
}

fn tiny() -> (Model<f32>, LabeledDataset) {
    let cfg = TrainConfig {
        encoder: EncoderConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            patch: 4,
            image_side: 8,
            channels: 3,
            mlp_ratio: 2.0,
        },
        ..TrainConfig::default()
    };
    let model = Model::<f32>::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lab = labels(3, 8);
    let mut px = Vec::new();
    for &l in &lab {
        for _ in 0..8 * 8 * 3 {
            px.push((0.3 * l as f32 + rng.random_range(0.0..0.3)).min(1.0));
        }
    }
    (model, LabeledDataset::new(8, 3, px, lab).unwrap())
}

#[test]
fn finetune_adapts_a_copy_and_fits_support() {
    let (model, data) = tiny();
    let before = model.store.clone();
    let ep = sample_episode(&data.labels, 3, 2, 2, 4).unwrap();
    let cfg = FinetuneConfig { steps: 60, lr: 0.5, backbone_lr: 0.01, momentum: 0.9 };
    let adapted = finetune_episode(&model.store, &model.encoder, &data, &ep, &cfg, 1).unwrap();
    assert!(adapted.support_accuracy >= 99.0, "{}", adapted.support_accuracy);
    assert!(adapted.store.lookup("head.classifier.weight").is_some());
    assert!(model.store.lookup("head.classifier.weight").is_none());
    for ((_, a), (_, b)) in model.store.iter().zip(before.iter()) {
        assert_eq!(a.value, b.value);
    }
    let enc_id = adapted.store.lookup("enc.patch_embed.weight").unwrap();
    assert_ne!(adapted.store.value(enc_id), model.store.value(enc_id));
    let frozen = FinetuneConfig { backbone_lr: 0.0, ..cfg };
    let kept = finetune_episode(&model.store, &model.encoder, &data, &ep, &frozen, 1).unwrap();
    assert_eq!(kept.store.value(enc_id), model.store.value(enc_id));
    let bad = FinetuneConfig { lr: 0.0, ..cfg };
    assert!(matches!(finetune_episode(&model.store, &model.encoder, &data, &ep, &bad, 1), Err(Error::Config(_))));
}

#[test]
fn parallel_and_sequential_reports_agree() {
    let (model, data) = tiny();
    let cfg = EvalConfig { k: 3, n: 2, q: 3, episodes: 40, ..EvalConfig::default() };
    let a = evaluate(&model.store, &model.encoder, &data, &cfg, Execution::Sequential).unwrap();
    let b = evaluate(&model.store, &model.encoder, &data, &cfg, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    let ft = EvalConfig { mode: EvalMode::Finetune, episodes: 2, finetune: FinetuneConfig { steps: 3, ..FinetuneConfig::default() }, ..cfg };
    let c = evaluate(&model.store, &model.encoder, &data, &ft, Execution::Sequential).unwrap();
    assert_eq!(c.accuracies.len(), 2);
    assert!(c.ci95 >= 0.0);
}
