use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use damim_core::data::{generate_synthetic, SyntheticSpec};
use damim_core::exec::Execution;
use damim_core::fewshot::{evaluate, evaluate_table, EmbeddingTable, EvalConfig};
use damim_core::trainer::{Model, TrainConfig};
use damim_core::vit::EncoderConfig;
use std::hint::black_box;

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn bench_fewshot(c: &mut Criterion) {
    let cfg = TrainConfig {
        encoder: EncoderConfig { depth: 2, dim: 16, heads: 2, ..EncoderConfig::default() },
        ..TrainConfig::default()
    };
    let model = Model::<f32>::init(&cfg).unwrap();
    let data = generate_synthetic(&SyntheticSpec { per_class: 20, ..SyntheticSpec::default() }, 1).unwrap().a;
    let eval = EvalConfig { episodes: 50, ..EvalConfig::default() };

    let mut group = c.benchmark_group("fewshot_evaluate");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(evaluate(&model.store, &model.encoder, &data, &eval, exec).unwrap()))
        });
    }
    group.finish();

    // episodes only, embeddings precomputed
    let rows: Vec<Vec<f64>> = (0..data.len()).map(|i| (0..64).map(|j| ((i * 31 + j * 7) % 97) as f64).collect()).collect();
    let table = EmbeddingTable::from_rows(rows);
    let eval = EvalConfig { episodes: 600, ..EvalConfig::default() };
    let mut group = c.benchmark_group("fewshot_episodes");
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(evaluate_table(&table, &data.labels, &eval, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_fewshot);
criterion_main!(benches);
