use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fisher_prune::data::Dataset;
use fisher_prune::fim::{estimate, FimConfig, FimEstimator};
use fisher_prune::model::{build_model, ArchitectureSpec, Model};
use fisher_prune::oracle::{finite_diff_grad_at, sample_coordinates, synthetic_batch};
use fisher_prune::training::{SgdConfig, Trainer};
use fisher_prune::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn fixture(samples: usize) -> (Model, Dataset) {
    let shape = [1, 28, 28];
    let model = build_model(&ArchitectureSpec::resolve("mlp-small", shape, 10).unwrap(), 0).unwrap();
    let batch = synthetic_batch(samples, shape, 10, 0).unwrap();
    let data = Dataset::new(batch.inputs, batch.labels, 10).unwrap();
    (model, data)
}

fn fim_per_sample(c: &mut Criterion) {
    let (model, data) = fixture(128);
    let cfg = FimConfig { estimator: FimEstimator::PerSample, batch_size: 1, seed: 0 };
    let mut group = c.benchmark_group("fim_per_sample");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| estimate(model.network(), model.params(), &data, &cfg, exec).unwrap())
        });
    }
    group.finish();
}

fn finite_differences(c: &mut Criterion) {
    let (model, data) = fixture(8);
    let batch = data.full_batch();
    let coords = sample_coordinates(model.segments(), 32, 0);
    let mut group = c.benchmark_group("finite_diff_grad");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| finite_diff_grad_at(model.network(), model.params(), &batch, 1e-5, &coords, exec).unwrap())
        });
    }
    group.finish();
}

fn training_epoch(c: &mut Criterion) {
    let (model, data) = fixture(512);
    let cfg = SgdConfig { steps: 1, lr_drops: Vec::new(), ..SgdConfig::preset("desk").unwrap() };
    let mut group = c.benchmark_group("training_epoch");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut m = model.clone();
                let mut trainer = Trainer::new(&m, cfg.clone(), exec).unwrap();
                trainer.run_epoch(&mut m, None, &data).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, fim_per_sample, finite_differences, training_epoch);
criterion_main!(benches);
