//! Sequential vs parallel execution of the data-parallel hot paths.

use std::hint::black_box;

use ccup::classify::classify_with;
use ccup::eval::{sweep, Evaluator, SweepAxis};
use ccup::projection::{apply_projection_with, ccup_matrix, RegularizationConfig};
use ccup::synthetic::{generate_with, SyntheticSpec};
use ccup::Exec;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn spec() -> SyntheticSpec {
    SyntheticSpec {
        dim: 256,
        n_classes: 100,
        images_per_class: 50,
        ..SyntheticSpec::default()
    }
}

fn benches(c: &mut Criterion) {
    let spec = spec();
    let data = generate_with(&spec, Exec::default()).unwrap();
    let features = data.dataset.features();
    let (t_f, t_r) = data.manifest.split_texts(&data.texts).unwrap();
    let config = RegularizationConfig::default();
    let proj = ccup_matrix(&t_f, &t_r, config).unwrap();

    let mut group = c.benchmark_group("classify");
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| classify_with(black_box(features), &data.texts, None, exec).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("apply_projection");
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| apply_projection_with(black_box(&proj), features, exec).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("generate");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_with(black_box(&spec), exec).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("sweep_lambda");
    group.sample_size(10);
    let values = [0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0];
    for (name, exec) in POLICIES {
        let evaluator = Evaluator::with_exec(&data.dataset, &data.manifest, &data.texts, exec).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sweep(&evaluator, &t_f, &t_r, SweepAxis::Lambda, black_box(&values), config).unwrap())
        });
    }
    group.finish();
}

criterion_group!(parallel, benches);
criterion_main!(parallel);
