use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use scenepose::body::{ShapeMap, Skeleton};
use scenepose::model::ModelConfig;
use scenepose::scene::{generate_dataset, DataConfig, SceneCache, Split};
use scenepose::train::prepare_samples;
use scenepose::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn data_config() -> DataConfig {
    DataConfig {
        size: 200,
        ..DataConfig::default()
    }
}

fn generation(c: &mut Criterion) {
    let skel = Skeleton::default();
    let cfg = data_config();
    let mut g = c.benchmark_group("generate_dataset");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_dataset(black_box(&cfg), 7, &skel, exec).unwrap())
        });
    }
    g.finish();
}

fn preparation(c: &mut Criterion) {
    let skel = Skeleton::default();
    let map = ShapeMap::from_skeleton(&skel);
    let data = generate_dataset(&data_config(), 7, &skel, Execution::Sequential).unwrap();
    let records = data.split(Split::Train);
    let model = ModelConfig::desk();
    let mut g = c.benchmark_group("prepare_samples");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                // a fresh cache so scene generation is part of the work
                let cache = SceneCache::new();
                prepare_samples(black_box(records), &model, &skel, &map, &cache, exec).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, generation, preparation);
criterion_main!(benches);
