//! Rayon-backed kernels against the same code with parallelism switched off.
//! On a single-core machine the two should be within noise of each other.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use hsrkan::degradation::{make_dataset, DatasetConfig, SpectralResponse, Split};
use hsrkan::metrics::ssim;
use hsrkan::model::ModelConfig;
use hsrkan::parallel;
use hsrkan::trainer::{Dataset, TrainConfig, Trainer};

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", true), ("sequential", false)]
}

fn run<R>(parallel_on: bool, f: impl FnOnce() -> R) -> R {
    if parallel_on {
        f()
    } else {
        parallel::sequential(f)
    }
}

fn train_step(c: &mut Criterion) {
    let cfg = DatasetConfig { size: 32, ..Default::default() };
    let response = SpectralResponse::default_rgb(cfg.hsi_bands).unwrap();
    let samples = make_dataset(1, 2, &cfg, &response, Split::Train).unwrap();
    let data = Dataset::new(&samples).unwrap();
    let mut group = c.benchmark_group("train_step_desk_2x32x32");
    group.sample_size(10);
    for (name, on) in modes() {
        let tcfg = TrainConfig { batch_size: 2, epochs: usize::MAX, ..Default::default() };
        let mut trainer = Trainer::new(ModelConfig::desk(), tcfg).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(on, || trainer.step(&data).unwrap()))
        });
    }
    group.finish();
}

fn metrics_and_data(c: &mut Criterion) {
    let cfg = DatasetConfig::default();
    let response = SpectralResponse::default_rgb(cfg.hsi_bands).unwrap();
    let pair = make_dataset(2, 2, &cfg, &response, Split::Val).unwrap();
    let mut group = c.benchmark_group("ssim_31x64x64");
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(on, || ssim(&pair[0].z, &pair[1].z).unwrap()))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("make_dataset_4x31x64x64");
    group.sample_size(10);
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(on, || make_dataset(3, 4, &cfg, &response, Split::Train).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, train_step, metrics_and_data);
criterion_main!(benches);
