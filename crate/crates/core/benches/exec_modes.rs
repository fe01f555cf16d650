use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cmdsr::condition::ConditionWidths;
use cmdsr::degradation::Preset;
use cmdsr::eval::{self, EvalConfig};
use cmdsr::exec::Mode;
use cmdsr::imaging::{ChannelMode, Image};
use cmdsr::tasks::Dataset;
use cmdsr::trainer::{TrainConfig, Trainer};

fn dataset(count: usize, side: usize) -> Dataset {
    let images = (0..count)
        .map(|i| {
            Image::from_fn(side, side, 3, |y, x, c| {
                0.5 + 0.4 * ((y as f64 * 0.11 + i as f64).sin() * (x as f64 * 0.07 + c as f64).cos())
            })
        })
        .collect();
    Dataset::from_images((0..count).map(|i| format!("{i}.png")).collect(), images).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        k: 4,
        n: 4,
        patch: 16,
        scale: 2,
        backbone_depth: Some(2),
        backbone_channels: Some(8),
        condition_widths: ConditionWidths([8, 8, 16, 16]),
        ..TrainConfig::default()
    }
}

/// Sequential always; parallel when the feature is on.
fn modes() -> Vec<(&'static str, Mode)> {
    vec![
        ("sequential", Mode::Sequential),
        #[cfg(feature = "parallel")]
        ("parallel", Mode::Parallel),
    ]
}

fn meta_batch(c: &mut Criterion) {
    let ds = dataset(6, 96);
    let mut group = c.benchmark_group("meta_batch");
    for (name, mode) in modes() {
        let trainer = Trainer::new(config(), &ds, None).unwrap().with_mode(mode);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(trainer.meta_batch(black_box(1)).unwrap()))
        });
    }
    group.finish();
}

fn backbone_gradient(c: &mut Criterion) {
    let ds = dataset(6, 96);
    let mut group = c.benchmark_group("backbone_gradient");
    group.sample_size(20);
    for (name, mode) in modes() {
        let trainer = Trainer::new(config(), &ds, None).unwrap().with_mode(mode);
        let meta = trainer.meta_batch(1).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(trainer.backbone_gradient(&meta).unwrap()))
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let ds = dataset(4, 64);
    let model = Trainer::new(config(), &ds, None).unwrap().model().clone();
    let cfg = EvalConfig {
        n: 4,
        patch: 16,
        repeats: 1,
        border: 2,
        channel: ChannelMode::Y,
        seed: 0,
    };
    let spec = Preset::Middle.spec_at_scale(2);
    let mut group = c.benchmark_group("evaluate_dataset");
    group.sample_size(10);
    for (name, mode) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(eval::evaluate_dataset_with(mode, &model, &ds, "bench", "middle", &spec, &cfg, None).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, meta_batch, backbone_gradient, evaluation);
criterion_main!(benches);
