//! Parallel kernels on one worker versus the full pool.
//!
//! `cargo bench -p scsplit` compares both pool sizes; adding
//! `--no-default-features` benches the plain sequential fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use scsplit::data::{synthesize_dataset, ChannelFrameSet, Split, SplitCounts, SynthConfig};
use scsplit::eval;
use scsplit::infer::{self, AcquisitionInput, InferenceConfig};
use scsplit::mixing::{mix, MixingRatio};
use scsplit::nets::{ConditioningMode, ModelBundle, RegHead, RegSpec};
use scsplit::scin::{self, TargetChannelStats};
use scsplit::train::{self, GenArch, TrainConfig};
use scsplit::{par, Image};

fn pool_sizes() -> Vec<usize> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut v = vec![1];
    if all > 1 {
        v.push(all);
    }
    v
}

fn data() -> ChannelFrameSet {
    synthesize_dataset(&SynthConfig {
        frame_size: (64, 64),
        frames_per_split: SplitCounts { train: 16, val: 2, test: 4 },
        density: [20.0, 20.0],
        frame_jitter: 0.0,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn train_cfg(max_steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_steps,
        patch_size: 32,
        val_every: max_steps,
        val_patches: 2,
        gen_arch: GenArch {
            depth: 3,
            base_width: 8,
            conditioning_mode: ConditioningMode::ScalarBroadcastConcat,
        },
        reg_spec: RegSpec {
            depth: 3,
            base_width: 8,
            head: RegHead::SigmoidBounded,
            hidden: 32,
        },
        ..TrainConfig::default()
    }
}

fn bundle(fs: &ChannelFrameSet) -> ModelBundle {
    let cfg = train_cfg(2);
    let table = scin::build_table(fs, 32, 20, 50, 0).unwrap();
    let stats = TargetChannelStats::from_training(fs).unwrap();
    let gens = train::train_generators(fs, &table, &stats, &cfg).unwrap();
    let reg = train::train_regressor(fs, &table, &cfg).unwrap();
    train::make_bundle(&gens, &reg, &table, &stats, &cfg).unwrap()
}

fn kernels(c: &mut Criterion) {
    let fs = data();
    let b = bundle(&fs);
    let t = MixingRatio::new(0.3).unwrap();
    let frames: Vec<Image> = fs.split_frames(Split::Test).map(|(a, x)| mix(a, x, t).unwrap()).collect();
    let acq = AcquisitionInput::new("bench", frames).unwrap();
    let infer_cfg = InferenceConfig { mmse_count: 2, ..InferenceConfig::default() };
    let preds = infer::unmix(&acq, &b, &infer_cfg).unwrap();
    let gts: Vec<&Image> = fs.split_frames(Split::Test).map(|(a, _)| a).collect();
    let stats = TargetChannelStats::from_training(&fs).unwrap();

    let mut g = c.benchmark_group("kernels");
    g.sample_size(10);
    for n in pool_sizes() {
        g.bench_with_input(BenchmarkId::new("scin_table", n), &n, |bch, &n| {
            bch.iter(|| par::with_threads(n, || black_box(scin::build_table(&fs, 32, 20, 50, 1).unwrap())))
        });
        g.bench_with_input(BenchmarkId::new("train_steps", n), &n, |bch, &n| {
            bch.iter(|| {
                par::with_threads(n, || {
                    black_box(train::train_generators(&fs, &b.table, &stats, &train_cfg(5)).unwrap())
                })
            })
        });
        g.bench_with_input(BenchmarkId::new("unmix", n), &n, |bch, &n| {
            bch.iter(|| par::with_threads(n, || black_box(infer::unmix(&acq, &b, &infer_cfg).unwrap())))
        });
        g.bench_with_input(BenchmarkId::new("metrics", n), &n, |bch, &n| {
            bch.iter(|| par::with_threads(n, || black_box(eval::score_channel(&preds.c0_hat, &gts).unwrap())))
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
