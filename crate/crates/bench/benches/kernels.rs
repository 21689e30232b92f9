use criterion::{criterion_group, criterion_main, Criterion};
use jnd_core::jnd::{fit, simulate_listener, PriorSpec, Trial};
use jnd_core::metric::{MetricModel, NetConfig, TrainConfig, TrainPair, Trainer};
use jnd_core::{apply_axis, draw_axis, synth, PerturbContext};
use std::hint::black_box;
use std::sync::Arc;

const LEN: usize = 1 << 14;

fn distance(c: &mut Criterion) {
    let a = synth::speech_like(1, LEN);
    let b = synth::speech_like(2, LEN);
    let m32 = MetricModel::<f32>::init(NetConfig::default(), 1).unwrap();
    let m64 = m32.cast::<f64>();
    c.bench_function("distance f32", |bench| {
        bench.iter(|| m32.distance(black_box(&a), black_box(&b)).unwrap())
    });
    c.bench_function("distance f64", |bench| {
        bench.iter(|| m64.distance(black_box(&a), black_box(&b)).unwrap())
    });
    c.bench_function("input gradient f64", |bench| {
        bench.iter(|| m64.grad_input(black_box(&a), black_box(&b)).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let refs: Vec<_> = (0..4)
        .map(|i| Arc::new(synth::speech_like(i, LEN)))
        .collect();
    let batch: Vec<TrainPair> = (0..16)
        .map(|i| TrainPair {
            reference: refs[i / 4].clone(),
            perturbed: Arc::new(synth::speech_like(100 + i as u64, LEN)),
            h: (i % 2) as u8,
        })
        .collect();
    let config = TrainConfig {
        augment_silence: false,
        ..Default::default()
    };
    let model = MetricModel::<f32>::init(NetConfig::default(), 1).unwrap();
    let mut trainer = Trainer::new(model, config).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("step 16 pairs, 4 references", |bench| {
        bench.iter(|| trainer.train_step(black_box(&batch)).unwrap())
    });
    group.finish();
}

fn perturb(c: &mut Criterion) {
    let ctx = PerturbContext::builtin();
    let x = synth::speech_like(3, LEN);
    let axes: Vec<_> = (0..8)
        .map(|s| draw_axis(s, &ctx.noise_bank).unwrap())
        .collect();
    c.bench_function("apply 8 random axes", |bench| {
        bench.iter(|| {
            for axis in &axes {
                black_box(apply_axis(axis, 70.0, &x, &ctx).unwrap());
            }
        })
    });
}

fn psychometric_fit(c: &mut Criterion) {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let trials: Vec<Trial> = (0..24)
        .map(|k| {
            let rho = (k * 4) as f64;
            Trial::new(rho, simulate_listener(50.0, 8.0, 0.02, rho, &mut rng))
        })
        .collect();
    c.bench_function("fit 24 trials", |bench| {
        bench.iter(|| fit(black_box(&trials), &PriorSpec::default()))
    });
}

criterion_group!(benches, distance, train_step, perturb, psychometric_fit);
criterion_main!(benches);
