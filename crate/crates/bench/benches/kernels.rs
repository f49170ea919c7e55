use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};

use anonlab_bench::{small_corpus, tensor, wave};
use anonlab_core::evaluation::{mutual_information, MiConfig};
use anonlab_core::models::{EncoderConfig, GrlConfig};
use anonlab_core::synthdata::{FeatureConfig, MelFrontEnd};
use anonlab_core::training::{featurize, train_stage1, TrainConfig};
use anonlab_core::{ParamId, Tape};

fn matmul(c: &mut Criterion) {
    let a = tensor(&[64, 64], 0.0);
    let b = tensor(&[64, 64], 7.0);
    c.bench_function("matmul_64_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let x = tape.param(ParamId(0), a.clone());
            let w = tape.param(ParamId(1), b.clone());
            let y = tape.matmul(x, w).unwrap();
            let l = tape.sum(y).unwrap();
            black_box(tape.backward(l).unwrap());
        })
    });
}

fn ctc(c: &mut Criterion) {
    let logits = tensor(&[16, 7], 3.0);
    let labels = [0, 3, 3, 1];
    c.bench_function("ctc_16x7_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let x = tape.param(ParamId(0), logits.clone());
            let lp = tape.log_softmax(x).unwrap();
            let l = tape.ctc(lp, &labels, 6).unwrap();
            black_box(tape.backward(l).unwrap());
        })
    });
}

fn log_mel(c: &mut Criterion) {
    let front = Arc::new(MelFrontEnd::<f32>::new(&FeatureConfig::default()).unwrap());
    let w = wave(3200, 0.0);
    c.bench_function("log_mel_3200", |bench| {
        bench.iter(|| black_box(front.compute(&w).unwrap()))
    });
}

fn mutual_info(c: &mut Criterion) {
    let x = wave(3200, 0.0);
    let y = wave(3200, 5.0);
    let cfg = MiConfig::default();
    c.bench_function("mutual_information_3200", |bench| {
        bench.iter(|| black_box(mutual_information(&x, &y, &cfg).unwrap()))
    });
}

fn stage1(c: &mut Criterion) {
    let corpus = small_corpus();
    let feats = featurize(&corpus, &FeatureConfig::default()).unwrap();
    let enc = EncoderConfig::default();
    let cfg = TrainConfig {
        steps: 2,
        ..TrainConfig::default()
    };
    let grl = GrlConfig {
        tap_layer: 3,
        alpha: 0.5,
        lambda: 0.5,
    };
    let mut group = c.benchmark_group("stage1");
    group.sample_size(10);
    group.bench_function("baseline_2_steps", |bench| {
        bench.iter(|| black_box(train_stage1(&corpus, &feats, &enc, None, &cfg).unwrap()))
    });
    group.bench_function("adversarial_2_steps", |bench| {
        bench.iter(|| black_box(train_stage1(&corpus, &feats, &enc, Some(grl), &cfg).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, matmul, ctc, log_mel, mutual_info, stage1);
criterion_main!(benches);
