//! Deterministic inputs shared by the benchmarks.

use anonlab_core::synthdata::{generate, Corpus, CorpusConfig};
use anonlab_core::Tensor;

/// Smooth pseudo-random values in `[-1, 1]` without an RNG dependency.
pub fn wave(n: usize, phase: f64) -> Vec<f32> {
    (0..n)
        .map(|i| {
            let t = i as f64 + phase;
            (0.6 * (0.031 * t).sin() + 0.3 * (0.173 * t + 1.0).sin() + 0.1 * (2.71 * t).sin())
                as f32
        })
        .collect()
}

pub fn tensor(shape: &[usize], phase: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = wave(n, phase).into_iter().map(f64::from).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// A small corpus with the default utterance geometry.
pub fn small_corpus() -> Corpus {
    generate(&CorpusConfig {
        n_speakers: 4,
        utts_per_speaker: 8,
        ..CorpusConfig::default()
    })
    .expect("valid corpus config")
}
