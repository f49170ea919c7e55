use std::collections::BTreeSet;

use super::*;
use crate::models::{EncoderConfig, GrlConfig};
use crate::synthdata::{generate_corpus, Corpus, FeatureConfig, Split};
use crate::tensor::Tensor;

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        n_mels: 40,
        model_dim: 8,
        n_blocks: 3,
        n_heads: 2,
        conv_kernel: 3,
        ff_mult: 2,
    }
}

fn fixture() -> (Corpus, Vec<Tensor<f32>>) {
    let corpus = generate_corpus(3, 6, 3, 11).unwrap();
    let feats = featurize(&corpus, &FeatureConfig::default()).unwrap();
    (corpus, feats)
}

fn short(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        steps,
        guard_step: 2,
        ..TrainConfig::default()
    }
}

fn grl(alpha: f64, lambda: f64) -> GrlConfig {
    GrlConfig {
        tap_layer: 2,
        alpha,
        lambda,
    }
}

#[test]
fn features_line_up_with_hops() {
    let (corpus, feats) = fixture();
    let len = corpus.config.utterance_len();
    assert_eq!(feats.len(), corpus.utterances.len());
    assert_eq!(feats[0].shape(), &[len / 100, 40]);
}

#[test]
fn sampler_covers_each_epoch_once() {
    let pool: Vec<usize> = (10..17).collect();
    let mut s = BatchSampler::new(pool.clone(), 3).unwrap();
    let mut epoch = s.next_batch(7);
    epoch.sort_unstable();
    assert_eq!(epoch, pool);
    let mut again = BatchSampler::new(pool.clone(), 3).unwrap();
    assert_eq!(
        again.next_batch(10)[..7],
        BatchSampler::new(pool, 3).unwrap().next_batch(7)[..]
    );
    assert!(BatchSampler::new(Vec::new(), 0).is_err());
}

#[test]
fn config_validation_names_the_field() {
    let bad = TrainConfig {
        speaker_lr_scale: 0.0,
        ..TrainConfig::default()
    };
    let msg = bad.validate().unwrap_err().to_string();
    assert!(msg.contains("speaker_lr_scale"), "{msg}");
    let bad = TrainConfig {
        beta2: 1.0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
}

#[test]
fn config_round_trips_through_json() {
    let cfg = TrainConfig {
        seed: 9,
        precision: Precision::F64,
        ..TrainConfig::default()
    };
    let s = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), cfg);
    let partial: TrainConfig = serde_json::from_str(r#"{"steps": 7}"#).unwrap();
    assert_eq!(partial.steps, 7);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"stepz": 7}"#).is_err());
}

fn record(step: usize) -> StepRecord {
    StepRecord {
        step,
        l_y: 1.0,
        l_d: None,
        l_total: 1.0,
        gnorm_f: 0.0,
        gnorm_m: 0.0,
        gnorm_y: 0.0,
        gnorm_d: 0.0,
    }
}

#[test]
fn metrics_steps_must_increase() {
    let mut t = MetricsTrace::new();
    t.push(record(1)).unwrap();
    t.push(record(3)).unwrap();
    assert!(t.push(record(3)).is_err());
    assert!(t.push(record(2)).is_err());
    let csv = t.to_csv();
    assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
    assert_eq!(csv.lines().nth(1), Some("1,1,,1,0,0,0,0"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn training_is_reproducible_and_drops_the_speaker_head() {
    let (corpus, feats) = fixture();
    let cfg = short(4);
    let a = train_stage1(&corpus, &feats, &tiny_encoder(), Some(grl(0.5, 0.5)), &cfg).unwrap();
    let b = train_stage1(&corpus, &feats, &tiny_encoder(), Some(grl(0.5, 0.5)), &cfg).unwrap();
    assert_eq!(
        a.checkpoint.to_bytes().unwrap(),
        b.checkpoint.to_bytes().unwrap()
    );
    assert_eq!(a.trace.to_csv(), b.trace.to_csv());
    assert!(a.checkpoint.tensors.keys().all(|k| !k.starts_with("spk.")));
    assert_eq!(a.trace.records().len(), 4);
    assert!(a
        .trace
        .records()
        .iter()
        .all(|r| r.l_d.is_some() && r.gnorm_d > 0.0));
    assert_eq!(a.checkpoint.manifest.grl, Some(grl(0.5, 0.5)));
}

#[test]
fn zero_reversal_product_matches_the_plain_recognizer() {
    let (corpus, feats) = fixture();
    let cfg = short(5);
    let plain = train_stage1(&corpus, &feats, &tiny_encoder(), None, &cfg).unwrap();
    let plain = plain.checkpoint.tensors;
    for g in [grl(0.0, 0.5), grl(0.5, 0.0)] {
        let adv = train_stage1(&corpus, &feats, &tiny_encoder(), Some(g), &cfg).unwrap();
        assert_eq!(adv.checkpoint.tensors, plain, "{g:?}");
    }
    let real = train_stage1(&corpus, &feats, &tiny_encoder(), Some(grl(0.5, 0.5)), &cfg).unwrap();
    assert_ne!(real.checkpoint.tensors, plain);
}

#[test]
fn f64_training_matches_f32_closely() {
    let (corpus, feats) = fixture();
    let a = train_stage1(&corpus, &feats, &tiny_encoder(), None, &short(3)).unwrap();
    let cfg = TrainConfig {
        precision: Precision::F64,
        ..short(3)
    };
    let b = train_stage1(&corpus, &feats, &tiny_encoder(), None, &cfg).unwrap();
    for (ra, rb) in a.trace.records().iter().zip(b.trace.records()) {
        assert!(
            (ra.l_y - rb.l_y).abs() < 1e-3 * rb.l_y.abs(),
            "{} vs {}",
            ra.l_y,
            rb.l_y
        );
    }
}

#[test]
fn divergence_guard_trips_after_the_reference_step() {
    let (corpus, feats) = fixture();
    let cfg = TrainConfig {
        guard_step: 1,
        divergence_factor: 1e-6,
        ..short(5)
    };
    match train_stage1(&corpus, &feats, &tiny_encoder(), None, &cfg) {
        Err(Error::Diverged { step, factor, .. }) => {
            assert_eq!(step, 2);
            assert_eq!(factor, 1e-6);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn speaker_contribution_scales_with_lambda() {
    let (corpus, feats) = fixture();
    let cfg = short(1);
    let norm = |lambda| {
        speaker_contribution_norm(&corpus, &feats, &tiny_encoder(), grl(0.5, lambda), &cfg).unwrap()
    };
    assert_eq!(norm(0.0), 0.0);
    let (a, b, c) = (norm(0.1), norm(0.3), norm(0.6));
    assert!(a > 0.0 && a < b && b < c);
    assert!((c / b - 2.0).abs() < 1e-9, "{}", c / b);
}

#[test]
fn stage1_rejects_mismatched_features() {
    let (corpus, feats) = fixture();
    assert!(train_stage1(&corpus, &feats[1..], &tiny_encoder(), None, &short(1)).is_err());
    let bad = GrlConfig {
        tap_layer: 9,
        ..grl(0.5, 0.5)
    };
    assert!(train_stage1(&corpus, &feats, &tiny_encoder(), Some(bad), &short(1)).is_err());
}

fn clustered(n_per: usize, classes: usize, d: usize) -> (Vec<Tensor<f32>>, Vec<usize>) {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for i in 0..n_per {
            let data = (0..4 * d)
                .map(|j| {
                    if j % d == c {
                        2.0
                    } else {
                        0.1 * ((i * 7 + j) % 5) as f32
                    }
                })
                .collect();
            inputs.push(Tensor::new(vec![4, d], data).unwrap());
            labels.push(c);
        }
    }
    (inputs, labels)
}

fn quick_probe() -> ProbeConfig {
    ProbeConfig {
        hidden: 8,
        steps: 150,
        batch_size: 8,
        learning_rate: 1e-2,
        ..ProbeConfig::default()
    }
}

#[test]
fn probe_separates_separable_speakers() {
    let (inputs, labels) = clustered(6, 3, 5);
    let train: Vec<usize> = (0..18).filter(|i| i % 3 != 0).collect();
    let test: Vec<usize> = (0..18).filter(|i| i % 3 == 0).collect();
    let r = train_speaker_probe(&inputs, &labels, &train, &test, 3, &quick_probe()).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.labels.len(), test.len());
}

#[test]
fn single_speaker_probe_is_always_right() {
    let (inputs, _) = clustered(6, 2, 4);
    let labels = vec![0; inputs.len()];
    let r = train_speaker_probe(
        &inputs,
        &labels,
        &[0, 1, 2, 3, 4, 5, 6],
        &[7, 8, 9, 10, 11],
        1,
        &quick_probe(),
    )
    .unwrap();
    assert_eq!(r.accuracy, 1.0);
}

#[test]
fn probing_leaves_the_checkpoint_untouched() {
    let (corpus, feats) = fixture();
    let ckpt = train_stage1(&corpus, &feats, &tiny_encoder(), None, &short(2))
        .unwrap()
        .checkpoint;
    let before = ckpt.to_bytes().unwrap();
    let (model, store) = ckpt.asr_model().unwrap();
    let e1 = embed(&model, &store, &feats, 2).unwrap();
    let r = train_probe(&ckpt, 2, &corpus, &feats, &quick_probe()).unwrap();
    assert!((0.0..=1.0).contains(&r.accuracy));
    assert_eq!(ckpt.to_bytes().unwrap(), before);
    assert_eq!(embed(&model, &store, &feats, 2).unwrap(), e1);
    assert_eq!(e1[0].shape(), &[16, 8]);
    assert!(train_probe(&ckpt, 0, &corpus, &feats, &quick_probe()).is_err());
    assert!(train_probe(&ckpt, 4, &corpus, &feats, &quick_probe()).is_err());
}

#[test]
fn held_out_probe_split_avoids_training_utterances() {
    let corpus = generate_corpus(3, 20, 3, 2).unwrap();
    let cfg = ProbeConfig {
        source: ProbeSource::HeldOut,
        ..ProbeConfig::default()
    };
    let (train, test) = cfg.split(&corpus).unwrap();
    let stage1: BTreeSet<usize> = corpus.split_indices(Split::Train).into_iter().collect();
    assert!(train.iter().chain(&test).all(|i| !stage1.contains(i)));
}

#[test]
fn short_synthesis_run_stays_finite() {
    let (corpus, feats) = fixture();
    let ckpt = train_stage1(&corpus, &feats, &tiny_encoder(), None, &short(1))
        .unwrap()
        .checkpoint;
    let cfg = SynthTrainConfig {
        steps: 3,
        batch_size: 2,
        eval_every: 2,
        ..SynthTrainConfig::default()
    };
    let out = train_synth(&ckpt, 3, &corpus, &feats, &[0, 1, 2, 3], &[4, 5], &cfg).unwrap();
    assert_eq!(out.losses.len(), 3);
    assert!(out
        .losses
        .iter()
        .all(|(_, g, d)| g.is_finite() && d.is_finite()));
    assert_eq!(
        out.heldout_mel.iter().map(|(s, _)| *s).collect::<Vec<_>>(),
        vec![2, 3]
    );
    assert!(out.heldout_at(2).unwrap() > 0.0);
    let (gen, store, tap) = out.checkpoint.synth_model().unwrap();
    assert_eq!(tap, 3);
    let (model, asr) = ckpt.asr_model().unwrap();
    let emb = embed(&model, &asr, &feats[..1], 3).unwrap();
    let w = resynthesize(&gen, &store, &emb, corpus.config.utterance_len()).unwrap();
    assert_eq!(w[0].len(), corpus.config.utterance_len());

    assert!(train_synth(&ckpt, 4, &corpus, &feats, &[0], &[1], &cfg).is_err());
    let wrong = SynthTrainConfig {
        synth: crate::models::SynthConfig {
            upsample: vec![8, 5, 4],
            ..Default::default()
        },
        ..cfg
    };
    assert!(train_synth(&ckpt, 3, &corpus, &feats, &[0], &[1], &wrong).is_err());
}
