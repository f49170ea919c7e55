use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tape;
use crate::error::Error;
use crate::tensor::Tensor;

fn small_cfg(blocks: usize) -> EncoderConfig {
    EncoderConfig {
        n_mels: 8,
        model_dim: 8,
        n_blocks: blocks,
        n_heads: 2,
        conv_kernel: 3,
        ff_mult: 2,
    }
}

fn feats(batch: usize, frames: usize, n_mels: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * frames * n_mels)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::new(vec![batch, frames, n_mels], data).unwrap()
}

type TapOutputs = Vec<(usize, Tensor<f32>)>;

fn run_encoder(
    enc: &Encoder,
    store: &ParamStore<f32>,
    x: &Tensor<f32>,
    taps: &[usize],
) -> crate::Result<(Tensor<f32>, TapOutputs)> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(x.clone());
    let taps: BTreeSet<usize> = taps.iter().copied().collect();
    let out = enc.forward(&mut tape, &p, x, &taps)?;
    let tapped = out
        .taps
        .iter()
        .map(|(k, v)| (*k, tape.value(*v).clone()))
        .collect();
    Ok((tape.value(out.out).clone(), tapped))
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn taps_return_exactly_the_requested_blocks() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut Init::new(1), &small_cfg(12)).unwrap();
    let x = feats(2, 10, 8, 3);
    let (out, taps) = run_encoder(&enc, &store, &x, &[3, 5]).unwrap();
    assert_eq!(taps.iter().map(|t| t.0).collect::<Vec<_>>(), vec![3, 5]);
    for (_, t) in &taps {
        assert_eq!(t.shape(), &[2 * 5, 8]);
    }
    assert_eq!(out.shape(), &[10, 8]);
    let (out_none, none) = run_encoder(&enc, &store, &x, &[]).unwrap();
    assert!(none.is_empty());
    assert_eq!(bits(&out), bits(&out_none));
    let (again, taps_again) = run_encoder(&enc, &store, &x, &[3, 5]).unwrap();
    assert_eq!(bits(&out), bits(&again));
    assert_eq!(bits(&taps[0].1), bits(&taps_again[0].1));
}

#[test]
fn last_block_tap_is_the_encoder_output() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut Init::new(2), &small_cfg(3)).unwrap();
    let x = feats(1, 6, 8, 1);
    let (out, taps) = run_encoder(&enc, &store, &x, &[3]).unwrap();
    assert_eq!(bits(&out), bits(&taps[0].1));
}

#[test]
fn out_of_range_taps_are_rejected() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut Init::new(1), &small_cfg(4)).unwrap();
    let x = feats(1, 6, 8, 1);
    for bad in [0, 5] {
        assert!(matches!(
            run_encoder(&enc, &store, &x, &[bad]),
            Err(Error::InvalidArgument(_))
        ));
    }
}

#[test]
fn ctc_rows_are_distributions() {
    let mut store = ParamStore::new();
    let model = AsrModel::new(&mut store, &mut Init::new(5), &small_cfg(2), 6).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(feats(3, 9, 8, 2));
    let out = model.forward(&mut tape, &p, x, &BTreeSet::new()).unwrap();
    let lp = tape.value(out.log_probs);
    assert_eq!(lp.shape(), &[3 * subsampled_frames(9), 7]);
    assert_eq!(model.head.blank(), 6);
    for r in 0..lp.shape()[0] {
        let s: f64 = lp.row(r).iter().map(|v| (*v as f64).exp()).sum();
        assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
    }
}

#[test]
fn attaching_the_branch_leaves_task_outputs_bitwise_unchanged() {
    let mut store = ParamStore::new();
    let mut init = Init::new(9);
    let mut model = AsrModel::new(&mut store, &mut init, &small_cfg(4), 5).unwrap();
    let x = feats(2, 8, 8, 4);
    let task = |model: &AsrModel, store: &ParamStore<f32>| {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = model.forward(&mut tape, &p, xv, &BTreeSet::new()).unwrap();
        (
            bits(tape.value(out.log_probs)),
            out.speaker_logits.map(|v| tape.value(v).shape().to_vec()),
        )
    };
    let (before, none) = task(&model, &store);
    assert!(none.is_none());
    model
        .attach_speaker_branch(
            &mut store,
            &mut init,
            GrlConfig {
                tap_layer: 2,
                alpha: 1.0,
                lambda: 0.5,
            },
            4,
        )
        .unwrap();
    let (after, spk) = task(&model, &store);
    assert_eq!(before, after);
    assert_eq!(spk, Some(vec![2, 4]));
}

#[test]
fn branch_attachment_is_validated() {
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(0);
    let mut model = AsrModel::new(&mut store, &mut init, &small_cfg(4), 5).unwrap();
    for bad in [
        GrlConfig {
            tap_layer: 0,
            alpha: 1.0,
            lambda: 1.0,
        },
        GrlConfig {
            tap_layer: 5,
            alpha: 1.0,
            lambda: 1.0,
        },
        GrlConfig {
            tap_layer: 1,
            alpha: -1.0,
            lambda: 1.0,
        },
        GrlConfig {
            tap_layer: 1,
            alpha: 1.0,
            lambda: f64::NAN,
        },
    ] {
        assert!(model
            .attach_speaker_branch(&mut store, &mut init, bad, 3)
            .is_err());
    }
    let ok = GrlConfig {
        tap_layer: 4,
        alpha: 1.0,
        lambda: 1.0,
    };
    model
        .attach_speaker_branch(&mut store, &mut init, ok, 3)
        .unwrap();
    assert!(model
        .attach_speaker_branch(&mut store, &mut init, ok, 3)
        .is_err());
}

#[test]
fn groups_partition_every_parameter() {
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(0);
    let mut model = AsrModel::new(&mut store, &mut init, &small_cfg(6), 5).unwrap();
    model
        .attach_speaker_branch(
            &mut store,
            &mut init,
            GrlConfig {
                tap_layer: 3,
                alpha: 1.0,
                lambda: 1.0,
            },
            3,
        )
        .unwrap();
    let mut prev_extractor = 0;
    for tap in 1..=6 {
        let groups = AsrModel::groups(&store, tap);
        assert_eq!(groups.len(), store.len());
        let count = |g: ParamGroup| groups.iter().filter(|(_, x)| *x == g).count();
        for g in ParamGroup::ALL {
            if g != ParamGroup::Encoder || tap < 6 {
                assert!(count(g) > 0, "{g:?} empty at tap {tap}");
            }
        }
        // Moving the tap deeper moves whole blocks from one side to the other.
        assert!(count(ParamGroup::Extractor) > prev_extractor);
        prev_extractor = count(ParamGroup::Extractor);
    }
    assert_eq!(ParamGroup::of("enc.front.w", 1), ParamGroup::Extractor);
    assert_eq!(ParamGroup::of("enc.block2.ff1.w", 1), ParamGroup::Encoder);
    assert_eq!(
        ParamGroup::of("enc.block10.ff1.w", 10),
        ParamGroup::Extractor
    );
    assert_eq!(ParamGroup::of("ctc.proj.w", 1), ParamGroup::Task);
    assert_eq!(ParamGroup::of("spk.out.w", 1), ParamGroup::Speaker);
}

#[test]
fn generator_output_has_the_corpus_geometry() {
    let cfg = SynthConfig {
        model_dim: 8,
        ..SynthConfig::default()
    };
    let mut store = ParamStore::<f32>::new();
    let gen = SynthGenerator::new(&mut store, &mut Init::new(3), &cfg).unwrap();
    let (batch, frames) = (2, 4);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let emb = tape.constant(Tensor::zeros([batch * frames, 8]));
    let wave = gen
        .forward(&mut tape, &p, emb, batch, frames, frames * 200)
        .unwrap();
    let w = tape.value(wave);
    assert_eq!(w.shape(), &[batch, frames * 200]);
    assert!(w.all_finite());
    assert!(w.data().iter().all(|v| v.abs() <= 1.0));
    let emb = tape.constant(Tensor::zeros([batch * frames, 8]));
    assert!(matches!(
        gen.forward(&mut tape, &p, emb, batch, frames, 3200),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn discriminators_judge_identical_inputs_identically() {
    let mut store = ParamStore::<f32>::new();
    let ens = DiscriminatorEnsemble::new(&mut store, &mut Init::new(4)).unwrap();
    assert_eq!(ens.members.len(), 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let wave: Vec<f32> = (0..2 * 401).map(|_| rng.random_range(-0.5..0.5)).collect();
    let wave = Tensor::new(vec![2, 401], wave).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let a = tape.constant(wave.clone());
    let b = tape.constant(wave);
    let oa = ens.forward(&mut tape, &p, a).unwrap();
    let ob = ens.forward(&mut tape, &p, b).unwrap();
    for (ma, mb) in oa.iter().zip(&ob) {
        assert_eq!(ma.features.len(), 4);
        assert_eq!(bits(tape.value(ma.judgment)), bits(tape.value(mb.judgment)));
        for (fa, fb) in ma.features.iter().zip(&mb.features) {
            assert_eq!(bits(tape.value(*fa)), bits(tape.value(*fb)));
        }
    }
    // The period view folds the padded signal into two phase rows per item.
    assert_eq!(ens.members[1].view, DiscView::Period(2));
    assert_eq!(tape.value(oa[1].features[0]).shape()[..2], [4, 8]);
}

#[test]
fn checkpoints_round_trip_and_drop_the_speaker_head() {
    let cfg = small_cfg(3);
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(8);
    let mut model = AsrModel::new(&mut store, &mut init, &cfg, 4).unwrap();
    let grl = GrlConfig {
        tap_layer: 2,
        alpha: 1.0,
        lambda: 0.3,
    };
    model
        .attach_speaker_branch(&mut store, &mut init, grl, 3)
        .unwrap();
    let ckpt = Checkpoint::capture(
        Architecture::Asr {
            encoder: cfg.clone(),
            vocab_size: 4,
        },
        Some(grl),
        8,
        100,
        &store,
        |n| !n.starts_with("spk."),
    );
    assert!(ckpt.tensors.keys().all(|k| !k.starts_with("spk.")));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    let (restored, rstore) = back.asr_model().unwrap();
    assert!(restored.branch.is_none());
    for (_, name, t) in rstore.iter() {
        assert_eq!(bits(t), bits(store.get(store.id(name).unwrap())));
    }

    let mut bytes = ckpt.to_bytes().unwrap();
    bytes[8] = 9;
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(Error::Version { found: 9, .. })
    ));
    assert!(matches!(
        Checkpoint::from_bytes(b"garbage"),
        Err(Error::Format(_))
    ));
    let full = ckpt.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&full[..full.len() - 2]).is_err());
    assert!(matches!(
        back.synth_model(),
        Err(Error::Architecture {
            expected: "generator",
            found: "recognizer"
        })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn encoder_preserves_model_dim(batch in 1usize..3, frames in 2usize..12, blocks in 1usize..4, seed in 0u64..100) {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut Init::new(seed), &small_cfg(blocks)).unwrap();
        let x = feats(batch, frames, 8, seed);
        let taps: Vec<usize> = (1..=blocks).collect();
        let (out, tapped) = run_encoder(&enc, &store, &x, &taps).unwrap();
        let rows = batch * subsampled_frames(frames);
        prop_assert_eq!(out.shape(), &[rows, 8]);
        for (_, t) in tapped {
            prop_assert_eq!(t.shape(), &[rows, 8]);
            prop_assert!(t.all_finite());
        }
    }
}
