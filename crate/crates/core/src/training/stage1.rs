//! Joint training of recognizer and adversarial speaker classifier.

use std::collections::BTreeSet;

use super::data::{stack_batch, BatchSampler};
use super::optim::{apply_moments_scaled, clip_global_norm, AdamState};
use super::{MetricsTrace, Precision, StepRecord, TrainConfig};
use crate::autodiff::{GradientMap, ParamId, Tape};
use crate::error::{Error, Result};
use crate::losses::{batch_ctc_loss, combined_loss, cross_entropy};
use crate::models::{
    Architecture, AsrModel, Checkpoint, EncoderConfig, GrlConfig, Init, ParamGroup, ParamStore,
};
use crate::synthdata::{Corpus, Split};
use crate::tensor::{Scalar, Tensor};

/// Seed offset for the speaker branch initializer, so attaching a branch
/// leaves the recognizer's initial weights untouched.
const BRANCH_INIT_STREAM: u64 = 0x5eed_0001;
const SAMPLER_STREAM: u64 = 0x5eed_0002;

/// Result of a completed stage-1 run.
#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    /// Recognizer weights only; the speaker classifier is dropped.
    pub checkpoint: Checkpoint,
    pub trace: MetricsTrace,
    pub rejected_steps: usize,
}

/// Trains encoder and CTC head on the train split, jointly with a speaker
/// classifier behind the reversal when `grl` is given. `feats` holds one
/// feature tensor per corpus utterance (see [`super::featurize`]).
pub fn train_stage1(
    corpus: &Corpus,
    feats: &[Tensor<f32>],
    encoder: &EncoderConfig,
    grl: Option<GrlConfig>,
    cfg: &TrainConfig,
) -> Result<Stage1Outcome> {
    cfg.validate()?;
    if feats.len() != corpus.utterances.len() {
        return Err(Error::invalid(
            "one feature tensor per utterance is required",
        ));
    }
    match cfg.precision {
        Precision::F32 => run::<f32>(corpus, feats, encoder, grl, cfg),
        Precision::F64 => run::<f64>(corpus, feats, encoder, grl, cfg),
    }
}

struct Batch<T: Scalar> {
    x: Tensor<T>,
    labels: Vec<Vec<usize>>,
    speakers: Vec<usize>,
}

fn batch<T: Scalar>(corpus: &Corpus, feats: &[Tensor<f32>], idx: &[usize]) -> Result<Batch<T>> {
    Ok(Batch {
        x: stack_batch(feats, idx)?,
        labels: idx
            .iter()
            .map(|&i| corpus.utterances[i].tokens.clone())
            .collect(),
        speakers: idx
            .iter()
            .map(|&i| corpus.utterances[i].speaker_id)
            .collect(),
    })
}

struct StepLosses<T: Scalar> {
    l_y: f64,
    l_d: Option<f64>,
    l_total: f64,
    grads: GradientMap<T>,
}

/// Forward and backward of `L_y + λ·L_d` on one batch. With `task_only`
/// the speaker loss is left out of the objective.
fn step_grads<T: Scalar>(
    model: &AsrModel,
    store: &ParamStore<T>,
    b: &Batch<T>,
    task_only: bool,
) -> Result<StepLosses<T>> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(b.x.clone());
    let out = model.forward(&mut tape, &p, x, &BTreeSet::new())?;
    let labels: Vec<&[usize]> = b.labels.iter().map(Vec::as_slice).collect();
    let (l_y, _) = batch_ctc_loss(&mut tape, out.log_probs, out.enc.frames, &labels)?;
    let (loss, l_d) = match (&model.branch, out.speaker_logits) {
        (Some(branch), Some(logits)) if !task_only => {
            let l_d = cross_entropy(&mut tape, logits, &b.speakers)?;
            let total = combined_loss(&mut tape, l_y, l_d, branch.grl.lambda)?;
            (total, Some(tape.value(l_d).item().to_f64()))
        }
        _ => (l_y, None),
    };
    let grads = tape.backward(loss)?.into_params();
    Ok(StepLosses {
        l_y: tape.value(l_y).item().to_f64(),
        l_d,
        l_total: tape.value(loss).item().to_f64(),
        grads,
    })
}

fn build<T: Scalar>(
    corpus: &Corpus,
    encoder: &EncoderConfig,
    grl: Option<GrlConfig>,
    seed: u64,
) -> Result<(AsrModel, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let mut model = AsrModel::new(
        &mut store,
        &mut Init::new(seed),
        encoder,
        corpus.vocab_size(),
    )?;
    if let Some(g) = grl {
        let mut init = Init::new(seed ^ BRANCH_INIT_STREAM);
        model.attach_speaker_branch(&mut store, &mut init, g, corpus.n_speakers())?;
    }
    Ok((model, store))
}

fn run<T: Scalar>(
    corpus: &Corpus,
    feats: &[Tensor<f32>],
    encoder: &EncoderConfig,
    grl: Option<GrlConfig>,
    cfg: &TrainConfig,
) -> Result<Stage1Outcome> {
    let (mut model, mut store) = build::<T>(corpus, encoder, grl, cfg.seed)?;
    let tap = grl.map_or(encoder.n_blocks, |g| g.tap_layer);
    let groups: Vec<ParamGroup> = AsrModel::groups(&store, tap)
        .into_iter()
        .map(|(_, g)| g)
        .collect();
    let group_of = |id: ParamId| groups[id.0];
    let mut sampler = BatchSampler::new(
        corpus.split_indices(Split::Train),
        cfg.seed ^ SAMPLER_STREAM,
    )?;
    let hyper = cfg.adam();
    let mut state = AdamState::<T>::new();
    let mut trace = MetricsTrace::new();
    let mut reference: Option<f64> = None;

    for step in 1..=cfg.steps {
        if let (Some(branch), Some(g)) = (model.branch.as_mut(), grl) {
            if cfg.alpha_ramp_steps > 0 {
                branch.grl.alpha = g.alpha * (step as f64 / cfg.alpha_ramp_steps as f64).min(1.0);
            }
        }
        let idx = sampler.next_batch(cfg.batch_size);
        let b = batch::<T>(corpus, feats, &idx)?;
        let StepLosses {
            l_y,
            l_d,
            l_total,
            mut grads,
        } = step_grads(&model, &store, &b, false)?;

        let norm = |g: ParamGroup, grads: &GradientMap<T>| grads.norm_where(|id| group_of(id) == g);
        let record = StepRecord {
            step,
            l_y,
            l_d,
            l_total,
            gnorm_f: norm(ParamGroup::Extractor, &grads),
            gnorm_m: norm(ParamGroup::Encoder, &grads),
            gnorm_y: norm(ParamGroup::Task, &grads),
            gnorm_d: norm(ParamGroup::Speaker, &grads),
        };
        trace.push(record)?;

        if step == cfg.guard_step {
            reference = Some(l_y);
        }
        let tripped = match reference {
            Some(r) => step > cfg.guard_step && !(l_y <= cfg.divergence_factor * r),
            None => !l_y.is_finite(),
        };
        if tripped {
            return Err(Error::Diverged {
                step,
                loss: l_y,
                reference: reference.unwrap_or(f64::NAN),
                factor: cfg.divergence_factor,
            });
        }

        if grads.iter().any(|(_, g)| !g.all_finite()) {
            state.rejected += 1;
            continue;
        }
        // The recognizer and the speaker classifier are clipped separately so
        // the classifier's gradient never changes how the task side is scaled.
        clip_global_norm(&mut grads, cfg.grad_clip_norm, |id| {
            group_of(id) != ParamGroup::Speaker
        });
        clip_global_norm(&mut grads, cfg.grad_clip_norm, |id| {
            group_of(id) == ParamGroup::Speaker
        });
        let spk_scale = cfg.speaker_lr_scale;
        apply_moments_scaled(&mut store, &grads, &mut state, &hyper, |id| {
            if group_of(id) == ParamGroup::Speaker {
                spk_scale
            } else {
                1.0
            }
        })?;
    }

    let arch = Architecture::Asr {
        encoder: encoder.clone(),
        vocab_size: corpus.vocab_size(),
    };
    let checkpoint = Checkpoint::capture(
        arch,
        grl,
        cfg.seed,
        cfg.steps,
        &store.cast::<f32>(),
        |name| !name.starts_with("spk."),
    );
    Ok(Stage1Outcome {
        checkpoint,
        trace,
        rejected_steps: state.rejected,
    })
}

/// Norm over the extractor parameters of the speaker term injected by the
/// reversal, `‖g_combined - g_task‖`, at the initial weights of `seed` on
/// the first training batch.
pub fn speaker_contribution_norm(
    corpus: &Corpus,
    feats: &[Tensor<f32>],
    encoder: &EncoderConfig,
    grl: GrlConfig,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (model, store) = build::<f64>(corpus, encoder, Some(grl), cfg.seed)?;
    let mut sampler = BatchSampler::new(
        corpus.split_indices(Split::Train),
        cfg.seed ^ SAMPLER_STREAM,
    )?;
    let b = batch::<f64>(corpus, feats, &sampler.next_batch(cfg.batch_size))?;
    let full = step_grads(&model, &store, &b, false)?.grads;
    let task = step_grads(&model, &store, &b, true)?.grads;
    let mut sq = 0.0;
    for (id, g) in full.iter() {
        if ParamGroup::of(store.name(id), grl.tap_layer) != ParamGroup::Extractor {
            continue;
        }
        let t = task
            .get(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; g.numel()]);
        sq += g
            .data()
            .iter()
            .zip(&t)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(sq.sqrt())
}
