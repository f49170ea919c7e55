//! Fresh speaker classifiers trained on frozen representations.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::data::{stack_batch, BatchSampler};
use super::optim::{adam_step, AdamHyper, AdamState};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::evaluation::speaker_accuracy;
use crate::losses::cross_entropy;
use crate::models::{AsrModel, Checkpoint, Init, ParamStore, SpeakerClassifier};
use crate::synthdata::{split_corpus, split_indices, Corpus, Split};
use crate::tensor::Tensor;

/// Which utterances the probe is trained and tested on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSource {
    /// Every utterance, split per speaker.
    #[default]
    All,
    /// Only the utterances held out from stage-1 training.
    HeldOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Share of each speaker's utterances used to train the probe.
    pub fraction: f64,
    pub source: ProbeSource,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            fraction: 0.7,
            source: ProbeSource::All,
            hidden: 64,
            steps: 1500,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid(
                "probe hidden, steps and batch_size must be positive",
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("probe learning_rate must be positive"));
        }
        Ok(())
    }

    /// Probe-train and probe-test utterance indices.
    pub fn split(&self, corpus: &Corpus) -> Result<(Vec<usize>, Vec<usize>)> {
        let s = match self.source {
            ProbeSource::All => split_corpus(corpus, self.fraction, self.seed)?,
            ProbeSource::HeldOut => {
                let mut held = corpus.split_indices(Split::TestAdv);
                held.extend(corpus.split_indices(Split::Dev));
                held.sort_unstable();
                split_indices(corpus, &held, self.fraction, self.seed)?
            }
        };
        Ok((s.train, s.test))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    /// Unweighted (macro) accuracy on the probe test side.
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

const EMBED_CHUNK: usize = 32;

/// Frame embeddings `[F', d]` at block `tap` for each input, computed with
/// the parameters bound as constants.
pub fn embed(
    model: &AsrModel,
    store: &ParamStore<f32>,
    feats: &[Tensor<f32>],
    tap: usize,
) -> Result<Vec<Tensor<f32>>> {
    let taps = BTreeSet::from([tap]);
    let mut out = Vec::with_capacity(feats.len());
    let all: Vec<usize> = (0..feats.len()).collect();
    for chunk in all.chunks(EMBED_CHUNK) {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(stack_batch::<f32>(feats, chunk)?);
        let enc = model.encoder.forward(&mut tape, &p, x, &taps)?;
        let t = tape.value(enc.taps[&tap]);
        let per = enc.frames * t.shape()[1];
        for (j, _) in chunk.iter().enumerate() {
            let rows = t.data()[j * per..(j + 1) * per].to_vec();
            out.push(Tensor::new(vec![enc.frames, t.shape()[1]], rows)?);
        }
    }
    Ok(out)
}

/// Trains a fresh statistics-pooling classifier on `[frames, d]` inputs and
/// reports macro accuracy on the test side.
pub fn train_speaker_probe(
    inputs: &[Tensor<f32>],
    speakers: &[usize],
    train: &[usize],
    test: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("probe needs nonempty train and test sides"));
    }
    let [frames, d] = inputs[train[0]].shape()[..] else {
        return Err(Error::shape("probe", "inputs must be [frames, d]"));
    };
    // Per-dimension standardization with statistics of the training side.
    let (mut mean, mut sq) = (vec![0.0f64; d], vec![0.0f64; d]);
    for &i in train {
        for row in inputs[i].data().chunks(d) {
            for (k, v) in row.iter().enumerate() {
                mean[k] += f64::from(*v);
                sq[k] += f64::from(*v) * f64::from(*v);
            }
        }
    }
    let n = (train.len() * frames) as f64;
    let scale: Vec<f32> = (0..d)
        .map(|k| {
            let m = mean[k] / n;
            (1.0 / ((sq[k] / n - m * m).max(0.0).sqrt() + 1e-6)) as f32
        })
        .collect();
    let mean: Vec<f32> = mean.iter().map(|m| (m / n) as f32).collect();
    let inputs: Vec<Tensor<f32>> = inputs
        .iter()
        .map(|t| {
            let data = t
                .data()
                .iter()
                .enumerate()
                .map(|(j, v)| (v - mean[j % d]) * scale[j % d])
                .collect();
            Tensor::new(t.shape().to_vec(), data)
        })
        .collect::<Result<_>>()?;
    let inputs = inputs.as_slice();
    let mut store = ParamStore::<f32>::new();
    let clf = SpeakerClassifier::new(
        &mut store,
        &mut Init::new(cfg.seed),
        "probe",
        d,
        cfg.hidden,
        n_classes,
    )?;
    let hyper = AdamHyper {
        lr: cfg.learning_rate,
        ..AdamHyper::default()
    };
    let mut state = AdamState::new();
    let mut sampler = BatchSampler::new(train.to_vec(), cfg.seed)?;
    for _ in 0..cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = stack_batch::<f32>(inputs, &idx)?.reshape([idx.len() * frames, d])?;
        let x = tape.constant(x);
        let logits = clf.forward(&mut tape, &p, x, idx.len(), frames)?;
        let labels: Vec<usize> = idx.iter().map(|&i| speakers[i]).collect();
        let loss = cross_entropy(&mut tape, logits, &labels)?;
        let mut grads = tape.backward(loss)?.into_params();
        adam_step(&mut store, &mut grads, &mut state, &hyper)?;
    }
    let mut predictions = Vec::with_capacity(test.len());
    for chunk in test.chunks(EMBED_CHUNK) {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = stack_batch::<f32>(inputs, chunk)?.reshape([chunk.len() * frames, d])?;
        let x = tape.constant(x);
        let logits = clf.forward(&mut tape, &p, x, chunk.len(), frames)?;
        let l = tape.value(logits);
        for r in 0..chunk.len() {
            predictions.push(argmax_row(l.row(r)));
        }
    }
    let labels: Vec<usize> = test.iter().map(|&i| speakers[i]).collect();
    Ok(ProbeResult {
        accuracy: speaker_accuracy(&predictions, &labels)?,
        predictions,
        labels,
    })
}

/// Lowest index among the maxima.
pub(crate) fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Probes block `tap` of a stage-1 checkpoint for speaker identity. The
/// encoder is only ever bound as constants, so it cannot change.
pub fn train_probe(
    ckpt: &Checkpoint,
    tap: usize,
    corpus: &Corpus,
    feats: &[Tensor<f32>],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let (model, store) = ckpt.asr_model()?;
    if tap == 0 || tap > model.encoder.n_blocks() {
        return Err(Error::invalid(format!(
            "tap {tap} is not available; the checkpoint has blocks 1..={}",
            model.encoder.n_blocks()
        )));
    }
    let (train, test) = cfg.split(corpus)?;
    let mut used: Vec<usize> = train.iter().chain(&test).copied().collect();
    used.sort_unstable();
    let picked: Vec<Tensor<f32>> = used.iter().map(|&i| feats[i].clone()).collect();
    let emb = embed(&model, &store, &picked, tap)?;
    let pos = |i: usize| used.binary_search(&i).expect("index drawn from used");
    let speakers: Vec<usize> = used
        .iter()
        .map(|&i| corpus.utterances[i].speaker_id)
        .collect();
    let train: Vec<usize> = train.iter().map(|&i| pos(i)).collect();
    let test: Vec<usize> = test.iter().map(|&i| pos(i)).collect();
    train_speaker_probe(&emb, &speakers, &train, &test, corpus.n_speakers(), cfg)
}
