//! Toy embedding-to-waveform GAN on frozen recognizer embeddings.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::data::{stack_batch, BatchSampler};
use super::optim::{adam_step, AdamHyper, AdamState};
use super::probe::embed;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_loss, feature_matching, generator_loss, mel_l1, SynthLossConfig,
};
use crate::models::{
    Architecture, Checkpoint, DiscriminatorEnsemble, Init, ParamStore, SynthConfig, SynthGenerator,
};
use crate::synthdata::{Corpus, MelFrontEnd};
use crate::tensor::Tensor;

const DISC_INIT_STREAM: u64 = 0x5eed_0003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthTrainConfig {
    pub synth: SynthConfig,
    pub loss: SynthLossConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Held-out `L_mel` is measured every this many steps.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for SynthTrainConfig {
    fn default() -> Self {
        SynthTrainConfig {
            synth: SynthConfig::default(),
            loss: SynthLossConfig::default(),
            steps: 2000,
            batch_size: 4,
            learning_rate: 2e-3,
            beta1: 0.8,
            beta2: 0.99,
            eval_every: 50,
            seed: 0,
        }
    }
}

impl SynthTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.loss.validate()?;
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::invalid(
                "synth steps, batch_size and eval_every must be positive",
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("synth learning_rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutcome {
    /// Generator weights; the discriminators are discarded.
    pub checkpoint: Checkpoint,
    /// `(step, held-out L_mel)` pairs.
    pub heldout_mel: Vec<(usize, f64)>,
    /// `(step, L_G, L_D)` per step.
    pub losses: Vec<(usize, f64, f64)>,
}

impl SynthOutcome {
    /// Value recorded at `step`, if any.
    pub fn heldout_at(&self, step: usize) -> Option<f64> {
        self.heldout_mel
            .iter()
            .find(|(s, _)| *s == step)
            .map(|(_, v)| *v)
    }
}

/// Rebuilds a trained generator and resynthesizes waveforms from frame
/// embeddings `[F', d]`.
pub fn resynthesize(
    gen: &SynthGenerator,
    store: &ParamStore<f32>,
    emb: &[Tensor<f32>],
    len: usize,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(emb.len());
    let all: Vec<usize> = (0..emb.len()).collect();
    for chunk in all.chunks(8) {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let (frames, d) = (emb[chunk[0]].shape()[0], emb[chunk[0]].shape()[1]);
        let x = stack_batch::<f32>(emb, chunk)?.reshape([chunk.len() * frames, d])?;
        let x = tape.constant(x);
        let w = gen.forward(&mut tape, &p, x, chunk.len(), frames, len)?;
        let w = tape.value(w);
        for j in 0..chunk.len() {
            out.push(w.data()[j * len..(j + 1) * len].to_vec());
        }
    }
    Ok(out)
}

/// Resynthesizes the utterances `indices` through a recognizer checkpoint
/// and a generator checkpoint trained on its embeddings.
pub fn resynthesize_utterances(
    asr: &Checkpoint,
    generator: &Checkpoint,
    feats: &[Tensor<f32>],
    indices: &[usize],
    len: usize,
) -> Result<Vec<Vec<f32>>> {
    let (model, store) = asr.asr_model()?;
    let (gen, g_store, tap) = generator.synth_model()?;
    if tap == 0 || tap > model.encoder.n_blocks() {
        return Err(Error::invalid(format!(
            "generator reads tap {tap}, absent from the recognizer"
        )));
    }
    let picked: Vec<Tensor<f32>> = indices.iter().map(|&i| feats[i].clone()).collect();
    let emb = embed(&model, &store, &picked, tap)?;
    resynthesize(&gen, &g_store, &emb, len)
}

fn waves(corpus: &Corpus, idx: &[usize]) -> Result<Tensor<f32>> {
    let len = corpus.utterances[idx[0]].waveform.len();
    let mut data = Vec::with_capacity(idx.len() * len);
    for &i in idx {
        data.extend_from_slice(&corpus.utterances[i].waveform);
    }
    Tensor::new(vec![idx.len(), len], data)
}

fn heldout_mel(
    gen: &SynthGenerator,
    store: &ParamStore<f32>,
    emb: &[Tensor<f32>],
    corpus: &Corpus,
    heldout: &[usize],
    front: &Arc<MelFrontEnd<f32>>,
) -> Result<f64> {
    let len = corpus.config.utterance_len();
    let hats = resynthesize(
        gen,
        store,
        &heldout.iter().map(|&i| emb[i].clone()).collect::<Vec<_>>(),
        len,
    )?;
    let mut total = 0.0;
    for (&i, hat) in heldout.iter().zip(hats) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(corpus.utterances[i].waveform.clone()));
        let y = tape.constant(Tensor::from_vec(hat));
        let l = mel_l1(&mut tape, x, y, front)?;
        total += f64::from(tape.value(l).item());
    }
    Ok(total / heldout.len() as f64)
}

/// Alternating discriminator and generator updates. `train` and `heldout`
/// index corpus utterances; the generator reads embeddings from block `tap`
/// of the frozen recognizer in `ckpt`.
pub fn train_synth(
    ckpt: &Checkpoint,
    tap: usize,
    corpus: &Corpus,
    feats: &[Tensor<f32>],
    train: &[usize],
    heldout: &[usize],
    cfg: &SynthTrainConfig,
) -> Result<SynthOutcome> {
    cfg.validate()?;
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::invalid(
            "synthesis needs nonempty train and held-out sets",
        ));
    }
    let (model, asr_store) = ckpt.asr_model()?;
    if tap == 0 || tap > model.encoder.n_blocks() {
        return Err(Error::invalid(format!(
            "tap {tap} is not available in the checkpoint"
        )));
    }
    let emb = embed(&model, &asr_store, feats, tap)?;
    let d = model.encoder.cfg.model_dim;
    let synth_cfg = SynthConfig {
        model_dim: d,
        ..cfg.synth.clone()
    };
    let len = corpus.config.utterance_len();
    let frames = emb[0].shape()[0];
    if frames * synth_cfg.samples_per_frame() != len {
        return Err(Error::invalid(format!(
            "{frames} embedding frames x {} samples per frame does not match utterances of {len} samples",
            synth_cfg.samples_per_frame()
        )));
    }
    let mut g_store = ParamStore::<f32>::new();
    let gen = SynthGenerator::new(&mut g_store, &mut Init::new(cfg.seed), &synth_cfg)?;
    let mut d_store = ParamStore::<f32>::new();
    let disc =
        DiscriminatorEnsemble::new(&mut d_store, &mut Init::new(cfg.seed ^ DISC_INIT_STREAM))?;
    let front = Arc::new(MelFrontEnd::<f32>::new(&cfg.loss.features)?);
    let hyper = AdamHyper {
        lr: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
        clip: Some(10.0),
    };
    let (mut g_state, mut d_state) = (AdamState::new(), AdamState::new());
    let mut sampler = BatchSampler::new(train.to_vec(), cfg.seed)?;
    let mut heldout_trace = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size);
        let b = idx.len();
        let real = waves(corpus, &idx)?;
        let e = stack_batch::<f32>(&emb, &idx)?.reshape([b * frames, d])?;

        // Discriminator step on a detached resynthesis.
        let fake = {
            let mut tape = Tape::new();
            let p = g_store.bind_frozen(&mut tape);
            let x = tape.constant(e.clone());
            let w = gen.forward(&mut tape, &p, x, b, frames, len)?;
            tape.value(w).clone()
        };
        let l_d = {
            let mut tape = Tape::new();
            let p = d_store.bind(&mut tape);
            let r = tape.constant(real.clone());
            let f = tape.constant(fake);
            let dr = disc.forward(&mut tape, &p, r)?;
            let df = disc.forward(&mut tape, &p, f)?;
            let jr: Vec<_> = dr.iter().map(|o| o.judgment).collect();
            let jf: Vec<_> = df.iter().map(|o| o.judgment).collect();
            let loss = discriminator_loss(&mut tape, &jr, &jf, cfg.loss.orientation)?;
            let mut grads = tape.backward(loss)?.into_params();
            adam_step(&mut d_store, &mut grads, &mut d_state, &hyper)?;
            f64::from(tape.value(loss).item())
        };

        // Generator step against the updated discriminators.
        let l_g = {
            let mut tape = Tape::new();
            let p_d = d_store.bind_frozen(&mut tape);
            let p_g = g_store.bind(&mut tape);
            let x = tape.constant(e);
            let w = gen.forward(&mut tape, &p_g, x, b, frames, len)?;
            let r = tape.constant(real);
            let dr = disc.forward(&mut tape, &p_d, r)?;
            let df = disc.forward(&mut tape, &p_d, w)?;
            let fr: Vec<_> = dr.iter().flat_map(|o| o.features.clone()).collect();
            let ff: Vec<_> = df.iter().flat_map(|o| o.features.clone()).collect();
            let l_fm = feature_matching(&mut tape, &fr, &ff)?;
            let l_mel = mel_l1(&mut tape, r, w, &front)?;
            let jr: Vec<_> = dr.iter().map(|o| o.judgment).collect();
            let jf: Vec<_> = df.iter().map(|o| o.judgment).collect();
            let loss = generator_loss(&mut tape, &jr, &jf, l_fm, l_mel, &cfg.loss)?;
            let mut grads = tape.backward(loss)?.into_params();
            adam_step(&mut g_store, &mut grads, &mut g_state, &hyper)?;
            f64::from(tape.value(loss).item())
        };
        if !(l_g.is_finite() && l_d.is_finite()) {
            return Err(Error::Diverged {
                step,
                loss: l_g,
                reference: f64::NAN,
                factor: f64::NAN,
            });
        }
        losses.push((step, l_g, l_d));
        if step % cfg.eval_every == 0 || step == cfg.steps {
            heldout_trace.push((
                step,
                heldout_mel(&gen, &g_store, &emb, corpus, heldout, &front)?,
            ));
        }
    }

    let checkpoint = Checkpoint::capture(
        Architecture::Synth {
            synth: synth_cfg,
            tap,
        },
        None,
        cfg.seed,
        cfg.steps,
        &g_store,
        |_| true,
    );
    Ok(SynthOutcome {
        checkpoint,
        heldout_mel: heldout_trace,
        losses,
    })
}
