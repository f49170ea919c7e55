//! The recognizer: encoder, CTC head and an optional speaker-adversarial
//! branch behind a gradient reversal.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::encoder::{CtcHead, Encoder, EncoderConfig, EncoderOutput};
use super::params::{Bound, Init, ParamStore};
use super::speaker::SpeakerClassifier;
use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Where the reversal sits and how strongly it acts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrlConfig {
    /// 1-based block whose output feeds the speaker classifier.
    pub tap_layer: usize,
    /// Gradient scale applied by the reversal.
    pub alpha: f64,
    /// Weight of the speaker loss in the combined objective.
    pub lambda: f64,
}

impl GrlConfig {
    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        if self.tap_layer == 0 || self.tap_layer > n_blocks {
            return Err(Error::invalid(format!(
                "GRL tap {} outside 1..={n_blocks}",
                self.tap_layer
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Scale of the speaker gradient as it reaches the encoder.
    pub fn effective_scale(&self) -> f64 {
        self.alpha * self.lambda
    }
}

#[derive(Clone, Debug)]
pub struct SpeakerBranch {
    pub grl: GrlConfig,
    pub classifier: SpeakerClassifier,
}

/// Parameter groups induced by a reversal placed after block `tap`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Frontend and blocks `1..=tap`.
    Extractor,
    /// Blocks after the tap.
    Encoder,
    /// CTC projection.
    Task,
    /// Adversarial speaker classifier.
    Speaker,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Extractor,
        ParamGroup::Encoder,
        ParamGroup::Task,
        ParamGroup::Speaker,
    ];

    pub fn of(name: &str, tap: usize) -> ParamGroup {
        if name.starts_with("spk.") {
            return ParamGroup::Speaker;
        }
        if name.starts_with("ctc.") {
            return ParamGroup::Task;
        }
        if let Some(rest) = name.strip_prefix("enc.block") {
            let idx: usize = rest
                .split('.')
                .next()
                .and_then(|s| s.parse().ok())
                .expect("block parameter names carry their index");
            return if idx <= tap {
                ParamGroup::Extractor
            } else {
                ParamGroup::Encoder
            };
        }
        ParamGroup::Extractor
    }
}

#[derive(Clone, Debug)]
pub struct AsrModel {
    pub encoder: Encoder,
    pub head: CtcHead,
    pub branch: Option<SpeakerBranch>,
}

/// Everything a training or evaluation step needs from one forward pass.
#[derive(Clone, Debug)]
pub struct AsrForward {
    pub enc: EncoderOutput,
    /// `[B·F', |V|+1]` log-probabilities.
    pub log_probs: Var,
    /// `[B, n_speakers]`, present when a speaker branch is attached.
    pub speaker_logits: Option<Var>,
}

pub const SPEAKER_HIDDEN: usize = 64;

impl AsrModel {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        cfg: &EncoderConfig,
        vocab_size: usize,
    ) -> Result<Self> {
        if vocab_size < 1 {
            return Err(Error::invalid("vocabulary must be nonempty"));
        }
        let encoder = Encoder::new(store, init, cfg)?;
        let head = CtcHead::new(store, init, cfg.model_dim, vocab_size)?;
        Ok(AsrModel {
            encoder,
            head,
            branch: None,
        })
    }

    /// Adds the speaker classifier behind a single reversal at `grl.tap_layer`.
    pub fn attach_speaker_branch<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        init: &mut Init,
        grl: GrlConfig,
        n_speakers: usize,
    ) -> Result<()> {
        if self.branch.is_some() {
            return Err(Error::invalid(
                "a speaker branch is already attached; one reversal per model",
            ));
        }
        grl.validate(self.encoder.n_blocks())?;
        let classifier = SpeakerClassifier::new(
            store,
            init,
            "spk",
            self.encoder.cfg.model_dim,
            SPEAKER_HIDDEN,
            n_speakers,
        )?;
        self.branch = Some(SpeakerBranch { grl, classifier });
        Ok(())
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        feats: Var,
        extra_taps: &BTreeSet<usize>,
    ) -> Result<AsrForward> {
        self.forward_impl(tape, p, feats, extra_taps, true)
    }

    /// Same graph with the reversal replaced by plain identity, so the
    /// speaker loss pulls the encoder in its ordinary direction. Only used to
    /// check the reversal against separately computed gradients.
    pub fn forward_unreversed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        feats: Var,
        extra_taps: &BTreeSet<usize>,
    ) -> Result<AsrForward> {
        self.forward_impl(tape, p, feats, extra_taps, false)
    }

    fn forward_impl<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        feats: Var,
        extra_taps: &BTreeSet<usize>,
        reverse: bool,
    ) -> Result<AsrForward> {
        let mut taps = extra_taps.clone();
        if let Some(b) = &self.branch {
            taps.insert(b.grl.tap_layer);
        }
        let enc = self.encoder.forward(tape, p, feats, &taps)?;
        let log_probs = self.head.forward(tape, p, enc.out)?;
        let speaker_logits = match &self.branch {
            Some(b) => {
                let tapped = enc.taps[&b.grl.tap_layer];
                let reversed = if reverse {
                    tape.grad_reverse(tapped, b.grl.alpha)?
                } else {
                    tapped
                };
                Some(
                    b.classifier
                        .forward(tape, p, reversed, enc.batch, enc.frames)?,
                )
            }
            None => None,
        };
        Ok(AsrForward {
            enc,
            log_probs,
            speaker_logits,
        })
    }

    /// Group of every parameter in `store` for a reversal after block `tap`.
    pub fn groups<T: Scalar>(store: &ParamStore<T>, tap: usize) -> Vec<(ParamId, ParamGroup)> {
        store
            .iter()
            .map(|(id, name, _)| (id, ParamGroup::of(name, tap)))
            .collect()
    }
}
