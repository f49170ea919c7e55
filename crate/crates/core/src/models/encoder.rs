//! Conformer-lite encoder and CTC head.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::params::{Bound, Conv, Init, Linear, Norm, ParamStore, LN_EPS};
use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_mels: usize,
    pub model_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub conv_kernel: usize,
    /// Hidden width of the feed-forward modules as a multiple of `model_dim`.
    pub ff_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_mels: 40,
            model_dim: 64,
            n_blocks: 6,
            n_heads: 2,
            conv_kernel: 7,
            ff_mult: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.model_dim == 0 || self.n_mels == 0 || self.ff_mult == 0 {
            return Err(Error::invalid("encoder sizes must be positive"));
        }
        if self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "model_dim {} is not divisible into {} heads",
                self.model_dim, self.n_heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::invalid("conv_kernel must be odd"));
        }
        Ok(())
    }
}

/// Feed-forward module: norm, expand, swish, project.
#[derive(Clone, Debug)]
struct FeedForward {
    norm: Norm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            norm: Norm::new(store, &format!("{name}.norm"), d)?,
            up: Linear::new(store, init, &format!("{name}.up"), d, hidden, true)?,
            down: Linear::new(store, init, &format!("{name}.down"), hidden, d, true)?,
        })
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, p, x)?;
        let h = self.up.forward(tape, p, h)?;
        let h = tape.swish(h)?;
        self.down.forward(tape, p, h)
    }
}

/// One macaron block: ½FF, self-attention, convolution, ½FF, final norm.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    ff1: FeedForward,
    attn_norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    conv_norm: Norm,
    pw_in: Linear,
    depthwise_w: ParamId,
    depthwise_b: ParamId,
    conv_mid_norm: Norm,
    pw_out: Linear,
    ff2: FeedForward,
    out_norm: Norm,
    heads: usize,
}

impl ConformerBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        let n = |s: &str| format!("{name}.{s}");
        Ok(ConformerBlock {
            ff1: FeedForward::new(store, init, &n("ff1"), d, d * cfg.ff_mult)?,
            attn_norm: Norm::new(store, &n("attn.norm"), d)?,
            q: Linear::new(store, init, &n("attn.q"), d, d, true)?,
            k: Linear::new(store, init, &n("attn.k"), d, d, true)?,
            v: Linear::new(store, init, &n("attn.v"), d, d, true)?,
            o: Linear::new(store, init, &n("attn.o"), d, d, true)?,
            conv_norm: Norm::new(store, &n("conv.norm"), d)?,
            pw_in: Linear::new(store, init, &n("conv.pw_in"), d, 2 * d, true)?,
            depthwise_w: store.add(
                n("conv.dw.w"),
                init.glorot(&[d, cfg.conv_kernel], cfg.conv_kernel, cfg.conv_kernel),
            )?,
            depthwise_b: store.add(n("conv.dw.b"), Tensor::zeros([d]))?,
            conv_mid_norm: Norm::new(store, &n("conv.mid_norm"), d)?,
            pw_out: Linear::new(store, init, &n("conv.pw_out"), d, d, true)?,
            ff2: FeedForward::new(store, init, &n("ff2"), d, d * cfg.ff_mult)?,
            out_norm: Norm::new(store, &n("out_norm"), d)?,
            heads: cfg.n_heads,
        })
    }

    /// `x: [B·F, d]` holding `B` sequences of `frames` rows each.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        frames: usize,
    ) -> Result<Var> {
        let d = tape.value(x).shape()[1];

        let h = self.ff1.forward(tape, p, x)?;
        let h = tape.scale(h, 0.5)?;
        let x = tape.add(x, h)?;

        let h = self.attn_norm.forward(tape, p, x)?;
        let q = self.q.forward(tape, p, h)?;
        let k = self.k.forward(tape, p, h)?;
        let v = self.v.forward(tape, p, h)?;
        let a = tape.attention(q, k, v, self.heads, Some(frames))?;
        let a = self.o.forward(tape, p, a)?;
        let x = tape.add(x, a)?;

        let h = self.conv_norm.forward(tape, p, x)?;
        let h = self.pw_in.forward(tape, p, h)?;
        let lin = tape.slice(h, 1, 0, d)?;
        let gate = tape.slice(h, 1, d, 2 * d)?;
        let gate = tape.sigmoid(gate)?;
        let h = tape.mul(lin, gate)?;
        let h = tape.depthwise_conv1d(
            h,
            p.var(self.depthwise_w),
            Some(p.var(self.depthwise_b)),
            Some(frames),
        )?;
        let h = self.conv_mid_norm.forward(tape, p, h)?;
        let h = tape.swish(h)?;
        let h = self.pw_out.forward(tape, p, h)?;
        let x = tape.add(x, h)?;

        let h = self.ff2.forward(tape, p, x)?;
        let h = tape.scale(h, 0.5)?;
        let x = tape.add(x, h)?;
        self.out_norm.forward(tape, p, x)
    }
}

/// Strided convolutional frontend followed by conformer-lite blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    frontend: Conv,
    pub blocks: Vec<ConformerBlock>,
}

/// Result of an encoder pass over a batch.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Last block output, `[B·F', d]`.
    pub out: Var,
    /// Block index (1-based) to that block's output.
    pub taps: BTreeMap<usize, Var>,
    pub batch: usize,
    /// Frames per sequence after subsampling.
    pub frames: usize,
}

/// Output frames for `frames` input frames: the frontend halves time.
pub fn subsampled_frames(frames: usize) -> usize {
    frames.div_ceil(2)
}

fn positions<T: Scalar>(batch: usize, frames: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(batch * frames * d);
    for _ in 0..batch {
        for t in 0..frames {
            for i in 0..d {
                let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let angle = t as f64 * rate;
                data.push(T::from_f64(if i % 2 == 0 {
                    angle.sin()
                } else {
                    angle.cos()
                }));
            }
        }
    }
    Tensor::new([batch * frames, d], data).expect("consistent shape")
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let frontend = Conv::new(
            store,
            init,
            "enc.front",
            cfg.n_mels,
            cfg.model_dim,
            3,
            2,
            (1, 1),
        )?;
        let blocks = (1..=cfg.n_blocks)
            .map(|i| ConformerBlock::new(store, init, &format!("enc.block{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Encoder {
            cfg: cfg.clone(),
            frontend,
            blocks,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// `feats: [B, F, n_mels]`. Taps are 1-based block indices.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        feats: Var,
        taps: &BTreeSet<usize>,
    ) -> Result<EncoderOutput> {
        if let Some(&bad) = taps.iter().find(|&&t| t == 0 || t > self.n_blocks()) {
            return Err(Error::invalid(format!(
                "tap {bad} outside 1..={}",
                self.n_blocks()
            )));
        }
        let shape = tape.value(feats).shape().to_vec();
        let [batch, frames_in, n_mels] = shape[..] else {
            return Err(Error::shape(
                "encoder",
                format!("expected [B, F, n_mels], got {shape:?}"),
            ));
        };
        if n_mels != self.cfg.n_mels {
            return Err(Error::shape(
                "encoder",
                format!("expected {} mel bands, got {n_mels}", self.cfg.n_mels),
            ));
        }
        let d = self.cfg.model_dim;
        let x = tape.layer_norm(feats, None, LN_EPS)?;
        let x = tape.swap_last(x)?;
        let x = self.frontend.forward(tape, p, x)?;
        let x = tape.relu(x)?;
        let x = tape.swap_last(x)?;
        let frames = subsampled_frames(frames_in);
        debug_assert_eq!(tape.value(x).shape(), &[batch, frames, d]);
        let x = tape.reshape(x, &[batch * frames, d])?;
        let pos = tape.constant(positions(batch, frames, d));
        let mut x = tape.add(x, pos)?;

        let mut tap_out = BTreeMap::new();
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, p, x, frames)?;
            if taps.contains(&(i + 1)) {
                tap_out.insert(i + 1, x);
            }
        }
        Ok(EncoderOutput {
            out: x,
            taps: tap_out,
            batch,
            frames,
        })
    }
}

/// Projection to `|V| + 1` symbols (blank last) and log-softmax.
#[derive(Clone, Debug)]
pub struct CtcHead {
    proj: Linear,
    pub n_symbols: usize,
}

impl CtcHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        d: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        Ok(CtcHead {
            proj: Linear::new(store, init, "ctc.proj", d, vocab_size + 1, true)?,
            n_symbols: vocab_size + 1,
        })
    }

    pub fn blank(&self) -> usize {
        self.n_symbols - 1
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let logits = self.proj.forward(tape, p, x)?;
        tape.log_softmax(logits)
    }
}

/// Stacks per-utterance feature matrices `[F, n_mels]` into `[B, F, n_mels]`.
pub fn stack_features<T: Scalar>(feats: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = feats.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(feats.len() * first.numel());
    for f in feats {
        if f.shape() != shape.as_slice() {
            return Err(Error::shape(
                "stack_features",
                format!("{:?} vs {shape:?}", f.shape()),
            ));
        }
        data.extend_from_slice(f.data());
    }
    let mut full = vec![feats.len()];
    full.extend(shape);
    Tensor::new(full, data)
}
