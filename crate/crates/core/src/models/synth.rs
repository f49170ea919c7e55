//! Embedding-to-waveform generator and its discriminator ensemble.

use serde::{Deserialize, Serialize};

use super::params::{Bound, Conv, Init, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

const LEAK: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub model_dim: usize,
    /// Channels after the input convolution and after each upsampling stage.
    pub channels: Vec<usize>,
    /// Transposed-convolution strides; their product is samples per frame.
    pub upsample: Vec<usize>,
    /// Kernel sizes of the parallel residual chains after each upsampling
    /// stage (odd); their outputs are averaged.
    pub res_kernels: Vec<usize>,
    /// Dilations applied in sequence inside every residual chain.
    pub res_dilations: Vec<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            model_dim: 64,
            channels: vec![32, 16, 8, 4],
            upsample: vec![8, 5, 5],
            res_kernels: vec![3],
            res_dilations: vec![1],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.upsample.len() + 1 {
            return Err(Error::invalid(
                "synth needs one more channel entry than upsampling stages",
            ));
        }
        if self.upsample.iter().chain(&self.channels).any(|&v| v == 0) || self.model_dim == 0 {
            return Err(Error::invalid("synth sizes must be positive"));
        }
        if self.res_kernels.is_empty() || self.res_dilations.is_empty() {
            return Err(Error::invalid(
                "synth needs at least one residual kernel and dilation",
            ));
        }
        if self.res_kernels.iter().any(|&k| k % 2 == 0) || self.res_dilations.contains(&0) {
            return Err(Error::invalid(
                "synth residual kernels must be odd and dilations positive",
            ));
        }
        Ok(())
    }

    pub fn samples_per_frame(&self) -> usize {
        self.upsample.iter().product()
    }
}

#[derive(Clone, Debug)]
struct UpStage {
    w: crate::autodiff::ParamId,
    b: crate::autodiff::ParamId,
    stride: usize,
    padding: usize,
    /// `res[j][d]`: chain `j`, dilation step `d`.
    res: Vec<Vec<Conv>>,
}

#[derive(Clone, Debug)]
pub struct SynthGenerator {
    pub cfg: SynthConfig,
    pre: Conv,
    stages: Vec<UpStage>,
    post: Conv,
}

impl SynthGenerator {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        cfg: &SynthConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let pre = Conv::new(
            store,
            init,
            "gen.pre",
            cfg.model_dim,
            cfg.channels[0],
            7,
            1,
            (3, 3),
        )?;
        let mut stages = Vec::new();
        for (i, &s) in cfg.upsample.iter().enumerate() {
            let (c_in, c_out) = (cfg.channels[i], cfg.channels[i + 1]);
            // Output length L·s requires kernel - 2·padding = stride.
            let padding = (s / 4).max(1);
            let k = s + 2 * padding;
            let w = store.add(
                format!("gen.up{i}.w"),
                init.glorot(&[c_in, c_out, k], c_in * k, c_out * k),
            )?;
            let b = store.add(
                format!("gen.up{i}.b"),
                crate::tensor::Tensor::zeros([c_out]),
            )?;
            let res = cfg
                .res_kernels
                .iter()
                .enumerate()
                .map(|(j, &rk)| {
                    cfg.res_dilations
                        .iter()
                        .enumerate()
                        .map(|(di, &d)| {
                            Conv::dilated(
                                store,
                                init,
                                &format!("gen.res{i}.{j}.{di}"),
                                c_out,
                                rk,
                                d,
                            )
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(UpStage {
                w,
                b,
                stride: s,
                padding,
                res,
            });
        }
        let last = *cfg.channels.last().expect("validated");
        let post = Conv::new(store, init, "gen.post", last, 1, 7, 1, (3, 3))?;
        Ok(SynthGenerator {
            cfg: cfg.clone(),
            pre,
            stages,
            post,
        })
    }

    /// `emb: [B·F, d]` to waveforms `[B, F·samples_per_frame]`. Fails if that
    /// length differs from `expected_len`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        emb: Var,
        batch: usize,
        frames: usize,
        expected_len: usize,
    ) -> Result<Var> {
        let len = frames * self.cfg.samples_per_frame();
        if len != expected_len {
            return Err(Error::invalid(format!(
                "generator produces {len} samples from {frames} frames, corpus geometry needs {expected_len}"
            )));
        }
        let d = tape.value(emb).shape()[1];
        let x = tape.reshape(emb, &[batch, frames, d])?;
        let x = tape.swap_last(x)?;
        let mut x = self.pre.forward(tape, p, x)?;
        for st in &self.stages {
            let h = tape.leaky_relu(x, LEAK)?;
            x = tape.transpose_conv1d(h, p.var(st.w), Some(p.var(st.b)), st.stride, st.padding)?;
            let mut sum: Option<Var> = None;
            for chain in &st.res {
                let mut y = x;
                for conv in chain {
                    let h = tape.leaky_relu(y, LEAK)?;
                    let h = conv.forward(tape, p, h)?;
                    y = tape.add(y, h)?;
                }
                sum = Some(match sum {
                    Some(s) => tape.add(s, y)?,
                    None => y,
                });
            }
            x = tape.scale(sum.expect("validated nonempty"), 1.0 / st.res.len() as f64)?;
        }
        let h = tape.leaky_relu(x, LEAK)?;
        let h = self.post.forward(tape, p, h)?;
        let h = tape.tanh(h)?;
        tape.reshape(h, &[batch, len])
    }
}

/// How a sub-discriminator views the waveform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscView {
    /// Average-pooled by a factor of two.
    Scale,
    /// Folded into `p` interleaved phases.
    Period(usize),
}

#[derive(Clone, Debug)]
pub struct SubDiscriminator {
    pub view: DiscView,
    convs: Vec<Conv>,
    post: Conv,
}

/// Judgments and ordered intermediate features of one member.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    pub judgment: Var,
    pub features: Vec<Var>,
}

impl SubDiscriminator {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        view: DiscView,
    ) -> Result<Self> {
        let layers: &[(usize, usize, usize, usize)] = match view {
            DiscView::Scale => &[
                (1, 8, 15, 1),
                (8, 16, 21, 4),
                (16, 32, 21, 4),
                (32, 32, 5, 1),
            ],
            DiscView::Period(_) => &[(1, 8, 5, 3), (8, 16, 5, 3), (16, 32, 5, 3), (32, 32, 5, 1)],
        };
        let convs = layers
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, k, s))| {
                Conv::new(
                    store,
                    init,
                    &format!("{name}.conv{i}"),
                    ci,
                    co,
                    k,
                    s,
                    (k / 2, k / 2),
                )
            })
            .collect::<Result<_>>()?;
        let post = Conv::new(store, init, &format!("{name}.post"), 32, 1, 3, 1, (1, 1))?;
        Ok(SubDiscriminator { view, convs, post })
    }

    /// `wave: [B, L]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        wave: Var,
    ) -> Result<DiscOutput> {
        let [batch, len] = tape.value(wave).shape()[..] else {
            return Err(Error::shape("discriminator", "expected [B, L]"));
        };
        let mut x = match self.view {
            DiscView::Scale => {
                let x = tape.reshape(wave, &[batch, 1, len])?;
                tape.avg_pool1d(x, 4, 2, 2)?
            }
            DiscView::Period(per) => {
                let padded = len.div_ceil(per) * per;
                let x = tape.pad_right(wave, padded - len)?;
                let x = tape.reshape(x, &[batch, padded / per, per])?;
                let x = tape.swap_last(x)?;
                tape.reshape(x, &[batch * per, 1, padded / per])?
            }
        };
        let mut features = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            x = c.forward(tape, p, x)?;
            x = tape.leaky_relu(x, LEAK)?;
            features.push(x);
        }
        let judgment = self.post.forward(tape, p, x)?;
        Ok(DiscOutput { judgment, features })
    }
}

/// A multi-scale and a multi-period member.
#[derive(Clone, Debug)]
pub struct DiscriminatorEnsemble {
    pub members: Vec<SubDiscriminator>,
}

impl DiscriminatorEnsemble {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init) -> Result<Self> {
        Ok(DiscriminatorEnsemble {
            members: vec![
                SubDiscriminator::new(store, init, "disc.scale", DiscView::Scale)?,
                SubDiscriminator::new(store, init, "disc.period2", DiscView::Period(2))?,
            ],
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        wave: Var,
    ) -> Result<Vec<DiscOutput>> {
        self.members
            .iter()
            .map(|m| m.forward(tape, p, wave))
            .collect()
    }
}
