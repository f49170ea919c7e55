//! Name-based construction of primitives.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::Op;
use crate::error::{Error, Result};
use crate::synthdata::{FeatureConfig, MelFrontEnd};
use crate::tensor::Scalar;

/// A primitive attribute value.
#[derive(Clone, Debug, PartialEq)]
pub enum Attr {
    Int(i64),
    Float(f64),
    Ints(Vec<i64>),
}

pub type Attrs = BTreeMap<String, Attr>;

/// Every name accepted by [`super::Tape::apply_primitive`].
pub const CATALOG: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "matmul",
    "conv1d",
    "depthwise_conv1d",
    "transpose_conv1d",
    "layer_norm",
    "softmax_log",
    "relu",
    "leaky_relu",
    "swish",
    "sigmoid",
    "tanh",
    "sqrt",
    "log",
    "abs",
    "square",
    "sum",
    "mean",
    "mean_over_axis",
    "variance_over_axis",
    "concat",
    "slice",
    "reshape",
    "swap_last",
    "expand",
    "pad_right",
    "embedding_lookup",
    "pick",
    "scaled_dot_attention",
    "avg_pool1d",
    "grad_reverse",
    "ctc_loss",
    "log_mel",
];

struct Reader<'a> {
    op: &'a str,
    attrs: &'a Attrs,
}

impl Reader<'_> {
    fn err(&self, attr: &str, detail: impl Into<String>) -> Error {
        Error::Attribute {
            op: self.op.to_string(),
            attr: attr.to_string(),
            detail: detail.into(),
        }
    }

    fn float(&self, key: &str, default: Option<f64>) -> Result<f64> {
        match self.attrs.get(key) {
            Some(Attr::Float(v)) => Ok(*v),
            Some(Attr::Int(v)) => Ok(*v as f64),
            Some(_) => Err(self.err(key, "expected a number")),
            None => default.ok_or_else(|| self.err(key, "missing")),
        }
    }

    fn usize(&self, key: &str, default: Option<usize>) -> Result<usize> {
        match self.attrs.get(key) {
            Some(Attr::Int(v)) if *v >= 0 => Ok(*v as usize),
            Some(_) => Err(self.err(key, "expected a nonnegative integer")),
            None => default.ok_or_else(|| self.err(key, "missing")),
        }
    }

    fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        match self.attrs.get(key) {
            None => Ok(None),
            Some(_) => self.usize(key, None).map(Some),
        }
    }

    fn usizes(&self, key: &str) -> Result<Vec<usize>> {
        match self.attrs.get(key) {
            Some(Attr::Ints(v)) if v.iter().all(|&x| x >= 0) => {
                Ok(v.iter().map(|&x| x as usize).collect())
            }
            Some(_) => Err(self.err(key, "expected a list of nonnegative integers")),
            None => Err(self.err(key, "missing")),
        }
    }
}

pub(super) fn parse<T: Scalar>(name: &str, attrs: &Attrs) -> Result<Op<T>> {
    let r = Reader { op: name, attrs };
    let op = match name {
        "add" => Op::Add,
        "sub" => Op::Sub,
        "mul" => Op::Mul,
        "scale" => Op::Scale(r.float("c", None)?),
        "add_scalar" => Op::AddScalar(r.float("c", None)?),
        "matmul" => Op::Matmul,
        "conv1d" => {
            let pad = r.usize("padding", Some(0))?;
            Op::Conv1d {
                stride: r.usize("stride", Some(1))?,
                dilation: r.usize("dilation", Some(1))?,
                pad_left: r.usize("pad_left", Some(pad))?,
                pad_right: r.usize("pad_right", Some(pad))?,
            }
        }
        "depthwise_conv1d" => Op::DepthwiseConv1d {
            seq_len: r.opt_usize("seq_len")?,
        },
        "transpose_conv1d" => Op::TransposeConv1d {
            stride: r.usize("stride", Some(1))?,
            padding: r.usize("padding", Some(0))?,
        },
        "layer_norm" => Op::LayerNorm {
            eps: r.float("eps", Some(1e-5))?,
        },
        "softmax_log" => Op::LogSoftmax,
        "relu" => Op::Relu,
        "leaky_relu" => Op::LeakyRelu(r.float("slope", Some(0.1))?),
        "swish" => Op::Swish,
        "sigmoid" => Op::Sigmoid,
        "tanh" => Op::Tanh,
        "sqrt" => Op::Sqrt,
        "log" => Op::Log,
        "abs" => Op::Abs,
        "square" => Op::Square,
        "sum" => Op::Sum,
        "mean" => Op::Mean,
        "mean_over_axis" => Op::MeanAxis(r.usize("axis", None)?),
        "variance_over_axis" => Op::VarianceAxis(r.usize("axis", None)?),
        "concat" => Op::Concat(r.usize("axis", None)?),
        "slice" => Op::Slice {
            axis: r.usize("axis", None)?,
            start: r.usize("start", None)?,
            end: r.usize("end", None)?,
        },
        "reshape" => Op::Reshape(r.usizes("shape")?),
        "swap_last" => Op::SwapLast,
        "expand" => Op::Expand(r.usizes("shape")?),
        "pad_right" => Op::PadRight(r.usize("n", None)?),
        "embedding_lookup" => Op::EmbeddingLookup(r.usizes("indices")?),
        "pick" => Op::Pick(r.usizes("indices")?),
        "scaled_dot_attention" => Op::Attention {
            heads: r.usize("heads", Some(1))?,
            seq_len: r.opt_usize("seq_len")?,
        },
        "avg_pool1d" => Op::AvgPool1d {
            kernel: r.usize("kernel", None)?,
            stride: r.usize("stride", None)?,
            padding: r.usize("padding", Some(0))?,
        },
        "grad_reverse" => {
            let alpha = r.float("alpha", None)?;
            if !(alpha >= 0.0) {
                return Err(r.err(
                    "alpha",
                    "must be nonnegative; the reversal supplies the sign",
                ));
            }
            Op::GradReverse(alpha)
        }
        "ctc_loss" => Op::Ctc {
            labels: r.usizes("labels")?,
            blank: r.usize("blank", None)?,
        },
        "log_mel" => {
            let d = FeatureConfig::default();
            let cfg = FeatureConfig {
                sample_rate: r.usize("sample_rate", Some(d.sample_rate))?,
                frame_len: r.usize("frame_len", Some(d.frame_len))?,
                hop: r.usize("hop", Some(d.hop))?,
                n_fft: r.usize("n_fft", Some(d.n_fft))?,
                n_mels: r.usize("n_mels", Some(d.n_mels))?,
                log_floor: r.float("log_floor", Some(d.log_floor))?,
            };
            Op::LogMel(Arc::new(MelFrontEnd::new(&cfg)?))
        }
        other => return Err(Error::UnknownPrimitive(other.to_string())),
    };
    Ok(op)
}
