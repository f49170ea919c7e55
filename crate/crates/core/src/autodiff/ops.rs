//! Primitive operations: forward evaluation and reverse-mode rules.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::synthdata::MelFrontEnd;
use crate::tensor::{log_add, Scalar, Tensor};

/// A primitive recorded on the tape together with its attributes.
#[derive(Clone, Debug)]
pub enum Op<T: Scalar> {
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Matmul,
    /// Input `[C_in, L]` or `[B, C_in, L]`, weight `[C_out, C_in, K]`, optional bias `[C_out]`.
    Conv1d {
        stride: usize,
        dilation: usize,
        pad_left: usize,
        pad_right: usize,
    },
    /// Time-major input `[T, C]`, weight `[C, K]` (odd K, "same" padding), optional bias `[C]`.
    /// With `seq_len`, the rows are packed sequences of that length and do not mix.
    DepthwiseConv1d {
        seq_len: Option<usize>,
    },
    /// Input `[C_in, L]` or `[B, C_in, L]`, weight `[C_in, C_out, K]`, optional bias `[C_out]`.
    /// Output length is `(L - 1)·stride + K - 2·padding`.
    TransposeConv1d {
        stride: usize,
        padding: usize,
    },
    /// Normalizes over the last axis; optional affine `gamma`, `beta`.
    LayerNorm {
        eps: f64,
    },
    /// Log-softmax over the last axis.
    LogSoftmax,
    Relu,
    LeakyRelu(f64),
    Swish,
    Sigmoid,
    Tanh,
    /// Square root whose derivative is taken as zero at zero.
    Sqrt,
    Log,
    Abs,
    Square,
    Sum,
    Mean,
    MeanAxis(usize),
    /// Population variance along an axis.
    VarianceAxis(usize),
    Concat(usize),
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape(Vec<usize>),
    /// Swaps the last two axes.
    SwapLast,
    /// Tiles the input over new leading axes; the input shape must be a suffix of the target.
    Expand(Vec<usize>),
    /// Appends zeros on the last axis.
    PadRight(usize),
    EmbeddingLookup(Vec<usize>),
    /// `x[b, idx[b]]` for `x: [B, C]`.
    Pick(Vec<usize>),
    /// Multi-head scaled dot-product attention over `q, k, v: [T, D]`.
    Attention {
        heads: usize,
        seq_len: Option<usize>,
    },
    AvgPool1d {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Identity forward, `-alpha · g` backward.
    GradReverse(f64),
    /// Connectionist temporal classification loss on log-probabilities `[T, C]`.
    Ctc {
        labels: Vec<usize>,
        blank: usize,
    },
    /// Log-mel spectrogram of a waveform `[L]`.
    LogMel(Arc<MelFrontEnd<T>>),
}

type Grads<T> = Vec<Option<Tensor<T>>>;

fn arity<T: Scalar>(op: &'static str, inputs: &[&Tensor<T>], lo: usize, hi: usize) -> Result<()> {
    if inputs.len() < lo || inputs.len() > hi {
        return Err(Error::shape(
            op,
            format!("expected {lo}..={hi} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

/// Batch view of a conv input: `(batch, channels, length)`.
fn conv_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, l] => Ok((1, c, l)),
        [b, c, l] => Ok((b, c, l)),
        _ => Err(Error::shape(
            op,
            format!("expected rank 2 or 3 input, got {shape:?}"),
        )),
    }
}

fn conv_out_shape(in_shape: &[usize], c: usize, l: usize) -> Vec<usize> {
    if in_shape.len() == 3 {
        vec![in_shape[0], c, l]
    } else {
        vec![c, l]
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn elementwise_binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    } else if b.numel() == 1 {
        let y = b.item();
        Ok(Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().map(|&x| f(x, y)).collect(),
        ))
    } else if a.numel() == 1 {
        let x = a.item();
        Ok(Tensor::from_parts(
            b.shape().to_vec(),
            b.data().iter().map(|&y| f(x, y)).collect(),
        ))
    } else {
        Err(Error::shape(
            op,
            format!(
                "{:?} vs {:?} (only scalar broadcasting is supported)",
                a.shape(),
                b.shape()
            ),
        ))
    }
}

/// Reduces a gradient computed at the broadcast output shape back onto an operand.
fn unbroadcast<T: Scalar>(operand: &Tensor<T>, full: Vec<T>, out_shape: &[usize]) -> Tensor<T> {
    if operand.shape() == out_shape {
        Tensor::from_parts(out_shape.to_vec(), full)
    } else {
        let s: T = full.into_iter().sum();
        Tensor::from_parts(operand.shape().to_vec(), vec![s])
    }
}

impl<T: Scalar> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Matmul => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::DepthwiseConv1d { .. } => "depthwise_conv1d",
            Op::TransposeConv1d { .. } => "transpose_conv1d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::LogSoftmax => "softmax_log",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Swish => "swish",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Sqrt => "sqrt",
            Op::Log => "log",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MeanAxis(_) => "mean_over_axis",
            Op::VarianceAxis(_) => "variance_over_axis",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::SwapLast => "swap_last",
            Op::Expand(_) => "expand",
            Op::PadRight(_) => "pad_right",
            Op::EmbeddingLookup(_) => "embedding_lookup",
            Op::Pick(_) => "pick",
            Op::Attention { .. } => "scaled_dot_attention",
            Op::AvgPool1d { .. } => "avg_pool1d",
            Op::GradReverse(_) => "grad_reverse",
            Op::Ctc { .. } => "ctc_loss",
            Op::LogMel(_) => "log_mel",
        }
    }

    /// Evaluates the primitive, returning its output and any activations the
    /// backward rule needs beyond the inputs and output.
    pub fn forward(&self, inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let none = Vec::new();
        match self {
            Op::Add => {
                arity("add", inputs, 2, 2)?;
                Ok((
                    elementwise_binary("add", inputs[0], inputs[1], |a, b| a + b)?,
                    none,
                ))
            }
            Op::Sub => {
                arity("sub", inputs, 2, 2)?;
                Ok((
                    elementwise_binary("sub", inputs[0], inputs[1], |a, b| a - b)?,
                    none,
                ))
            }
            Op::Mul => {
                arity("mul", inputs, 2, 2)?;
                Ok((
                    elementwise_binary("mul", inputs[0], inputs[1], |a, b| a * b)?,
                    none,
                ))
            }
            Op::Scale(c) => {
                arity("scale", inputs, 1, 1)?;
                let c = T::from_f64(*c);
                Ok((inputs[0].map(|v| v * c), none))
            }
            Op::AddScalar(c) => {
                arity("add_scalar", inputs, 1, 1)?;
                let c = T::from_f64(*c);
                Ok((inputs[0].map(|v| v + c), none))
            }
            Op::Matmul => {
                arity("matmul", inputs, 2, 2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match (a.shape(), b.shape()) {
                    (&[m, k], &[k2, n]) if k == k2 => Ok((
                        Tensor::from_parts(
                            vec![m, n],
                            kernels::matmul(a.data(), b.data(), m, k, n),
                        ),
                        none,
                    )),
                    (sa, sb) => Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
                }
            }
            Op::Conv1d {
                stride,
                dilation,
                pad_left,
                pad_right,
            } => conv1d_forward(inputs, *stride, *dilation, *pad_left, *pad_right),
            Op::DepthwiseConv1d { seq_len } => {
                arity("depthwise_conv1d", inputs, 2, 3)?;
                let out = depthwise_forward(inputs, *seq_len)?;
                Ok((out, none))
            }
            Op::TransposeConv1d { stride, padding } => {
                Ok((tconv_forward(inputs, *stride, *padding)?, none))
            }
            Op::LayerNorm { eps } => layer_norm_forward(inputs, *eps),
            Op::LogSoftmax => {
                arity("softmax_log", inputs, 1, 1)?;
                let x = inputs[0];
                let d = last_dim(x.shape());
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(d.max(1)) {
                    let m = row.iter().fold(T::NEG_INFINITY, |a, &b| a.max(b));
                    let s: T = row.iter().map(|&v| (v - m).exp()).sum();
                    let lse = m + s.ln();
                    for v in row.iter_mut() {
                        *v -= lse;
                    }
                }
                Ok((Tensor::from_parts(x.shape().to_vec(), out), none))
            }
            Op::Relu => unary(inputs, "relu", |x| if x > T::ZERO { x } else { T::ZERO }),
            Op::LeakyRelu(s) => {
                let s = T::from_f64(*s);
                unary(
                    inputs,
                    "leaky_relu",
                    move |x| if x > T::ZERO { x } else { s * x },
                )
            }
            Op::Swish => unary(inputs, "swish", |x| x * sigmoid(x)),
            Op::Sigmoid => unary(inputs, "sigmoid", sigmoid),
            Op::Tanh => unary(inputs, "tanh", |x| x.tanh()),
            Op::Sqrt => unary(inputs, "sqrt", |x| x.sqrt()),
            Op::Log => unary(inputs, "log", |x| x.ln()),
            Op::Abs => unary(inputs, "abs", |x| x.abs()),
            Op::Square => unary(inputs, "square", |x| x * x),
            Op::Sum => {
                arity("sum", inputs, 1, 1)?;
                Ok((Tensor::scalar(inputs[0].sum()), none))
            }
            Op::Mean => {
                arity("mean", inputs, 1, 1)?;
                let x = inputs[0];
                if x.numel() == 0 {
                    return Err(Error::shape("mean", "empty tensor"));
                }
                Ok((
                    Tensor::scalar(x.sum() / T::from_f64(x.numel() as f64)),
                    none,
                ))
            }
            Op::MeanAxis(axis) | Op::VarianceAxis(axis) => {
                let name = self.name();
                arity(name, inputs, 1, 1)?;
                let x = inputs[0];
                if *axis >= x.rank() || x.shape()[*axis] == 0 {
                    return Err(Error::shape(
                        if matches!(self, Op::MeanAxis(_)) {
                            "mean_over_axis"
                        } else {
                            "variance_over_axis"
                        },
                        format!("axis {axis} invalid for {:?}", x.shape()),
                    ));
                }
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let mean = axis_mean(x.data(), outer, n, inner);
                let mut shape = x.shape().to_vec();
                shape.remove(*axis);
                if matches!(self, Op::MeanAxis(_)) {
                    return Ok((Tensor::from_parts(shape, mean), none));
                }
                let nf = T::from_f64(n as f64);
                let mut var = vec![T::ZERO; outer * inner];
                let mut buf = vec![T::ZERO; n];
                for o in 0..outer {
                    for i in 0..inner {
                        for (j, b) in buf.iter_mut().enumerate() {
                            let d = x.data()[(o * n + j) * inner + i] - mean[o * inner + i];
                            *b = d * d;
                        }
                        var[o * inner + i] = sorted_sum(&mut buf) / nf;
                    }
                }
                Ok((
                    Tensor::from_parts(shape.clone(), var),
                    vec![Tensor::from_parts(shape, mean)],
                ))
            }
            Op::Concat(axis) => {
                if inputs.is_empty() {
                    return Err(Error::shape("concat", "no inputs"));
                }
                let first = inputs[0].shape();
                if *axis >= first.len() {
                    return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
                }
                let mut total = 0;
                for t in inputs {
                    let s = t.shape();
                    if s.len() != first.len()
                        || s.iter()
                            .zip(first)
                            .enumerate()
                            .any(|(i, (a, b))| i != *axis && a != b)
                    {
                        return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
                    }
                    total += s[*axis];
                }
                let (outer, _, inner) = split_axis(first, *axis);
                let mut data = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for t in inputs {
                        let n = t.shape()[*axis];
                        data.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
                    }
                }
                let mut shape = first.to_vec();
                shape[*axis] = total;
                Ok((Tensor::from_parts(shape, data), none))
            }
            Op::Slice { axis, start, end } => {
                arity("slice", inputs, 1, 1)?;
                let x = inputs[0];
                if *axis >= x.rank() || start >= end || *end > x.shape()[*axis] {
                    return Err(Error::shape(
                        "slice",
                        format!("axis {axis} range {start}..{end} for {:?}", x.shape()),
                    ));
                }
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let w = end - start;
                let mut data = Vec::with_capacity(outer * w * inner);
                for o in 0..outer {
                    data.extend_from_slice(
                        &x.data()[(o * n + start) * inner..(o * n + end) * inner],
                    );
                }
                let mut shape = x.shape().to_vec();
                shape[*axis] = w;
                Ok((Tensor::from_parts(shape, data), none))
            }
            Op::Reshape(shape) => {
                arity("reshape", inputs, 1, 1)?;
                Ok((inputs[0].clone().reshape(shape.clone())?, none))
            }
            Op::SwapLast => {
                arity("swap_last", inputs, 1, 1)?;
                let x = inputs[0];
                let r = x.rank();
                if r < 2 {
                    return Err(Error::shape("swap_last", format!("rank {r}")));
                }
                let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
                let batch = x.numel() / (rows * cols).max(1);
                let mut data = Vec::with_capacity(x.numel());
                for b in 0..batch {
                    data.extend(kernels::transpose(
                        &x.data()[b * rows * cols..(b + 1) * rows * cols],
                        rows,
                        cols,
                    ));
                }
                let mut shape = x.shape().to_vec();
                shape.swap(r - 2, r - 1);
                Ok((Tensor::from_parts(shape, data), none))
            }
            Op::Expand(target) => {
                arity("expand", inputs, 1, 1)?;
                let x = inputs[0];
                if target.len() < x.rank() || &target[target.len() - x.rank()..] != x.shape() {
                    return Err(Error::shape(
                        "expand",
                        format!("{:?} is not a suffix of {target:?}", x.shape()),
                    ));
                }
                let reps: usize = target[..target.len() - x.rank()].iter().product();
                let mut data = Vec::with_capacity(reps * x.numel());
                for _ in 0..reps {
                    data.extend_from_slice(x.data());
                }
                Ok((Tensor::from_parts(target.clone(), data), none))
            }
            Op::PadRight(n) => {
                arity("pad_right", inputs, 1, 1)?;
                let x = inputs[0];
                let d = last_dim(x.shape());
                let rows = x.numel() / d.max(1);
                let mut data = Vec::with_capacity(rows * (d + n));
                for r in 0..rows {
                    data.extend_from_slice(&x.data()[r * d..(r + 1) * d]);
                    data.extend(std::iter::repeat_n(T::ZERO, *n));
                }
                let mut shape = x.shape().to_vec();
                if let Some(l) = shape.last_mut() {
                    *l += n;
                }
                Ok((Tensor::from_parts(shape, data), none))
            }
            Op::EmbeddingLookup(idx) => {
                arity("embedding_lookup", inputs, 1, 1)?;
                let t = inputs[0];
                let (v, d) = match *t.shape() {
                    [v, d] => (v, d),
                    _ => {
                        return Err(Error::shape(
                            "embedding_lookup",
                            format!("table {:?}", t.shape()),
                        ))
                    }
                };
                let mut data = Vec::with_capacity(idx.len() * d);
                for &i in idx {
                    if i >= v {
                        return Err(Error::shape(
                            "embedding_lookup",
                            format!("index {i} >= {v}"),
                        ));
                    }
                    data.extend_from_slice(t.row(i));
                }
                Ok((Tensor::from_parts(vec![idx.len(), d], data), none))
            }
            Op::Pick(idx) => {
                arity("pick", inputs, 1, 1)?;
                let x = inputs[0];
                let (rows, c, shape) = match *x.shape() {
                    [c] => (1, c, vec![]),
                    [b, c] => (b, c, vec![b]),
                    _ => return Err(Error::shape("pick", format!("{:?}", x.shape()))),
                };
                if idx.len() != rows || idx.iter().any(|&i| i >= c) {
                    return Err(Error::shape(
                        "pick",
                        format!("indices {idx:?} for {:?}", x.shape()),
                    ));
                }
                let data = idx
                    .iter()
                    .enumerate()
                    .map(|(r, &i)| x.data()[r * c + i])
                    .collect();
                Ok((Tensor::from_parts(shape, data), none))
            }
            Op::Attention { heads, seq_len } => attention_forward(inputs, *heads, *seq_len),
            Op::AvgPool1d {
                kernel,
                stride,
                padding,
            } => {
                arity("avg_pool1d", inputs, 1, 1)?;
                let x = inputs[0];
                let (b, c, l) = conv_dims("avg_pool1d", x.shape())?;
                let g = ConvGeom::new(1, l, *kernel, *stride, *padding, *padding)
                    .ok_or_else(|| Error::shape("avg_pool1d", "signal shorter than window"))?;
                let inv = T::from_f64(1.0 / *kernel as f64);
                let mut data = vec![T::ZERO; b * c * g.len_out];
                for row in 0..b * c {
                    let xs = &x.data()[row * l..(row + 1) * l];
                    let cols = kernels::im2col(xs, &g);
                    for k in 0..*kernel {
                        for o in 0..g.len_out {
                            data[row * g.len_out + o] += cols[k * g.len_out + o];
                        }
                    }
                    for v in &mut data[row * g.len_out..(row + 1) * g.len_out] {
                        *v *= inv;
                    }
                }
                Ok((
                    Tensor::from_parts(conv_out_shape(x.shape(), c, g.len_out), data),
                    none,
                ))
            }
            Op::GradReverse(_) => {
                arity("grad_reverse", inputs, 1, 1)?;
                Ok((inputs[0].clone(), none))
            }
            Op::Ctc { labels, blank } => {
                arity("ctc_loss", inputs, 1, 1)?;
                let (loss, grad) = ctc_forward_backward(inputs[0], labels, *blank)?;
                Ok((Tensor::scalar(loss), vec![grad]))
            }
            Op::LogMel(front) => {
                arity("log_mel", inputs, 1, 1)?;
                front.forward_saved(inputs[0])
            }
        }
    }

    /// Vector-Jacobian products for each input. `needs[i]` is false for inputs
    /// that do not require a gradient; their slot may be left `None`.
    pub fn backward(
        &self,
        inputs: &[&Tensor<T>],
        out: &Tensor<T>,
        saved: &[Tensor<T>],
        g: &Tensor<T>,
        needs: &[bool],
    ) -> Grads<T> {
        let gd = g.data();
        match self {
            Op::Add | Op::Sub => {
                let mut res = vec![None, None];
                if needs[0] {
                    res[0] = Some(unbroadcast(inputs[0], gd.to_vec(), out.shape()));
                }
                if needs[1] {
                    let v = if matches!(self, Op::Sub) {
                        gd.iter().map(|&x| -x).collect()
                    } else {
                        gd.to_vec()
                    };
                    res[1] = Some(unbroadcast(inputs[1], v, out.shape()));
                }
                res
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let at = |i: usize| {
                    if a.numel() == 1 {
                        a.item()
                    } else {
                        a.data()[i]
                    }
                };
                let bt = |i: usize| {
                    if b.numel() == 1 {
                        b.item()
                    } else {
                        b.data()[i]
                    }
                };
                let mut res = vec![None, None];
                if needs[0] {
                    let v = gd.iter().enumerate().map(|(i, &x)| x * bt(i)).collect();
                    res[0] = Some(unbroadcast(a, v, out.shape()));
                }
                if needs[1] {
                    let v = gd.iter().enumerate().map(|(i, &x)| x * at(i)).collect();
                    res[1] = Some(unbroadcast(b, v, out.shape()));
                }
                res
            }
            Op::Scale(c) => {
                let c = T::from_f64(*c);
                vec![Some(g.map(|v| v * c))]
            }
            Op::AddScalar(_) => vec![Some(g.clone())],
            Op::Matmul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut res = vec![None, None];
                if needs[0] {
                    let mut da = vec![T::ZERO; m * k];
                    kernels::matmul_nt_acc(gd, b.data(), &mut da, m, n, k);
                    res[0] = Some(Tensor::from_parts(vec![m, k], da));
                }
                if needs[1] {
                    let mut db = vec![T::ZERO; k * n];
                    kernels::matmul_tn_acc(a.data(), gd, &mut db, m, k, n);
                    res[1] = Some(Tensor::from_parts(vec![k, n], db));
                }
                res
            }
            Op::Conv1d {
                stride,
                dilation,
                pad_left,
                pad_right,
            } => conv1d_backward(
                inputs, saved, g, needs, *stride, *dilation, *pad_left, *pad_right,
            ),
            Op::DepthwiseConv1d { seq_len } => depthwise_backward(inputs, g, needs, *seq_len),
            Op::TransposeConv1d { stride, padding } => {
                tconv_backward(inputs, g, needs, *stride, *padding)
            }
            Op::LayerNorm { .. } => layer_norm_backward(inputs, saved, g, needs),
            Op::LogSoftmax => {
                let d = last_dim(out.shape()).max(1);
                let mut dx = gd.to_vec();
                for (row, orow) in dx.chunks_mut(d).zip(out.data().chunks(d)) {
                    let s: T = row.iter().copied().sum();
                    for (v, &y) in row.iter_mut().zip(orow) {
                        *v -= y.exp() * s;
                    }
                }
                vec![Some(Tensor::from_parts(out.shape().to_vec(), dx))]
            }
            Op::Relu => unary_grad(inputs[0], out, g, |x, _| {
                if x > T::ZERO {
                    T::ONE
                } else {
                    T::ZERO
                }
            }),
            Op::LeakyRelu(s) => {
                let s = T::from_f64(*s);
                unary_grad(
                    inputs[0],
                    out,
                    g,
                    move |x, _| if x > T::ZERO { T::ONE } else { s },
                )
            }
            Op::Swish => unary_grad(inputs[0], out, g, |x, _| {
                let s = sigmoid(x);
                s + x * s * (T::ONE - s)
            }),
            Op::Sigmoid => unary_grad(inputs[0], out, g, |_, y| y * (T::ONE - y)),
            Op::Tanh => unary_grad(inputs[0], out, g, |_, y| T::ONE - y * y),
            Op::Sqrt => unary_grad(inputs[0], out, g, |_, y| {
                if y > T::ZERO {
                    T::from_f64(0.5) / y
                } else {
                    T::ZERO
                }
            }),
            Op::Log => unary_grad(inputs[0], out, g, |x, _| T::ONE / x),
            Op::Abs => unary_grad(inputs[0], out, g, |x, _| {
                if x > T::ZERO {
                    T::ONE
                } else if x < T::ZERO {
                    -T::ONE
                } else {
                    T::ZERO
                }
            }),
            Op::Square => unary_grad(inputs[0], out, g, |x, _| x + x),
            Op::Sum => {
                let x = inputs[0];
                vec![Some(Tensor::full(x.shape().to_vec(), g.item()))]
            }
            Op::Mean => {
                let x = inputs[0];
                let v = g.item() / T::from_f64(x.numel() as f64);
                vec![Some(Tensor::full(x.shape().to_vec(), v))]
            }
            Op::MeanAxis(axis) => {
                let x = inputs[0];
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let inv = T::ONE / T::from_f64(n as f64);
                let mut dx = vec![T::ZERO; x.numel()];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            dx[(o * n + j) * inner + i] = gd[o * inner + i] * inv;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))]
            }
            Op::VarianceAxis(axis) => {
                let x = inputs[0];
                let mean = saved[0].data();
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let scale = T::from_f64(2.0 / n as f64);
                let mut dx = vec![T::ZERO; x.numel()];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            let idx = (o * n + j) * inner + i;
                            dx[idx] =
                                gd[o * inner + i] * scale * (x.data()[idx] - mean[o * inner + i]);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))]
            }
            Op::Concat(axis) => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for (t, &need) in inputs.iter().zip(needs) {
                    let n = t.shape()[*axis];
                    if need {
                        let mut d = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        res.push(Some(Tensor::from_parts(t.shape().to_vec(), d)));
                    } else {
                        res.push(None);
                    }
                    offset += n;
                }
                res
            }
            Op::Slice { axis, start, end } => {
                let x = inputs[0];
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let w = end - start;
                let mut dx = vec![T::ZERO; x.numel()];
                for o in 0..outer {
                    dx[(o * n + start) * inner..(o * n + end) * inner]
                        .copy_from_slice(&gd[o * w * inner..(o + 1) * w * inner]);
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))]
            }
            Op::Reshape(_) => vec![Some(Tensor::from_parts(
                inputs[0].shape().to_vec(),
                gd.to_vec(),
            ))],
            Op::SwapLast => {
                let s = out.shape();
                let r = s.len();
                let (rows, cols) = (s[r - 2], s[r - 1]);
                let batch = out.numel() / (rows * cols).max(1);
                let mut dx = Vec::with_capacity(out.numel());
                for b in 0..batch {
                    dx.extend(kernels::transpose(
                        &gd[b * rows * cols..(b + 1) * rows * cols],
                        rows,
                        cols,
                    ));
                }
                vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dx))]
            }
            Op::Expand(_) => {
                let x = inputs[0];
                let n = x.numel();
                let mut dx = vec![T::ZERO; n];
                for chunk in gd.chunks(n.max(1)) {
                    for (d, &v) in dx.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))]
            }
            Op::PadRight(n) => {
                let x = inputs[0];
                let d = last_dim(x.shape());
                let mut dx = Vec::with_capacity(x.numel());
                for row in gd.chunks(d + n) {
                    dx.extend_from_slice(&row[..d]);
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))]
            }
            Op::EmbeddingLookup(idx) => {
                let t = inputs[0];
                let d = t.shape()[1];
                let mut dt = vec![T::ZERO; t.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        dt[i * d + c] += gd[r * d + c];
                    }
                }
                vec![Some(Tensor::from_parts(t.shape().to_vec(), dt))]
            }
            Op::Pick(idx) => {
                let x = inputs[0];
                let c = last_dim(x.shape());
                let mut dx = vec![T::ZERO; x.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    dx[r * c + i] = gd[r];
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))]
            }
            Op::Attention { heads, seq_len } => {
                attention_backward(inputs, saved, g, *heads, *seq_len)
            }
            Op::AvgPool1d {
                kernel,
                stride,
                padding,
            } => {
                let x = inputs[0];
                let (b, c, l) = conv_dims("avg_pool1d", x.shape()).expect("checked in forward");
                let geom = ConvGeom::new(1, l, *kernel, *stride, *padding, *padding)
                    .expect("checked in forward");
                let inv = T::from_f64(1.0 / *kernel as f64);
                let mut dx = vec![T::ZERO; x.numel()];
                let mut cols = vec![T::ZERO; kernel * geom.len_out];
                for row in 0..b * c {
                    let go = &gd[row * geom.len_out..(row + 1) * geom.len_out];
                    for k in 0..*kernel {
                        for o in 0..geom.len_out {
                            cols[k * geom.len_out + o] = go[o] * inv;
                        }
                    }
                    kernels::col2im_acc(&cols, &geom, &mut dx[row * l..(row + 1) * l]);
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))]
            }
            // With alpha = 0 nothing flows back at all, so a disabled branch
            // leaves the upstream gradients bitwise untouched.
            Op::GradReverse(alpha) if *alpha == 0.0 => vec![None],
            Op::GradReverse(alpha) => {
                let c = -T::from_f64(*alpha);
                vec![Some(g.map(|v| c * v))]
            }
            Op::Ctc { .. } => {
                let s = g.item();
                vec![Some(saved[0].map(|v| v * s))]
            }
            Op::LogMel(front) => vec![Some(front.backward(inputs[0], out, saved, g))],
        }
    }
}

fn unary<T: Scalar>(
    inputs: &[&Tensor<T>],
    op: &'static str,
    f: impl Fn(T) -> T,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    arity(op, inputs, 1, 1)?;
    Ok((inputs[0].map(f), Vec::new()))
}

/// `df(x, y)` is the local derivative given input `x` and output `y`.
fn unary_grad<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    g: &Tensor<T>,
    df: impl Fn(T, T) -> T,
) -> Grads<T> {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .zip(g.data())
        .map(|((&xv, &yv), &gv)| gv * df(xv, yv))
        .collect();
    vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]
}

/// Sum of a sequence after sorting it, so the result does not depend on the
/// order of the elements. Pooling over frames relies on this.
fn sorted_sum<T: Scalar>(buf: &mut [T]) -> T {
    buf.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    buf.iter().fold(T::ZERO, |acc, &v| acc + v)
}

fn axis_mean<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let nf = T::from_f64(n as f64);
    let mut buf = vec![T::ZERO; n];
    let mut mean = vec![T::ZERO; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = x[(o * n + j) * inner + i];
            }
            mean[o * inner + i] = sorted_sum(&mut buf) / nf;
        }
    }
    mean
}

fn conv1d_forward<T: Scalar>(
    inputs: &[&Tensor<T>],
    stride: usize,
    dilation: usize,
    pad_left: usize,
    pad_right: usize,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    arity("conv1d", inputs, 2, 3)?;
    let (x, w) = (inputs[0], inputs[1]);
    let (b, c_in, l) = conv_dims("conv1d", x.shape())?;
    let (c_out, k) = match *w.shape() {
        [co, ci, k] if ci == c_in => (co, k),
        _ => {
            return Err(Error::shape(
                "conv1d",
                format!("weight {:?} for input {:?}", w.shape(), x.shape()),
            ))
        }
    };
    if let Some(bias) = inputs.get(2) {
        if bias.shape() != [c_out] {
            return Err(Error::shape("conv1d", format!("bias {:?}", bias.shape())));
        }
    }
    let g =
        ConvGeom::dilated(c_in, l, k, stride, dilation, pad_left, pad_right).ok_or_else(|| {
            Error::shape(
                "conv1d",
                format!("kernel {k} (dilation {dilation}) too long for length {l}"),
            )
        })?;
    let lo = g.len_out;
    let mut out = vec![T::ZERO; b * c_out * lo];
    let mut saved = Vec::with_capacity(b);
    for bi in 0..b {
        let cols = kernels::im2col(&x.data()[bi * c_in * l..(bi + 1) * c_in * l], &g);
        let o = &mut out[bi * c_out * lo..(bi + 1) * c_out * lo];
        if let Some(bias) = inputs.get(2) {
            for (co, row) in o.chunks_mut(lo).enumerate() {
                row.fill(bias.data()[co]);
            }
        }
        kernels::matmul_acc(w.data(), &cols, o, c_out, c_in * k, lo);
        saved.push(Tensor::from_parts(vec![c_in * k, lo], cols));
    }
    Ok((
        Tensor::from_parts(conv_out_shape(x.shape(), c_out, lo), out),
        saved,
    ))
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward<T: Scalar>(
    inputs: &[&Tensor<T>],
    saved: &[Tensor<T>],
    g: &Tensor<T>,
    needs: &[bool],
    stride: usize,
    dilation: usize,
    pad_left: usize,
    pad_right: usize,
) -> Grads<T> {
    let (x, w) = (inputs[0], inputs[1]);
    let (b, c_in, l) = conv_dims("conv1d", x.shape()).expect("checked in forward");
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let geom = ConvGeom::dilated(c_in, l, k, stride, dilation, pad_left, pad_right)
        .expect("checked in forward");
    let lo = geom.len_out;
    let ck = c_in * k;
    let mut dx = needs[0].then(|| vec![T::ZERO; x.numel()]);
    let mut dw = needs[1].then(|| vec![T::ZERO; w.numel()]);
    let mut db = (inputs.len() > 2 && needs[2]).then(|| vec![T::ZERO; c_out]);
    for bi in 0..b {
        let go = &g.data()[bi * c_out * lo..(bi + 1) * c_out * lo];
        if let Some(dw) = dw.as_mut() {
            kernels::matmul_nt_acc(go, saved[bi].data(), dw, c_out, lo, ck);
        }
        if let Some(dx) = dx.as_mut() {
            let mut dcols = vec![T::ZERO; ck * lo];
            kernels::matmul_tn_acc(w.data(), go, &mut dcols, c_out, ck, lo);
            kernels::col2im_acc(&dcols, &geom, &mut dx[bi * c_in * l..(bi + 1) * c_in * l]);
        }
        if let Some(db) = db.as_mut() {
            for (co, row) in go.chunks(lo).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
    }
    let mut res = vec![
        dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
    ];
    if inputs.len() > 2 {
        res.push(db.map(|d| Tensor::from_parts(vec![c_out], d)));
    }
    res
}

fn tconv_dims<T: Scalar>(
    inputs: &[&Tensor<T>],
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    arity("transpose_conv1d", inputs, 2, 3)?;
    let (x, w) = (inputs[0], inputs[1]);
    let (b, c_in, l) = conv_dims("transpose_conv1d", x.shape())?;
    let (c_out, k) = match *w.shape() {
        [ci, co, k] if ci == c_in => (co, k),
        _ => {
            return Err(Error::shape(
                "transpose_conv1d",
                format!("weight {:?} for input {:?}", w.shape(), x.shape()),
            ))
        }
    };
    if stride == 0 || l == 0 {
        return Err(Error::shape(
            "transpose_conv1d",
            "zero stride or empty input",
        ));
    }
    let full = (l - 1) * stride + k;
    if full <= 2 * padding {
        return Err(Error::shape(
            "transpose_conv1d",
            "padding removes the whole output",
        ));
    }
    if let Some(bias) = inputs.get(2) {
        if bias.shape() != [c_out] {
            return Err(Error::shape(
                "transpose_conv1d",
                format!("bias {:?}", bias.shape()),
            ));
        }
    }
    Ok((b, c_in, l, c_out, k, full - 2 * padding))
}

fn tconv_forward<T: Scalar>(
    inputs: &[&Tensor<T>],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (b, c_in, l, c_out, k, lo) = tconv_dims(inputs, stride, padding)?;
    let (x, w) = (inputs[0], inputs[1]);
    let mut out = vec![T::ZERO; b * c_out * lo];
    for bi in 0..b {
        let xs = &x.data()[bi * c_in * l..(bi + 1) * c_in * l];
        // cols[c_out·K, L] = Wᵀ[c_out·K, c_in] · x[c_in, L]
        let mut cols = vec![T::ZERO; c_out * k * l];
        kernels::matmul_tn_acc(w.data(), xs, &mut cols, c_in, c_out * k, l);
        let o = &mut out[bi * c_out * lo..(bi + 1) * c_out * lo];
        for co in 0..c_out {
            let orow = &mut o[co * lo..(co + 1) * lo];
            if let Some(bias) = inputs.get(2) {
                orow.fill(bias.data()[co]);
            }
            for kk in 0..k {
                let crow = &cols[(co * k + kk) * l..(co * k + kk + 1) * l];
                for (li, &v) in crow.iter().enumerate() {
                    let pos = (li * stride + kk) as isize - padding as isize;
                    if pos >= 0 && (pos as usize) < lo {
                        orow[pos as usize] += v;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(
        conv_out_shape(x.shape(), c_out, lo),
        out,
    ))
}

fn tconv_backward<T: Scalar>(
    inputs: &[&Tensor<T>],
    g: &Tensor<T>,
    needs: &[bool],
    stride: usize,
    padding: usize,
) -> Grads<T> {
    let (b, c_in, l, c_out, k, lo) =
        tconv_dims(inputs, stride, padding).expect("checked in forward");
    let (x, w) = (inputs[0], inputs[1]);
    let mut dx = needs[0].then(|| vec![T::ZERO; x.numel()]);
    let mut dw = needs[1].then(|| vec![T::ZERO; w.numel()]);
    let mut db = (inputs.len() > 2 && needs[2]).then(|| vec![T::ZERO; c_out]);
    for bi in 0..b {
        let go = &g.data()[bi * c_out * lo..(bi + 1) * c_out * lo];
        let mut dcols = vec![T::ZERO; c_out * k * l];
        for co in 0..c_out {
            for kk in 0..k {
                for li in 0..l {
                    let pos = (li * stride + kk) as isize - padding as isize;
                    if pos >= 0 && (pos as usize) < lo {
                        dcols[(co * k + kk) * l + li] = go[co * lo + pos as usize];
                    }
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            kernels::matmul_acc(
                w.data(),
                &dcols,
                &mut dx[bi * c_in * l..(bi + 1) * c_in * l],
                c_in,
                c_out * k,
                l,
            );
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[bi * c_in * l..(bi + 1) * c_in * l];
            kernels::matmul_nt_acc(xs, &dcols, dw, c_in, l, c_out * k);
        }
        if let Some(db) = db.as_mut() {
            for (co, row) in go.chunks(lo).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
    }
    let mut res = vec![
        dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
    ];
    if inputs.len() > 2 {
        res.push(db.map(|d| Tensor::from_parts(vec![c_out], d)));
    }
    res
}

fn depthwise_dims<T: Scalar>(
    inputs: &[&Tensor<T>],
    seq_len: Option<usize>,
) -> Result<(usize, usize, usize, usize)> {
    let (x, w) = (inputs[0], inputs[1]);
    let (t, c) = match *x.shape() {
        [t, c] => (t, c),
        _ => {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!("input {:?}", x.shape()),
            ))
        }
    };
    let k = match *w.shape() {
        [wc, k] if wc == c && k % 2 == 1 => k,
        _ => {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!(
                    "weight {:?} for {c} channels (odd kernel required)",
                    w.shape()
                ),
            ))
        }
    };
    if let Some(bias) = inputs.get(2) {
        if bias.shape() != [c] {
            return Err(Error::shape(
                "depthwise_conv1d",
                format!("bias {:?}", bias.shape()),
            ));
        }
    }
    let s = seq_len.unwrap_or(t);
    if s == 0 || t % s != 0 {
        return Err(Error::shape(
            "depthwise_conv1d",
            format!("{t} rows not a multiple of seq_len {s}"),
        ));
    }
    Ok((t, c, k, s))
}

fn depthwise_forward<T: Scalar>(
    inputs: &[&Tensor<T>],
    seq_len: Option<usize>,
) -> Result<Tensor<T>> {
    let (t, c, k, s) = depthwise_dims(inputs, seq_len)?;
    let (x, w) = (inputs[0].data(), inputs[1].data());
    let pad = (k - 1) / 2;
    let mut out = vec![T::ZERO; t * c];
    if let Some(bias) = inputs.get(2) {
        for row in out.chunks_mut(c) {
            row.copy_from_slice(bias.data());
        }
    }
    for seg in 0..t / s {
        let base = seg * s;
        for ti in 0..s {
            let orow = &mut out[(base + ti) * c..(base + ti + 1) * c];
            for kk in 0..k {
                let src = ti as isize + kk as isize - pad as isize;
                if src < 0 || src as usize >= s {
                    continue;
                }
                let xrow = &x[(base + src as usize) * c..(base + src as usize + 1) * c];
                for ch in 0..c {
                    orow[ch] += w[ch * k + kk] * xrow[ch];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![t, c], out))
}

fn depthwise_backward<T: Scalar>(
    inputs: &[&Tensor<T>],
    g: &Tensor<T>,
    needs: &[bool],
    seq_len: Option<usize>,
) -> Grads<T> {
    let (t, c, k, s) = depthwise_dims(inputs, seq_len).expect("checked in forward");
    let (x, w) = (inputs[0].data(), inputs[1].data());
    let gd = g.data();
    let pad = (k - 1) / 2;
    let mut dx = vec![T::ZERO; t * c];
    let mut dw = vec![T::ZERO; c * k];
    for seg in 0..t / s {
        let base = seg * s;
        for ti in 0..s {
            let grow = &gd[(base + ti) * c..(base + ti + 1) * c];
            for kk in 0..k {
                let src = ti as isize + kk as isize - pad as isize;
                if src < 0 || src as usize >= s {
                    continue;
                }
                let r = base + src as usize;
                for ch in 0..c {
                    dx[r * c + ch] += w[ch * k + kk] * grow[ch];
                    dw[ch * k + kk] += x[r * c + ch] * grow[ch];
                }
            }
        }
    }
    let mut res = vec![
        needs[0].then(|| Tensor::from_parts(vec![t, c], dx)),
        needs[1].then(|| Tensor::from_parts(vec![c, k], dw)),
    ];
    if inputs.len() > 2 {
        res.push(needs[2].then(|| {
            let mut db = vec![T::ZERO; c];
            for row in gd.chunks(c) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            Tensor::from_parts(vec![c], db)
        }));
    }
    res
}

fn layer_norm_forward<T: Scalar>(
    inputs: &[&Tensor<T>],
    eps: f64,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    if inputs.len() != 1 && inputs.len() != 3 {
        return Err(Error::shape("layer_norm", "expected x or (x, gamma, beta)"));
    }
    let x = inputs[0];
    let d = last_dim(x.shape());
    if x.rank() == 0 || d == 0 {
        return Err(Error::shape("layer_norm", format!("input {:?}", x.shape())));
    }
    if inputs.len() == 3 && (inputs[1].shape() != [d] || inputs[2].shape() != [d]) {
        return Err(Error::shape(
            "layer_norm",
            "gamma/beta must match the last axis",
        ));
    }
    let rows = x.numel() / d;
    let eps = T::from_f64(eps);
    let df = T::from_f64(d as f64);
    let mut xhat = vec![T::ZERO; x.numel()];
    let mut rstd = vec![T::ZERO; rows];
    for r in 0..rows {
        let xs = &x.data()[r * d..(r + 1) * d];
        let mean = xs.iter().copied().sum::<T>() / df;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
        let rs = T::ONE / (var + eps).sqrt();
        rstd[r] = rs;
        for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(xs) {
            *o = (v - mean) * rs;
        }
    }
    let out = if inputs.len() == 3 {
        let (gamma, beta) = (inputs[1].data(), inputs[2].data());
        xhat.chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(gamma)
                    .zip(beta)
                    .map(|((&v, &ga), &be)| v * ga + be)
            })
            .collect()
    } else {
        xhat.clone()
    };
    Ok((
        Tensor::from_parts(x.shape().to_vec(), out),
        vec![
            Tensor::from_parts(x.shape().to_vec(), xhat),
            Tensor::from_parts(vec![rows], rstd),
        ],
    ))
}

fn layer_norm_backward<T: Scalar>(
    inputs: &[&Tensor<T>],
    saved: &[Tensor<T>],
    g: &Tensor<T>,
    needs: &[bool],
) -> Grads<T> {
    let x = inputs[0];
    let d = last_dim(x.shape());
    let rows = x.numel() / d;
    let xhat = saved[0].data();
    let rstd = saved[1].data();
    let gd = g.data();
    let affine = inputs.len() == 3;
    let df = T::from_f64(d as f64);
    let mut dx = vec![T::ZERO; x.numel()];
    let mut dgamma = vec![T::ZERO; d];
    let mut dbeta = vec![T::ZERO; d];
    let mut dxhat = vec![T::ZERO; d];
    for r in 0..rows {
        let gr = &gd[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        for j in 0..d {
            dxhat[j] = if affine {
                gr[j] * inputs[1].data()[j]
            } else {
                gr[j]
            };
            if affine {
                dgamma[j] += gr[j] * xr[j];
                dbeta[j] += gr[j];
            }
        }
        let m1 = dxhat.iter().copied().sum::<T>() / df;
        let m2 = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / df;
        for j in 0..d {
            dx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
        }
    }
    let mut res = vec![needs[0].then(|| Tensor::from_parts(x.shape().to_vec(), dx))];
    if affine {
        res.push(needs[1].then(|| Tensor::from_parts(vec![d], dgamma)));
        res.push(needs[2].then(|| Tensor::from_parts(vec![d], dbeta)));
    }
    res
}

fn attention_dims<T: Scalar>(
    inputs: &[&Tensor<T>],
    heads: usize,
    seq_len: Option<usize>,
) -> Result<(usize, usize, usize, usize)> {
    arity("scaled_dot_attention", inputs, 3, 3)?;
    let s0 = inputs[0].shape();
    if s0.len() != 2 || inputs[1].shape() != s0 || inputs[2].shape() != s0 {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!(
                "q/k/v must share a [T, D] shape, got {:?} {:?} {:?}",
                s0,
                inputs[1].shape(),
                inputs[2].shape()
            ),
        ));
    }
    let (t, d) = (s0[0], s0[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("{d} not divisible by {heads} heads"),
        ));
    }
    let s = seq_len.unwrap_or(t);
    if s == 0 || t % s != 0 {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("{t} rows not a multiple of seq_len {s}"),
        ));
    }
    Ok((t, d, d / heads, s))
}

/// Copies the `[s, dh]` block of head `h` in segment `seg` out of a `[T, D]` matrix.
fn head_block<T: Scalar>(m: &[T], d: usize, dh: usize, s: usize, seg: usize, h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(s * dh);
    for r in 0..s {
        let row = (seg * s + r) * d + h * dh;
        out.extend_from_slice(&m[row..row + dh]);
    }
    out
}

fn put_head_block<T: Scalar>(
    dst: &mut [T],
    block: &[T],
    d: usize,
    dh: usize,
    s: usize,
    seg: usize,
    h: usize,
) {
    for r in 0..s {
        let row = (seg * s + r) * d + h * dh;
        dst[row..row + dh].copy_from_slice(&block[r * dh..(r + 1) * dh]);
    }
}

fn attention_forward<T: Scalar>(
    inputs: &[&Tensor<T>],
    heads: usize,
    seq_len: Option<usize>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let (t, d, dh, s) = attention_dims(inputs, heads, seq_len)?;
    let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
    let scale = T::ONE / T::from_f64(dh as f64).sqrt();
    let mut out = vec![T::ZERO; t * d];
    let mut probs = Vec::with_capacity((t / s) * heads * s * s);
    for seg in 0..t / s {
        for h in 0..heads {
            let qh = head_block(q, d, dh, s, seg, h);
            let kh = head_block(k, d, dh, s, seg, h);
            let vh = head_block(v, d, dh, s, seg, h);
            let mut scores = vec![T::ZERO; s * s];
            kernels::matmul_nt_acc(&qh, &kh, &mut scores, s, dh, s);
            for row in scores.chunks_mut(s) {
                let m = row.iter().fold(T::NEG_INFINITY, |a, &b| a.max(b * scale));
                let mut z = T::ZERO;
                for val in row.iter_mut() {
                    *val = (*val * scale - m).exp();
                    z += *val;
                }
                for val in row.iter_mut() {
                    *val = *val / z;
                }
            }
            let oh = kernels::matmul(&scores, &vh, s, s, dh);
            put_head_block(&mut out, &oh, d, dh, s, seg, h);
            probs.extend(scores);
        }
    }
    let n_blocks = (t / s) * heads;
    Ok((
        Tensor::from_parts(vec![t, d], out),
        vec![Tensor::from_parts(vec![n_blocks, s, s], probs)],
    ))
}

fn attention_backward<T: Scalar>(
    inputs: &[&Tensor<T>],
    saved: &[Tensor<T>],
    g: &Tensor<T>,
    heads: usize,
    seq_len: Option<usize>,
) -> Grads<T> {
    let (t, d, dh, s) = attention_dims(inputs, heads, seq_len).expect("checked in forward");
    let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
    let scale = T::ONE / T::from_f64(dh as f64).sqrt();
    let mut dq = vec![T::ZERO; t * d];
    let mut dk = vec![T::ZERO; t * d];
    let mut dv = vec![T::ZERO; t * d];
    for seg in 0..t / s {
        for h in 0..heads {
            let blk = seg * heads + h;
            let p = &saved[0].data()[blk * s * s..(blk + 1) * s * s];
            let qh = head_block(q, d, dh, s, seg, h);
            let kh = head_block(k, d, dh, s, seg, h);
            let vh = head_block(v, d, dh, s, seg, h);
            let go = head_block(g.data(), d, dh, s, seg, h);
            let mut dvh = vec![T::ZERO; s * dh];
            kernels::matmul_tn_acc(p, &go, &mut dvh, s, s, dh);
            let mut dp = vec![T::ZERO; s * s];
            kernels::matmul_nt_acc(&go, &vh, &mut dp, s, dh, s);
            let mut ds = vec![T::ZERO; s * s];
            for r in 0..s {
                let pr = &p[r * s..(r + 1) * s];
                let dpr = &dp[r * s..(r + 1) * s];
                let dot: T = pr.iter().zip(dpr).map(|(&a, &b)| a * b).sum();
                for c in 0..s {
                    ds[r * s + c] = pr[c] * (dpr[c] - dot) * scale;
                }
            }
            let dqh = kernels::matmul(&ds, &kh, s, s, dh);
            let mut dkh = vec![T::ZERO; s * dh];
            kernels::matmul_tn_acc(&ds, &qh, &mut dkh, s, s, dh);
            put_head_block(&mut dq, &dqh, d, dh, s, seg, h);
            put_head_block(&mut dk, &dkh, d, dh, s, seg, h);
            put_head_block(&mut dv, &dvh, d, dh, s, seg, h);
        }
    }
    vec![
        Some(Tensor::from_parts(vec![t, d], dq)),
        Some(Tensor::from_parts(vec![t, d], dk)),
        Some(Tensor::from_parts(vec![t, d], dv)),
    ]
}

/// Log-space CTC forward–backward. Returns `-log p(labels | lp)` and its
/// gradient with respect to `lp`. Infeasible alignments yield `+inf` and a
/// zero gradient.
pub(crate) fn ctc_forward_backward<T: Scalar>(
    lp: &Tensor<T>,
    labels: &[usize],
    blank: usize,
) -> Result<(T, Tensor<T>)> {
    let (t_len, c) = match *lp.shape() {
        [t, c] => (t, c),
        _ => {
            return Err(Error::shape(
                "ctc_loss",
                format!("log-probs {:?}", lp.shape()),
            ))
        }
    };
    if blank >= c || labels.iter().any(|&l| l >= c || l == blank) {
        return Err(Error::shape(
            "ctc_loss",
            format!("labels {labels:?} invalid for {c} classes with blank {blank}"),
        ));
    }
    if t_len == 0 {
        return Err(Error::shape("ctc_loss", "no frames"));
    }
    let x = lp.data();
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(labels.iter().flat_map(|&l| [l, blank]))
        .collect();
    let s_len = ext.len();
    let ninf = T::NEG_INFINITY;
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = x[ext[0]];
    if s_len > 1 {
        alpha[1] = x[ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf {
                ninf
            } else {
                a + x[t * c + ext[s]]
            };
        }
    }
    let last = (t_len - 1) * s_len;
    let log_p = if s_len > 1 {
        log_add(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_p == ninf {
        return Ok((T::INFINITY, Tensor::zeros(lp.shape().to_vec())));
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = x[(t_len - 1) * c + ext[s_len - 1]];
    if s_len > 1 {
        beta[last + s_len - 2] = x[(t_len - 1) * c + ext[s_len - 2]];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                b = log_add(b, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = if b == ninf {
                ninf
            } else {
                b + x[t * c + ext[s]]
            };
        }
    }

    let mut grad = vec![T::ZERO; t_len * c];
    let mut acc = vec![ninf; c];
    for t in 0..t_len {
        acc.fill(ninf);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab != ninf {
                acc[ext[s]] = log_add(acc[ext[s]], ab);
            }
        }
        for k in 0..c {
            if acc[k] != ninf {
                grad[t * c + k] = -(acc[k] - x[t * c + k] - log_p).exp();
            }
        }
    }
    Ok((-log_p, Tensor::from_parts(lp.shape().to_vec(), grad)))
}
