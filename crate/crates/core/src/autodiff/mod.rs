//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Nodes are recorded in creation order, which is also a valid topological
//! order, so the backward sweep simply walks the tape from the loss towards
//! the leaves. Gradient reversal is an ordinary primitive: identity on the
//! way forward, `-α·g` on the way back.

mod catalog;
mod check;
pub mod kernels;
mod ops;

use std::collections::BTreeMap;
use std::sync::Arc;

pub use catalog::{Attr, Attrs, CATALOG};
pub use check::{finite_difference_check, max_relative_error};
pub use ops::Op;

use crate::error::{Error, Result};
use crate::synthdata::MelFrontEnd;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable parameter inside a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Option<Op<T>>,
    inputs: Vec<usize>,
    saved: Vec<Tensor<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records primitives as they are applied. Single-threaded by construction.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every leaf that requires one.
pub struct Gradients<T: Scalar> {
    leaves: BTreeMap<usize, Tensor<T>>,
    params: GradientMap<T>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf. `None` if the leaf does not require gradients.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn params(&self) -> &GradientMap<T> {
        &self.params
    }

    pub fn into_params(self) -> GradientMap<T> {
        self.params
    }
}

/// Parameter gradients keyed by [`ParamId`], iterated in id order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap<T: Scalar> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn new() -> Self {
        GradientMap {
            grads: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, g: Tensor<T>) {
        self.grads.insert(id, g);
    }

    /// Adds `g` to the entry for `id`, creating it when absent.
    pub fn accumulate(&mut self, id: ParamId, g: Tensor<T>) -> Result<()> {
        match self.grads.get_mut(&id) {
            Some(existing) => existing.add_assign(&g),
            None => {
                self.grads.insert(id, g);
                Ok(())
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor<T>)> {
        self.grads.iter_mut().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Global L2 norm over the entries selected by `keep`.
    pub fn norm_where(&self, keep: impl Fn(ParamId) -> bool) -> f64 {
        self.grads
            .iter()
            .filter(|(id, _)| keep(**id))
            .map(|(_, g)| {
                g.data()
                    .iter()
                    .map(|v| v.to_f64() * v.to_f64())
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.norm_where(|_| true)
    }

    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        self.grads.retain(|id, _| keep(*id));
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            saved: Vec::new(),
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf input; gradients are reported for it when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A trainable parameter; its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Applies a primitive and records it.
    pub fn apply(&mut self, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::invalid(format!("var {} is not on this tape", bad.0)));
        }
        if let Op::GradReverse(alpha) = op {
            if !(alpha >= 0.0 && alpha.is_finite()) {
                return Err(Error::invalid(format!(
                    "grad_reverse scale must be a finite nonnegative number, got {alpha}"
                )));
            }
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = op.forward(&values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: Some(op),
            inputs: inputs.iter().map(|v| v.0).collect(),
            // Nothing will ever read the saved activations of a constant subgraph.
            saved: if requires_grad { saved } else { Vec::new() },
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Applies a primitive from the catalog by name.
    pub fn apply_primitive(&mut self, name: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let op = catalog::parse(name, attrs)?;
        self.apply(op, inputs)
    }

    /// Reverse sweep from a scalar loss. Fan-out gradients are summed in
    /// reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), T::ONE));
        let mut leaves = BTreeMap::new();
        let mut params = GradientMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = &node.op else {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                if let Some(id) = node.param {
                    params.accumulate(id, g.clone())?;
                }
                leaves.insert(i, g);
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let input_grads = op.backward(&inputs, &node.value, &node.saved, &g, &needs);
            for ((&j, need), ig) in node.inputs.iter().zip(needs).zip(input_grads) {
                if !need {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&ig)?,
                    slot => *slot = Some(ig),
                }
            }
        }
        // Leaves created after the loss can not influence it.
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && node.op.is_none() {
                let z = Tensor::zeros(node.value.shape().to_vec());
                if let Some(id) = node.param {
                    params.accumulate(id, z.clone())?;
                }
                leaves.insert(i, z);
            }
        }
        Ok(Gradients { leaves, params })
    }

    // Typed shorthands for the catalog.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::AddScalar(c), &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Matmul, &[a, b])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.apply(Op::LeakyRelu(slope), &[a])
    }
    pub fn swish(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Swish, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sqrt, &[a])
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Abs, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Square, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::LogSoftmax, &[a])
    }
    pub fn layer_norm(&mut self, x: Var, affine: Option<(Var, Var)>, eps: f64) -> Result<Var> {
        match affine {
            Some((g, b)) => self.apply(Op::LayerNorm { eps }, &[x, g, b]),
            None => self.apply(Op::LayerNorm { eps }, &[x]),
        }
    }
    pub fn mean_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::MeanAxis(axis), &[a])
    }
    pub fn variance_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::VarianceAxis(axis), &[a])
    }
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat(axis), xs)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }
    pub fn swap_last(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::SwapLast, &[a])
    }
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Expand(shape.to_vec()), &[a])
    }
    pub fn pad_right(&mut self, a: Var, n: usize) -> Result<Var> {
        self.apply(Op::PadRight(n), &[a])
    }
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        self.apply(Op::Pick(indices.to_vec()), &[a])
    }
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.apply(Op::EmbeddingLookup(indices.to_vec()), &[table])
    }
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: (usize, usize),
    ) -> Result<Var> {
        self.conv1d_dilated(x, w, bias, stride, 1, pad)
    }
    pub fn conv1d_dilated(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
        pad: (usize, usize),
    ) -> Result<Var> {
        let op = Op::Conv1d {
            stride,
            dilation,
            pad_left: pad.0,
            pad_right: pad.1,
        };
        match bias {
            Some(b) => self.apply(op, &[x, w, b]),
            None => self.apply(op, &[x, w]),
        }
    }
    pub fn transpose_conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let op = Op::TransposeConv1d { stride, padding };
        match bias {
            Some(b) => self.apply(op, &[x, w, b]),
            None => self.apply(op, &[x, w]),
        }
    }
    pub fn depthwise_conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        seq_len: Option<usize>,
    ) -> Result<Var> {
        let op = Op::DepthwiseConv1d { seq_len };
        match bias {
            Some(b) => self.apply(op, &[x, w, b]),
            None => self.apply(op, &[x, w]),
        }
    }
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: Option<usize>,
    ) -> Result<Var> {
        self.apply(Op::Attention { heads, seq_len }, &[q, k, v])
    }
    pub fn avg_pool1d(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.apply(
            Op::AvgPool1d {
                kernel,
                stride,
                padding,
            },
            &[x],
        )
    }
    /// Gradient reversal: forward identity, backward multiplies by `-alpha`.
    pub fn grad_reverse(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.apply(Op::GradReverse(alpha), &[x])
    }
    pub fn ctc(&mut self, log_probs: Var, labels: &[usize], blank: usize) -> Result<Var> {
        self.apply(
            Op::Ctc {
                labels: labels.to_vec(),
                blank,
            },
            &[log_probs],
        )
    }
    pub fn log_mel(&mut self, wave: Var, front: &Arc<MelFrontEnd<T>>) -> Result<Var> {
        self.apply(Op::LogMel(Arc::clone(front)), &[wave])
    }

    /// `x · W + b` for `x: [N, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let shape = self.value(y).shape().to_vec();
                let bb = self.expand(b, &shape)?;
                self.add(y, bb)
            }
            None => Ok(y),
        }
    }
}
