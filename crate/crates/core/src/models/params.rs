//! Named parameter storage and per-tape binding.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Parameters of one model, addressed by [`ParamId`] or by dotted name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same names and ids, different precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites the value of an existing parameter, checking its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
        if self.tensors[id.0].shape() != value.shape() {
            return Err(Error::Format(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                value.shape(),
                self.tensors[id.0].shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Puts every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(
            self.iter()
                .map(|(id, _, t)| tape.param(id, t.clone()))
                .collect(),
        )
    }

    /// Puts every parameter on the tape as a constant: nothing upstream of
    /// these values can receive a gradient.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect(),
        )
    }
}

/// Tape handles of a store's parameters, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Seeded initializer shared by all model constructors.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform Glorot initialization for the given fan-in and fan-out.
    pub fn glorot<T: Scalar>(
        &mut self,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> Tensor<T> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(self.rng.random_range(-limit..limit)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("consistent shape")
    }
}

/// `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.w"),
            init.glorot(&[d_in, d_out], d_in, d_out),
        )?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros([d_out]))?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.w), self.b.map(|b| p.var(b)))
    }
}

/// Layer normalization over the last axis with learned gain and offset.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], T::ONE))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, Some((p.var(self.gamma), p.var(self.beta))), LN_EPS)
    }
}

/// 1-D convolution with weight `[C_out, C_in, K]` and bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub dilation: usize,
    pub pad: (usize, usize),
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: (usize, usize),
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.w"),
            init.glorot(&[c_out, c_in, kernel], c_in * kernel, c_out * kernel),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros([c_out]))?;
        Ok(Conv {
            w,
            b,
            stride,
            dilation: 1,
            pad,
        })
    }

    /// Length-preserving convolution with taps `dilation` apart (odd kernel).
    pub fn dilated<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        channels: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        let half = (kernel - 1) * dilation / 2;
        let mut c = Conv::new(
            store,
            init,
            name,
            channels,
            channels,
            kernel,
            1,
            (half, half),
        )?;
        c.dilation = dilation;
        Ok(c)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv1d_dilated(
            x,
            p.var(self.w),
            Some(p.var(self.b)),
            self.stride,
            self.dilation,
            self.pad,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_addressable() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a.w", Tensor::zeros([2])).unwrap();
        assert!(s.add("a.w", Tensor::zeros([2])).is_err());
        assert_eq!(s.id("a.w"), Some(a));
        assert_eq!(s.name(a), "a.w");
        assert!(s.set("a.w", Tensor::zeros([3])).is_err());
        assert!(s.set("b", Tensor::zeros([2])).is_err());
    }

    #[test]
    fn frozen_binding_gives_no_gradients() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::full([2], 1.5)).unwrap();
        let mut tape = Tape::new();
        let p = s.bind_frozen(&mut tape);
        let sq = tape.square(p.var(id)).unwrap();
        let loss = tape.sum(sq).unwrap();
        assert!(tape.backward(loss).unwrap().params().is_empty());
    }

    #[test]
    fn glorot_is_seeded() {
        let a: Tensor<f32> = Init::new(3).glorot(&[4, 4], 4, 4);
        let b: Tensor<f32> = Init::new(3).glorot(&[4, 4], 4, 4);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= (6.0f32 / 8.0).sqrt()));
    }
}
