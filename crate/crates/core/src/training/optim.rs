//! Adam with bias correction and global-norm clipping.

use std::collections::BTreeMap;

use crate::autodiff::{GradientMap, ParamId};
use crate::error::{Error, Result};
use crate::models::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip: Some(5.0),
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T: Scalar> {
    m: BTreeMap<ParamId, Tensor<T>>,
    v: BTreeMap<ParamId, Tensor<T>>,
    /// Accepted steps, used for bias correction.
    pub t: usize,
    /// Steps rejected because a gradient was not finite.
    pub rejected: usize,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            rejected: 0,
        }
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.m.get(&id)
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.v.get(&id)
    }
}

/// What happened on one call to [`adam_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64 },
    Rejected,
}

/// Scales the entries selected by `keep` so their joint L2 norm is at most
/// `max_norm`. Returns the norm before scaling.
pub fn clip_global_norm<T: Scalar>(
    grads: &mut GradientMap<T>,
    max_norm: f64,
    keep: impl Fn(ParamId) -> bool,
) -> f64 {
    let norm = grads.norm_where(&keep);
    if norm > max_norm && norm.is_finite() {
        let c = T::from_f64(max_norm / norm);
        for (id, g) in grads.iter_mut() {
            if keep(id) {
                g.scale_in_place(c);
            }
        }
    }
    norm
}

/// One Adam update of every parameter that has a gradient. Gradients are
/// clipped to `hyper.clip` by global norm first. A non-finite gradient
/// rejects the whole step and bumps `state.rejected`.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &mut GradientMap<T>,
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
) -> Result<StepOutcome> {
    if grads.iter().any(|(_, g)| !g.all_finite()) {
        state.rejected += 1;
        return Ok(StepOutcome::Rejected);
    }
    let grad_norm = match hyper.clip {
        Some(c) => clip_global_norm(grads, c, |_| true),
        None => grads.norm(),
    };
    apply_moments(store, grads, state, hyper)?;
    Ok(StepOutcome::Applied { grad_norm })
}

/// The moment update alone, for callers that clip groups themselves.
pub fn apply_moments<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &GradientMap<T>,
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
) -> Result<()> {
    apply_moments_scaled(store, grads, state, hyper, |_| 1.0)
}

/// [`apply_moments`] with a per-parameter learning-rate multiplier.
pub fn apply_moments_scaled<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &GradientMap<T>,
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
    lr_scale: impl Fn(ParamId) -> f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 / (1.0 - b1.powi(t));
    let c2 = 1.0 / (1.0 - b2.powi(t));
    let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let eps = T::from_f64(hyper.eps);
    let (c1, c2) = (T::from_f64(c1), T::from_f64(c2));
    for (id, g) in grads.iter() {
        let lr = T::from_f64(hyper.lr * lr_scale(id));
        let p = store.get_mut(id);
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "parameter {:?} has shape {:?}, gradient {:?}",
                    id,
                    p.shape(),
                    g.shape()
                ),
            ));
        }
        let m = state
            .m
            .entry(id)
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state
            .v
            .entry(id)
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        for (((pv, mv), vv), &gv) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
            .zip(g.data())
        {
            *mv = b1t * *mv + one_b1 * gv;
            *vv = b2t * *vv + one_b2 * gv * gv;
            let m_hat = *mv * c1;
            let v_hat = *vv * c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
