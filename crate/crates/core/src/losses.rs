//! Training objectives: CTC, speaker cross-entropy, the combined adversarial
//! objective, and the synthesis losses (mel, feature matching, least-squares
//! adversarial terms).
//!
//! Per-sample losses are returned unaveraged where that makes sense; batch
//! means are taken by the callers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::synthdata::{FeatureConfig, MelFrontEnd};
use crate::tensor::{Scalar, Tensor};

/// Result of a CTC evaluation.
#[derive(Clone, Copy, Debug)]
pub struct CtcLoss {
    pub loss: Var,
    /// False when the labels need more frames than are available; the loss
    /// is then `+inf` and its gradient zero.
    pub feasible: bool,
}

/// Minimum frames needed to emit `labels`: one per label plus one blank
/// between each pair of equal neighbours.
pub fn ctc_min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// `-ln p(labels | log_probs)` for `log_probs: [T, |V|+1]`, blank last.
pub fn ctc_loss<T: Scalar>(
    tape: &mut Tape<T>,
    log_probs: Var,
    labels: &[usize],
) -> Result<CtcLoss> {
    let shape = tape.value(log_probs).shape().to_vec();
    let [frames, classes] = shape[..] else {
        return Err(Error::shape(
            "ctc_loss",
            format!("expected [T, C], got {shape:?}"),
        ));
    };
    let loss = tape.ctc(log_probs, labels, classes - 1)?;
    Ok(CtcLoss {
        loss,
        feasible: ctc_min_frames(labels) <= frames,
    })
}

/// Mean CTC loss over a packed batch `[B·F, C]`. Infeasible utterances are
/// left out of the sum and counted.
pub fn batch_ctc_loss<T: Scalar>(
    tape: &mut Tape<T>,
    log_probs: Var,
    frames: usize,
    labels: &[&[usize]],
) -> Result<(Var, usize)> {
    let rows = tape.value(log_probs).shape()[0];
    if rows != frames * labels.len() {
        return Err(Error::shape(
            "batch_ctc_loss",
            format!(
                "{rows} rows for {} utterances of {frames} frames",
                labels.len()
            ),
        ));
    }
    let mut total: Option<Var> = None;
    let mut infeasible = 0;
    for (b, lab) in labels.iter().enumerate() {
        let lp = tape.slice(log_probs, 0, b * frames, (b + 1) * frames)?;
        let c = ctc_loss(tape, lp, lab)?;
        if !c.feasible {
            infeasible += 1;
            continue;
        }
        total = Some(match total {
            Some(t) => tape.add(t, c.loss)?,
            None => c.loss,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(T::ZERO)),
    };
    Ok((tape.scale(total, 1.0 / labels.len() as f64)?, infeasible))
}

/// Mean of `-log_softmax(logits)[label]` over rows. `logits: [C]` or `[B, C]`.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = *tape
        .value(logits)
        .shape()
        .last()
        .ok_or_else(|| Error::shape("cross_entropy", "scalar logits"))?;
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let lp = tape.log_softmax(logits)?;
    let picked = tape.pick(lp, labels)?;
    let m = tape.mean(picked)?;
    tape.scale(m, -1.0)
}

/// `L = L_y + λ·L_d`. The adversarial sign lives in the gradient reversal,
/// never here. With `λ = 0` the speaker term is not even recorded.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    l_y: Var,
    l_d: Var,
    lambda: f64,
) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(l_y);
    }
    let s = tape.scale(l_d, lambda)?;
    tape.add(l_y, s)
}

/// Which way round the least-squares adversarial terms are assigned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanOrientation {
    /// Discriminator pushes real to 1 and fake to 0; generator pushes fake to 1.
    #[default]
    Standard,
    /// Roles swapped: the generator gets `(D(x)-1)² + D(x̂)²` and the
    /// discriminator `(D(x̂)-1)²`. Kept for comparison only; the
    /// discriminator then never sees a real-data target.
    Swapped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthLossConfig {
    pub lambda_fm: f64,
    pub lambda_mel: f64,
    pub orientation: GanOrientation,
    pub features: FeatureConfig,
}

impl Default for SynthLossConfig {
    fn default() -> Self {
        SynthLossConfig {
            lambda_fm: 2.0,
            lambda_mel: 45.0,
            orientation: GanOrientation::Standard,
            features: FeatureConfig::default(),
        }
    }
}

impl SynthLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_fm >= 0.0 && self.lambda_mel >= 0.0) {
            return Err(Error::invalid("synthesis loss weights must be nonnegative"));
        }
        self.features.validate()
    }
}

/// Mean absolute difference between log-mel spectrograms of two equal-length
/// waveforms `[L]`.
pub fn mel_l1<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    x_hat: Var,
    front: &Arc<MelFrontEnd<T>>,
) -> Result<Var> {
    let (a, b) = (
        tape.value(x).shape().to_vec(),
        tape.value(x_hat).shape().to_vec(),
    );
    if a != b {
        return Err(Error::shape(
            "mel_l1",
            format!("waveform shapes {a:?} and {b:?} differ"),
        ));
    }
    if a.len() == 2 {
        // Batched waveforms: spectrograms per row, then the mean over rows,
        // which equals the mean over all cells since rows share a length.
        let mut per_row = Vec::with_capacity(a[0]);
        for r in 0..a[0] {
            let xr = tape.slice(x, 0, r, r + 1)?;
            let xr = tape.reshape(xr, &[a[1]])?;
            let yr = tape.slice(x_hat, 0, r, r + 1)?;
            let yr = tape.reshape(yr, &[a[1]])?;
            let m = mel_l1(tape, xr, yr, front)?;
            per_row.push(tape.reshape(m, &[1])?);
        }
        let rows = tape.concat(&per_row, 0)?;
        return tape.mean(rows);
    }
    let fx = tape.log_mel(x, front)?;
    let fy = tape.log_mel(x_hat, front)?;
    let d = tape.sub(fx, fy)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// `Σ_i mean |D^i(x) - D^i(x̂)|` over corresponding feature maps.
pub fn feature_matching<T: Scalar>(tape: &mut Tape<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::shape(
            "feature_matching",
            format!("{} real layers vs {} fake layers", real.len(), fake.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (&r, &f) in real.iter().zip(fake) {
        let d = tape.sub(r, f)?;
        let d = tape.abs(d)?;
        let m = tape.mean(d)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    Ok(total.expect("nonempty"))
}

fn mean_sq_to<T: Scalar>(tape: &mut Tape<T>, x: Var, target: f64) -> Result<Var> {
    let d = tape.add_scalar(x, -target)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

fn sum_vars<T: Scalar>(tape: &mut Tape<T>, vars: Vec<Var>) -> Result<Var> {
    let mut it = vars.into_iter();
    let mut acc = it
        .next()
        .ok_or_else(|| Error::invalid("no discriminator members"))?;
    for v in it {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Adversarial part of the discriminator objective.
pub fn discriminator_loss<T: Scalar>(
    tape: &mut Tape<T>,
    d_real: &[Var],
    d_fake: &[Var],
    orientation: GanOrientation,
) -> Result<Var> {
    if d_real.len() != d_fake.len() {
        return Err(Error::shape("discriminator_loss", "member count mismatch"));
    }
    let mut terms = Vec::new();
    for (&r, &f) in d_real.iter().zip(d_fake) {
        match orientation {
            GanOrientation::Standard => {
                let a = mean_sq_to(tape, r, 1.0)?;
                let b = mean_sq_to(tape, f, 0.0)?;
                terms.push(tape.add(a, b)?);
            }
            GanOrientation::Swapped => terms.push(mean_sq_to(tape, f, 1.0)?),
        }
    }
    sum_vars(tape, terms)
}

/// Generator objective: adversarial part plus `λ_FM·L_FM + λ_mel·L_mel`.
pub fn generator_loss<T: Scalar>(
    tape: &mut Tape<T>,
    d_real: &[Var],
    d_fake: &[Var],
    l_fm: Var,
    l_mel: Var,
    cfg: &SynthLossConfig,
) -> Result<Var> {
    if d_real.len() != d_fake.len() {
        return Err(Error::shape("generator_loss", "member count mismatch"));
    }
    let mut terms = Vec::new();
    for (&r, &f) in d_real.iter().zip(d_fake) {
        match cfg.orientation {
            GanOrientation::Standard => terms.push(mean_sq_to(tape, f, 1.0)?),
            GanOrientation::Swapped => {
                let a = mean_sq_to(tape, r, 1.0)?;
                let b = mean_sq_to(tape, f, 0.0)?;
                terms.push(tape.add(a, b)?);
            }
        }
    }
    let adv = sum_vars(tape, terms)?;
    let fm = tape.scale(l_fm, cfg.lambda_fm)?;
    let mel = tape.scale(l_mel, cfg.lambda_mel)?;
    let s = tape.add(adv, fm)?;
    tape.add(s, mel)
}

/// Both objectives on one tape: `(L_G, L_D)`.
pub fn gan_losses<T: Scalar>(
    tape: &mut Tape<T>,
    d_real: &[Var],
    d_fake: &[Var],
    l_fm: Var,
    l_mel: Var,
    cfg: &SynthLossConfig,
) -> Result<(Var, Var)> {
    let g = generator_loss(tape, d_real, d_fake, l_fm, l_mel, cfg)?;
    let d = discriminator_loss(tape, d_real, d_fake, cfg.orientation)?;
    Ok((g, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::ctc_brute_force;

    fn uniform_lp(t: usize, c: usize) -> Tensor<f64> {
        Tensor::full([t, c], -(c as f64).ln())
    }

    fn ctc_value(lp: Tensor<f64>, labels: &[usize]) -> (f64, bool) {
        let mut tape = Tape::new();
        let x = tape.constant(lp);
        let c = ctc_loss(&mut tape, x, labels).unwrap();
        (tape.value(c.loss).item(), c.feasible)
    }

    #[test]
    fn ctc_examples_match_enumeration() {
        for (t, labels, want) in [
            (1, vec![0], -(0.5f64.ln())),
            (2, vec![0], -(0.75f64.ln())),
            (2, vec![], 4f64.ln()),
        ] {
            let lp = uniform_lp(t, 2);
            let brute = ctc_brute_force(&lp, &labels, 1);
            let (got, feasible) = ctc_value(lp, &labels);
            assert!(feasible);
            assert!((got - want).abs() < 1e-12 && (brute - want).abs() < 1e-12);
        }
    }

    #[test]
    fn infeasible_ctc_is_infinite_with_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(uniform_lp(2, 3), true);
        let c = ctc_loss(&mut tape, x, &[0, 0]).unwrap();
        assert!(!c.feasible);
        assert_eq!(tape.value(c.loss).item(), f64::INFINITY);
        let g = tape.backward(c.loss).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(ctc_min_frames(&[0, 0, 1]), 4);
    }

    #[test]
    fn batch_ctc_skips_and_counts_infeasible() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(uniform_lp(4, 3), true);
        let (loss, bad) = batch_ctc_loss(&mut tape, x, 2, &[&[0], &[1, 1]]).unwrap();
        assert_eq!(bad, 1);
        let single = ctc_value(uniform_lp(2, 3), &[0]).0;
        assert!((tape.value(loss).item() - single / 2.0).abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(x).unwrap().data()[6..].iter().all(|&v| v == 0.0));
    }

    fn ce(logits: &[f64], label: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(logits.to_vec()));
        let l = cross_entropy(&mut tape, x, &[label])?;
        Ok(tape.value(l).item())
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((ce(&[0.0, 0.0], 0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(ce(&[10.0, -10.0], 0).unwrap() < 1e-8);
        let exact = (-20f64).exp().ln_1p() + 20.0;
        assert!((ce(&[10.0, -10.0], 1).unwrap() - exact).abs() < 1e-12);
        assert!(ce(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn combined_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let ly = tape.constant(Tensor::scalar(2.0));
        let ld = tape.constant(Tensor::scalar(1.0));
        let l = combined_loss(&mut tape, ly, ld, 0.5).unwrap();
        assert_eq!(tape.value(l).item(), 2.5);
        let l0 = combined_loss(&mut tape, ly, ld, 0.0).unwrap();
        assert_eq!(tape.value(l0).item(), 2.0);
    }

    #[test]
    fn combined_loss_is_affine_in_lambda() {
        let (ly, ld) = (1.375, 0.625);
        let eval = |lambda: f64| {
            let mut tape = Tape::<f64>::new();
            let a = tape.constant(Tensor::scalar(ly));
            let b = tape.constant(Tensor::scalar(ld));
            let l = combined_loss(&mut tape, a, b, lambda).unwrap();
            tape.value(l).item()
        };
        for lambda in [0.0, 0.25, 0.5, 1.0, 2.0] {
            assert_eq!(eval(lambda), ly + lambda * ld);
        }
    }

    fn small_front() -> Arc<MelFrontEnd<f64>> {
        Arc::new(MelFrontEnd::new(&FeatureConfig::default()).unwrap())
    }

    fn sine(len: usize, freq: f64) -> Vec<f64> {
        (0..len)
            .map(|n| 0.5 * (2.0 * std::f64::consts::PI * freq * n as f64 / 8000.0).sin())
            .collect()
    }

    #[test]
    fn mel_l1_identities() {
        let front = small_front();
        let a = sine(400, 440.0);
        let b = sine(400, 1200.0);
        let eval = |x: &[f64], y: &[f64]| {
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::from_vec(x.to_vec()));
            let yv = tape.constant(Tensor::from_vec(y.to_vec()));
            let l = mel_l1(&mut tape, xv, yv, &front).unwrap();
            tape.value(l).item()
        };
        assert_eq!(eval(&a, &a), 0.0);
        assert_eq!(eval(&a, &b), eval(&b, &a));
        let zeros = vec![0.0; 400];
        let lm = front.compute(&a).unwrap();
        let floor = 1e-10f64.ln();
        let want = lm.data().iter().map(|v| (v - floor).abs()).sum::<f64>() / lm.numel() as f64;
        assert!((eval(&a, &zeros) - want).abs() < 1e-12);

        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::from_vec(a.clone()));
        let yv = tape.constant(Tensor::from_vec(a[..300].to_vec()));
        assert!(mel_l1(&mut tape, xv, yv, &front).is_err());
    }

    #[test]
    fn feature_matching_examples() {
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let f = tape.constant(Tensor::from_vec(vec![2.0, 4.0]));
        let l = feature_matching(&mut tape, &[r], &[f]).unwrap();
        assert_eq!(tape.value(l).item(), 1.5);
        let same = feature_matching(&mut tape, &[r, f], &[r, f]).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
        assert!(feature_matching(&mut tape, &[r], &[r, f]).is_err());
    }

    #[test]
    fn gan_loss_examples() {
        let cfg = SynthLossConfig {
            lambda_fm: 0.0,
            lambda_mel: 0.0,
            ..Default::default()
        };
        let mut tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::full([3], 1.0));
        let zeros = tape.constant(Tensor::zeros([3]));
        let z = tape.constant(Tensor::scalar(0.0));
        let (lg, ld) = gan_losses(&mut tape, &[ones, ones], &[zeros, zeros], z, z, &cfg).unwrap();
        assert_eq!(tape.value(ld).item(), 0.0);
        assert_eq!(tape.value(lg).item(), 2.0);
        let (lg, _) = gan_losses(&mut tape, &[zeros, zeros], &[ones, ones], z, z, &cfg).unwrap();
        assert_eq!(tape.value(lg).item(), 0.0);

        let swapped = SynthLossConfig {
            orientation: GanOrientation::Swapped,
            ..cfg
        };
        let (lg, ld) = gan_losses(&mut tape, &[ones], &[zeros], z, z, &swapped).unwrap();
        assert_eq!(tape.value(lg).item(), 0.0);
        assert_eq!(tape.value(ld).item(), 1.0);
    }

    #[test]
    fn synthesis_losses_pass_finite_differences() {
        use crate::autodiff::finite_difference_check;
        let front = Arc::new(
            MelFrontEnd::new(&FeatureConfig {
                sample_rate: 1600,
                frame_len: 16,
                hop: 8,
                n_fft: 16,
                n_mels: 4,
                log_floor: 1e-10,
            })
            .unwrap(),
        );
        let x: Vec<f64> = (0..32)
            .map(|i| ((i * 7 % 11) as f64 / 11.0) - 0.45)
            .collect();
        let y: Vec<f64> = (0..32)
            .map(|i| ((i * 5 % 13) as f64 / 13.0) - 0.52)
            .collect();
        let mel = |t: &mut Tape<f64>, v: &[Var]| mel_l1(t, v[0], v[1], &front);
        let err = finite_difference_check(
            mel,
            &[Tensor::from_vec(x.clone()), Tensor::from_vec(y.clone())],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "mel_l1 {err}");

        let fm = |t: &mut Tape<f64>, v: &[Var]| feature_matching(t, &v[..2], &v[2..]);
        let feats: Vec<Tensor<f64>> = [&x[..4], &x[4..10], &y[..4], &y[4..10]]
            .iter()
            .map(|s| Tensor::from_vec(s.to_vec()))
            .collect();
        let err = finite_difference_check(fm, &feats, 1e-6).unwrap();
        assert!(err < 1e-6, "feature_matching {err}");

        let cfg = SynthLossConfig::default();
        let gan = |t: &mut Tape<f64>, v: &[Var]| {
            let (g, d) = gan_losses(t, &v[..2], &v[2..4], v[4], v[5], &cfg)?;
            let d = t.scale(d, 0.37)?;
            t.add(g, d)
        };
        let mut inputs = feats.clone();
        inputs.push(Tensor::scalar(0.3));
        inputs.push(Tensor::scalar(1.1));
        let err = finite_difference_check(gan, &inputs, 1e-5).unwrap();
        assert!(err < 1e-6, "gan_losses {err}");
    }

    #[test]
    fn batch_order_does_not_matter() {
        let rows = [
            vec![0.2, -1.0, 0.5],
            vec![1.5, 0.1, -0.3],
            vec![-0.7, 0.9, 0.0],
        ];
        let labels = [2usize, 0, 1];
        let eval = |order: [usize; 3]| {
            let mut tape = Tape::<f64>::new();
            let data: Vec<f64> = order.iter().flat_map(|&i| rows[i].clone()).collect();
            let x = tape.constant(Tensor::new([3, 3], data).unwrap());
            let lab: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
            let l = cross_entropy(&mut tape, x, &lab).unwrap();
            tape.value(l).item()
        };
        assert!((eval([0, 1, 2]) - eval([2, 0, 1])).abs() < 1e-15);
    }
}
