//! x-vector style speaker classifier: frame-level layers, statistics
//! pooling, utterance-level layers.

use super::params::{Bound, Init, Linear, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Added to the pooled variance before the square root.
pub const POOL_VAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct SpeakerClassifier {
    frame1: Linear,
    frame2: Linear,
    segment: Linear,
    out: Linear,
    pub hidden: usize,
    pub n_speakers: usize,
}

impl SpeakerClassifier {
    /// Parameters are registered under `prefix` (`spk` for the adversarial
    /// branch, `probe` for evaluation probes).
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        n_speakers: usize,
    ) -> Result<Self> {
        if n_speakers == 0 {
            return Err(Error::invalid(
                "speaker classifier needs at least one class",
            ));
        }
        Ok(SpeakerClassifier {
            frame1: Linear::new(store, init, &format!("{prefix}.frame1"), d_in, hidden, true)?,
            frame2: Linear::new(
                store,
                init,
                &format!("{prefix}.frame2"),
                hidden,
                hidden,
                true,
            )?,
            segment: Linear::new(
                store,
                init,
                &format!("{prefix}.segment"),
                2 * hidden,
                hidden,
                true,
            )?,
            out: Linear::new(
                store,
                init,
                &format!("{prefix}.out"),
                hidden,
                n_speakers,
                true,
            )?,
            hidden,
            n_speakers,
        })
    }

    /// Mean and standard deviation over frames: `[B·F, h]` to `[B, 2h]`.
    pub fn pool<T: Scalar>(tape: &mut Tape<T>, x: Var, batch: usize, frames: usize) -> Result<Var> {
        if frames < 2 {
            return Err(Error::invalid(format!(
                "statistics pooling needs at least 2 frames, got {frames}"
            )));
        }
        let h = tape.value(x).shape()[1];
        let x = tape.reshape(x, &[batch, frames, h])?;
        let mean = tape.mean_over_axis(x, 1)?;
        let var = tape.variance_over_axis(x, 1)?;
        // Dead ReLU channels have exactly zero variance; the floor keeps the
        // square root differentiable there.
        let var = tape.add_scalar(var, POOL_VAR_FLOOR)?;
        let std = tape.sqrt(var)?;
        tape.concat(&[mean, std], 1)
    }

    /// Frame-level embeddings `[B·F, d]` to speaker logits `[B, n_speakers]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        batch: usize,
        frames: usize,
    ) -> Result<Var> {
        if frames < 2 {
            return Err(Error::invalid(format!(
                "speaker classifier needs at least 2 frames, got {frames}"
            )));
        }
        let h = self.frame1.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let h = self.frame2.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        let pooled = Self::pool(tape, h, batch, frames)?;
        let h = self.segment.forward(tape, p, pooled)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn pooling_by_hand() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([2, 2], &[1.0, 3.0, 3.0, 5.0]).unwrap());
        let pooled = SpeakerClassifier::pool(&mut tape, x, 1, 2).unwrap();
        let got = tape.value(pooled).data();
        let sd = (1.0 + POOL_VAR_FLOOR).sqrt();
        assert_eq!(&got[..2], &[2.0, 4.0]);
        assert!((got[2] - sd).abs() < 1e-15 && (got[3] - sd).abs() < 1e-15);
        let c =
            tape.constant(Tensor::from_f64([3, 2], &[0.7, -2.0, 0.7, -2.0, 0.7, -2.0]).unwrap());
        let pooled = SpeakerClassifier::pool(&mut tape, c, 1, 3).unwrap();
        for v in &tape.value(pooled).data()[2..] {
            assert!((v - POOL_VAR_FLOOR.sqrt()).abs() < 1e-12);
        }
    }

    fn classifier() -> (ParamStore<f64>, SpeakerClassifier) {
        let mut store = ParamStore::new();
        let c = SpeakerClassifier::new(&mut store, &mut Init::new(5), "spk", 3, 8, 4).unwrap();
        (store, c)
    }

    #[test]
    fn frame_permutation_leaves_logits_unchanged() {
        let (store, c) = classifier();
        let rows = [
            [0.1, -0.4, 0.9],
            [1.2, 0.3, -0.7],
            [-0.5, 0.8, 0.2],
            [0.0, -1.1, 0.6],
        ];
        let run = |order: [usize; 4]| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let data: Vec<f64> = order.iter().flat_map(|&i| rows[i]).collect();
            let x = tape.constant(Tensor::new([4, 3], data).unwrap());
            let y = c.forward(&mut tape, &p, x, 1, 4).unwrap();
            tape.value(y).clone()
        };
        let a = run([0, 1, 2, 3]);
        assert_eq!(a.shape(), &[1, 4]);
        assert_eq!(a, run([2, 0, 3, 1]));
        assert_eq!(a, run([3, 2, 1, 0]));
    }

    #[test]
    fn single_frame_rejected() {
        let (store, c) = classifier();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::new([1, 3], vec![0.1, 0.2, 0.3]).unwrap());
        assert!(c.forward(&mut tape, &p, x, 1, 1).is_err());
    }
}
