//! Optimizers, joint adversarial training of the recognizer, speaker probes
//! on frozen embeddings, and the toy synthesis GAN.

mod data;
mod optim;
mod probe;
mod stage1;
mod synth;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use data::{featurize, stack_batch, BatchSampler};
pub use optim::{
    adam_step, apply_moments, apply_moments_scaled, clip_global_norm, AdamHyper, AdamState,
    StepOutcome,
};
pub(crate) use probe::argmax_row;
pub use probe::{embed, train_probe, train_speaker_probe, ProbeConfig, ProbeResult, ProbeSource};
pub use stage1::{speaker_contribution_norm, train_stage1, Stage1Outcome};
pub use synth::{
    resynthesize, resynthesize_utterances, train_synth, SynthOutcome, SynthTrainConfig,
};

/// Arithmetic used inside a training loop. Checkpoints always store `f32`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Stage-1 optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Linear warm-up of α over this many steps; 0 keeps α constant.
    pub alpha_ramp_steps: usize,
    /// Abort when `L_y` exceeds this multiple of its value at `guard_step`.
    pub divergence_factor: f64,
    pub guard_step: usize,
    /// Learning-rate multiplier for the speaker classifier's parameter group
    /// inside the shared optimizer.
    pub speaker_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            steps: 3000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            grad_clip_norm: 5.0,
            seed: 0,
            precision: Precision::F32,
            alpha_ramp_steps: 0,
            divergence_factor: 10.0,
            guard_step: 100,
            speaker_lr_scale: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 || self.guard_step == 0 {
            return Err(Error::invalid(
                "batch_size, steps and guard_step must be positive",
            ));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("eps", self.eps),
            ("grad_clip_norm", self.grad_clip_norm),
            ("divergence_factor", self.divergence_factor),
            ("speaker_lr_scale", self.speaker_lr_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "{name} must lie in [0, 1), got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip: Some(self.grad_clip_norm),
        }
    }
}

/// One optimizer step of stage 1. Gradient norms are taken before clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_y: f64,
    /// Absent without a speaker branch.
    pub l_d: Option<f64>,
    pub l_total: f64,
    pub gnorm_f: f64,
    pub gnorm_m: f64,
    pub gnorm_y: f64,
    pub gnorm_d: f64,
}

/// Append-only per-step log with strictly increasing steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    records: Vec<StepRecord>,
}

pub const METRICS_HEADER: &str = "step,l_y,l_d,l_total,gnorm_f,gnorm_m,gnorm_y,gnorm_d";

impl MetricsTrace {
    pub fn new() -> Self {
        MetricsTrace::default()
    }

    pub fn push(&mut self, r: StepRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step <= last.step {
                return Err(Error::invalid(format!(
                    "metrics step {} after {}",
                    r.step, last.step
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.records {
            let l_d = r.l_d.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.step, r.l_y, l_d, r.l_total, r.gnorm_f, r.gnorm_m, r.gnorm_y, r.gnorm_d
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests;
