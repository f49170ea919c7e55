//! Plug-in mutual information between time-aligned waveforms.
//!
//! Both signals are quantized into uniform amplitude bins on `[-1, 1]`; the
//! joint histogram of sample pairs gives the probabilities.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiConfig {
    pub n_bins: usize,
    /// Bins of the difference histogram.
    pub hist_bins: usize,
}

impl Default for MiConfig {
    fn default() -> Self {
        MiConfig {
            n_bins: 64,
            hist_bins: 20,
        }
    }
}

impl MiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 2 || self.hist_bins < 1 {
            return Err(Error::invalid(
                "MI needs at least 2 amplitude bins and 1 histogram bin",
            ));
        }
        Ok(())
    }
}

pub const MIN_MI_SAMPLES: usize = 1000;

/// Bin index of every sample; values outside `[-1, 1]` land in the edge bins.
pub fn quantize(x: &[f32], n_bins: usize) -> Vec<usize> {
    x.iter()
        .map(|&v| {
            let u = (f64::from(v) + 1.0) / 2.0 * n_bins as f64;
            (u.floor().max(0.0) as usize).min(n_bins - 1)
        })
        .collect()
}

fn entropy_of_counts(counts: &[u64], n: u64) -> f64 {
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Entropy in bits of the quantized signal.
pub fn entropy(x: &[f32], cfg: &MiConfig) -> Result<f64> {
    cfg.validate()?;
    let mut counts = vec![0u64; cfg.n_bins];
    for b in quantize(x, cfg.n_bins) {
        counts[b] += 1;
    }
    Ok(entropy_of_counts(&counts, x.len() as u64))
}

/// `Σ p(x,y)·log2(p(x,y) / (p(x)·p(y)))` over the joint amplitude histogram.
pub fn mutual_information(x: &[f32], y: &[f32], cfg: &MiConfig) -> Result<f64> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "MI of signals with {} and {} samples",
            x.len(),
            y.len()
        )));
    }
    if x.len() < MIN_MI_SAMPLES {
        return Err(Error::invalid(format!(
            "MI needs at least {MIN_MI_SAMPLES} samples, got {}",
            x.len()
        )));
    }
    let nb = cfg.n_bins;
    let (qx, qy) = (quantize(x, nb), quantize(y, nb));
    let mut joint = vec![0u64; nb * nb];
    let (mut cx, mut cy) = (vec![0u64; nb], vec![0u64; nb]);
    for (&a, &b) in qx.iter().zip(&qy) {
        joint[a * nb + b] += 1;
        cx[a] += 1;
        cy[b] += 1;
    }
    let n = x.len() as f64;
    let mut mi = 0.0;
    for a in 0..nb {
        for b in 0..nb {
            let c = joint[a * nb + b];
            if c == 0 {
                continue;
            }
            let c = c as f64;
            mi += c / n * (c * n / (cx[a] as f64 * cy[b] as f64)).log2();
        }
    }
    Ok(mi)
}

/// Counts over equal-width bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn of(values: &[f64], bins: usize) -> Histogram {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, lo + 0.5)
        };
        let w = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + w * i as f64).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let i = (((v - lo) / w).floor() as usize).min(bins - 1);
            counts[i] += 1;
        }
        Histogram { edges, counts }
    }
}

/// Per-utterance MI against baseline and anonymized resyntheses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiReport {
    pub ids: Vec<String>,
    pub baseline: Vec<f64>,
    pub anonymized: Vec<f64>,
    /// `baseline - anonymized` per utterance.
    pub differences: Vec<f64>,
    pub histogram: Histogram,
}

impl MiReport {
    pub fn mean_difference(&self) -> f64 {
        self.differences.iter().sum::<f64>() / self.differences.len() as f64
    }

    /// `rank,baseline,anonymized` with each curve sorted ascending.
    pub fn curves_csv(&self) -> String {
        let mut b = self.baseline.clone();
        let mut a = self.anonymized.clone();
        b.sort_by(f64::total_cmp);
        a.sort_by(f64::total_cmp);
        let mut s = String::from("rank,baseline,anonymized\n");
        for (i, (x, y)) in b.iter().zip(&a).enumerate() {
            writeln!(s, "{i},{x},{y}").expect("writing to a String");
        }
        s
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        let h = &self.histogram;
        for (i, c) in h.counts.iter().enumerate() {
            writeln!(s, "{},{},{c}", h.edges[i], h.edges[i + 1]).expect("writing to a String");
        }
        s
    }

    pub fn per_utterance_csv(&self) -> String {
        let mut s = String::from("utt_id,mi_baseline,mi_anonymized,difference\n");
        for i in 0..self.ids.len() {
            writeln!(
                s,
                "{},{},{},{}",
                self.ids[i], self.baseline[i], self.anonymized[i], self.differences[i]
            )
            .expect("writing to a String");
        }
        s
    }
}

/// A waveform and its resynthesis, keyed by utterance id.
pub type WavePair<'a> = (&'a str, &'a [f32], &'a [f32]);

pub fn mi_difference_report(
    baseline: &[WavePair],
    anonymized: &[WavePair],
    cfg: &MiConfig,
) -> Result<MiReport> {
    cfg.validate()?;
    if baseline.is_empty() {
        return Err(Error::invalid("MI report needs at least one utterance"));
    }
    if baseline.len() != anonymized.len()
        || baseline.iter().zip(anonymized).any(|(b, a)| b.0 != a.0)
    {
        return Err(Error::invalid(
            "baseline and anonymized pairs must cover the same utterance ids in order",
        ));
    }
    let mut ids = Vec::new();
    let (mut bl, mut an, mut diff) = (Vec::new(), Vec::new(), Vec::new());
    for ((id, x, xb), (_, x2, xa)) in baseline.iter().zip(anonymized) {
        if x != x2 {
            return Err(Error::invalid(format!(
                "original waveform of `{id}` differs between sides"
            )));
        }
        let b = mutual_information(x, xb, cfg)?;
        let a = mutual_information(x, xa, cfg)?;
        ids.push(id.to_string());
        bl.push(b);
        an.push(a);
        diff.push(b - a);
    }
    let histogram = Histogram::of(&diff, cfg.hist_bins);
    Ok(MiReport {
        ids,
        baseline: bl,
        anonymized: an,
        differences: diff,
        histogram,
    })
}
