//! Log-mel features: Hann-windowed short-time magnitude spectrum, triangular
//! mel filterbank, floored logarithm.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Spectrogram parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: usize,
    pub frame_len: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 8000,
            frame_len: 200,
            hop: 100,
            n_fft: 256,
            n_mels: 40,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.frame_len || self.frame_len > self.n_fft {
            return Err(Error::invalid(format!(
                "need 0 < hop <= frame_len <= n_fft, got hop {} frame_len {} n_fft {}",
                self.hop, self.frame_len, self.n_fft
            )));
        }
        if self.n_mels == 0 || self.n_mels >= self.n_fft / 2 {
            return Err(Error::invalid(format!(
                "n_mels must lie in 1..n_fft/2, got {}",
                self.n_mels
            )));
        }
        if !(self.log_floor > 0.0) || self.sample_rate == 0 {
            return Err(Error::invalid("log_floor and sample_rate must be positive"));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// `1 + floor((len - frame_len) / hop)`, or `None` when the signal is too short.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.frame_len).then(|| 1 + (len - self.frame_len) / self.hop)
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, `[n_mels, n_bins]`, unnormalized.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Vec<Vec<f64>> {
    let n_bins = cfg.n_bins();
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = |b: usize| b as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|b| {
                    let f = bin_hz(b);
                    let up = (f - lo) / (center - lo);
                    let down = (hi - f) / (hi - center);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Center frequency in Hz of each mel filter.
pub fn mel_centers(cfg: &FeatureConfig) -> Vec<f64> {
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Precomputed tables for the differentiable spectrogram `φ`.
#[derive(Debug)]
pub struct MelFrontEnd<T> {
    cfg: FeatureConfig,
    n_bins: usize,
    /// Window folded into the DFT: `[frame_len, n_bins]`.
    cos: Vec<T>,
    sin: Vec<T>,
    /// `[n_bins, n_mels]`
    fb: Vec<T>,
}

impl<T: Scalar> MelFrontEnd<T> {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let n_bins = cfg.n_bins();
        let fl = cfg.frame_len;
        let mut cos = Vec::with_capacity(fl * n_bins);
        let mut sin = Vec::with_capacity(fl * n_bins);
        for n in 0..fl {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / fl as f64).cos();
            for b in 0..n_bins {
                let ang =
                    2.0 * std::f64::consts::PI * ((b * n) % cfg.n_fft) as f64 / cfg.n_fft as f64;
                cos.push(T::from_f64(w * ang.cos()));
                sin.push(T::from_f64(-w * ang.sin()));
            }
        }
        let bank = mel_filterbank(cfg);
        let mut fb = vec![T::ZERO; n_bins * cfg.n_mels];
        for (m, row) in bank.iter().enumerate() {
            for (b, &v) in row.iter().enumerate() {
                fb[b * cfg.n_mels + m] = T::from_f64(v);
            }
        }
        Ok(MelFrontEnd {
            cfg: cfg.clone(),
            n_bins,
            cos,
            sin,
            fb,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    fn frames(&self, x: &[T], n_frames: usize) -> Vec<T> {
        let fl = self.cfg.frame_len;
        let mut out = Vec::with_capacity(n_frames * fl);
        for f in 0..n_frames {
            out.extend_from_slice(&x[f * self.cfg.hop..f * self.cfg.hop + fl]);
        }
        out
    }

    /// Forward pass keeping `[re, im, mag, mel]` for the backward rule.
    pub(crate) fn forward_saved(&self, wave: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        if wave.rank() != 1 {
            return Err(Error::shape(
                "log_mel",
                format!("expected a 1-D waveform, got {:?}", wave.shape()),
            ));
        }
        let n_frames = self.cfg.frame_count(wave.numel()).ok_or_else(|| {
            Error::shape(
                "log_mel",
                format!(
                    "waveform of {} samples is shorter than one frame ({})",
                    wave.numel(),
                    self.cfg.frame_len
                ),
            )
        })?;
        let (fl, nb, nm) = (self.cfg.frame_len, self.n_bins, self.cfg.n_mels);
        let frames = self.frames(wave.data(), n_frames);
        let re = kernels::matmul(&frames, &self.cos, n_frames, fl, nb);
        let im = kernels::matmul(&frames, &self.sin, n_frames, fl, nb);
        let mag: Vec<T> = re
            .iter()
            .zip(&im)
            .map(|(&a, &b)| (a * a + b * b).sqrt())
            .collect();
        let mel = kernels::matmul(&mag, &self.fb, n_frames, nb, nm);
        let floor = T::from_f64(self.cfg.log_floor);
        let out = mel.iter().map(|&v| v.max(floor).ln()).collect();
        let sh = |c: usize, d: Vec<T>| Tensor::from_parts(vec![n_frames, c], d);
        Ok((
            sh(nm, out),
            vec![sh(nb, re), sh(nb, im), sh(nb, mag), sh(nm, mel)],
        ))
    }

    pub(crate) fn backward(
        &self,
        wave: &Tensor<T>,
        _out: &Tensor<T>,
        saved: &[Tensor<T>],
        g: &Tensor<T>,
    ) -> Tensor<T> {
        let (fl, nb, nm) = (self.cfg.frame_len, self.n_bins, self.cfg.n_mels);
        let n_frames = g.shape()[0];
        let (re, im, mag, mel) = (
            saved[0].data(),
            saved[1].data(),
            saved[2].data(),
            saved[3].data(),
        );
        let floor = T::from_f64(self.cfg.log_floor);
        let g_mel: Vec<T> = g
            .data()
            .iter()
            .zip(mel)
            .map(|(&gv, &m)| if m > floor { gv / m } else { T::ZERO })
            .collect();
        let mut g_mag = vec![T::ZERO; n_frames * nb];
        kernels::matmul_nt_acc(&g_mel, &self.fb, &mut g_mag, n_frames, nm, nb);
        let mut g_re = vec![T::ZERO; n_frames * nb];
        let mut g_im = vec![T::ZERO; n_frames * nb];
        for i in 0..n_frames * nb {
            if mag[i] > T::ZERO {
                g_re[i] = g_mag[i] * re[i] / mag[i];
                g_im[i] = g_mag[i] * im[i] / mag[i];
            }
        }
        let mut g_frames = vec![T::ZERO; n_frames * fl];
        kernels::matmul_nt_acc(&g_re, &self.cos, &mut g_frames, n_frames, nb, fl);
        kernels::matmul_nt_acc(&g_im, &self.sin, &mut g_frames, n_frames, nb, fl);
        let mut dx = vec![T::ZERO; wave.numel()];
        for f in 0..n_frames {
            let base = f * self.cfg.hop;
            for (d, &v) in dx[base..base + fl]
                .iter_mut()
                .zip(&g_frames[f * fl..(f + 1) * fl])
            {
                *d += v;
            }
        }
        Tensor::from_parts(wave.shape().to_vec(), dx)
    }

    /// Log-mel features `[frames, n_mels]` of a waveform.
    pub fn compute(&self, wave: &[T]) -> Result<Tensor<T>> {
        Ok(self.forward_saved(&Tensor::from_vec(wave.to_vec()))?.0)
    }
}

/// `φ`: log-mel features `[frames, n_mels]` with
/// `frames = 1 + floor((len - frame_len) / hop)`.
pub fn log_mel(waveform: &[f32], cfg: &FeatureConfig) -> Result<Tensor<f32>> {
    MelFrontEnd::new(cfg)?.compute(waveform)
}
