//! Deterministic synthetic multi-speaker corpus.
//!
//! Each speaker is a source-filter voice: a harmonic source at `f0` shaped by
//! a per-speaker spectral tilt. Each token is a resonance pattern applied to
//! that source plus an amplitude envelope. Speaker and content are therefore
//! separable in principle but mixed in every spectral frame.

mod features;
mod io;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use features::{log_mel, mel_centers, mel_filterbank, FeatureConfig, MelFrontEnd};
pub use io::{load_corpus, save_corpus, CORPUS_MANIFEST};

/// Which partition an utterance belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestAdv,
    Dev,
}

/// Voice parameters of one synthetic speaker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: usize,
    /// Fundamental frequency in Hz, within `[80, 300]`.
    pub f0: f64,
    /// Log-gain anchors spread evenly from 0 Hz to Nyquist.
    pub formant_gains: Vec<f64>,
    /// Relative standard deviation of the per-utterance f0 perturbation.
    pub jitter: f64,
}

impl SpeakerProfile {
    fn gain_at(&self, freq: f64, nyquist: f64) -> f64 {
        let n = self.formant_gains.len();
        if n == 1 {
            return self.formant_gains[0];
        }
        let pos = (freq / nyquist).clamp(0.0, 1.0) * (n - 1) as f64;
        let i = (pos.floor() as usize).min(n - 2);
        let frac = pos - i as f64;
        self.formant_gains[i] * (1.0 - frac) + self.formant_gains[i + 1] * frac
    }

    fn distinct_from(&self, other: &SpeakerProfile) -> bool {
        let gain_dist = self
            .formant_gains
            .iter()
            .zip(&other.formant_gains)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        (self.f0 - other.f0).abs() >= 10.0 || gain_dist >= 0.1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub utt_id: String,
    pub speaker_id: usize,
    pub tokens: Vec<usize>,
    pub split: Split,
    /// Samples in `[-1, 1]`.
    #[serde(skip)]
    pub waveform: Vec<f32>,
}

/// Generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub vocab_size: usize,
    pub tokens_per_utt: usize,
    pub sample_rate: usize,
    pub segment_len: usize,
    /// Fraction of each speaker's utterances held out as `test_adv`.
    pub test_adv_fraction: f64,
    /// Fraction of each speaker's utterances held out as `dev`.
    pub dev_fraction: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_speakers: 8,
            utts_per_speaker: 25,
            vocab_size: 6,
            tokens_per_utt: 4,
            sample_rate: 8000,
            segment_len: 800,
            test_adv_fraction: 0.1,
            dev_fraction: 0.1,
            noise_std: 0.003,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::invalid("corpus needs at least 2 speakers"));
        }
        if self.utts_per_speaker < 2 {
            return Err(Error::invalid(
                "corpus needs at least 2 utterances per speaker",
            ));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocabulary needs at least 2 tokens"));
        }
        if self.tokens_per_utt == 0 || self.segment_len == 0 || self.sample_rate == 0 {
            return Err(Error::invalid(
                "tokens_per_utt, segment_len and sample_rate must be positive",
            ));
        }
        for f in [self.test_adv_fraction, self.dev_fraction] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::invalid("held-out fractions must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn utterance_len(&self) -> usize {
        self.tokens_per_utt * self.segment_len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub speakers: Vec<SpeakerProfile>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Indices of the utterances in a split, in corpus order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Up to `n` utterances of `split`, taken round-robin over speakers in
    /// corpus order, returned sorted.
    pub fn balanced_subset(&self, split: Split, n: usize) -> Vec<usize> {
        let mut per: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in self.split_indices(split) {
            per.entry(self.utterances[i].speaker_id)
                .or_default()
                .push(i);
        }
        let mut out = Vec::with_capacity(n);
        let mut round = 0;
        while out.len() < n {
            let before = out.len();
            for list in per.values() {
                if let Some(&i) = list.get(round) {
                    if out.len() < n {
                        out.push(i);
                    }
                }
            }
            if out.len() == before {
                break;
            }
            round += 1;
        }
        out.sort_unstable();
        out
    }

    /// The first `n` utterances of every speaker, for small fixtures.
    pub fn subset_per_speaker(&self, n: usize) -> Vec<usize> {
        let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
        self.utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| {
                let c = seen.entry(u.speaker_id).or_default();
                *c += 1;
                *c <= n
            })
            .map(|(i, _)| i)
            .collect()
    }
}

/// Resonance pattern of a token: two formant centers and an envelope shape.
struct TokenPattern {
    f1: f64,
    f2: f64,
    bandwidth: f64,
    am_rate: f64,
    am_depth: f64,
}

fn token_pattern(k: usize, vocab: usize, nyquist: f64) -> TokenPattern {
    let span = nyquist * 0.8;
    let step = span / vocab as f64;
    let f1 = 300.0 + step * (k as f64 + 0.5);
    let f2 = 300.0 + step * (((k * 3 + 1) % vocab) as f64 + 0.5);
    TokenPattern {
        f1,
        f2,
        bandwidth: step * 0.45,
        am_rate: [0.0, 20.0, 35.0][k % 3],
        am_depth: [0.0, 0.35, 0.5][k % 3],
    }
}

fn sample_speakers(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<SpeakerProfile> {
    let mut speakers: Vec<SpeakerProfile> = Vec::with_capacity(cfg.n_speakers);
    while speakers.len() < cfg.n_speakers {
        let cand = SpeakerProfile {
            speaker_id: speakers.len(),
            f0: rng.random_range(80.0..=300.0),
            formant_gains: (0..4).map(|_| rng.random_range(-1.2..1.2)).collect(),
            jitter: rng.random_range(0.005..0.02),
        };
        if speakers.iter().all(|s| s.distinct_from(&cand)) {
            speakers.push(cand);
        }
    }
    speakers
}

fn sample_tokens(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut tokens: Vec<usize> = Vec::with_capacity(cfg.tokens_per_utt);
    while tokens.len() < cfg.tokens_per_utt {
        let t = rng.random_range(0..cfg.vocab_size);
        // Adjacent repeats are excluded so every token boundary is audible.
        if tokens.last() != Some(&t) {
            tokens.push(t);
        }
    }
    tokens
}

fn render(
    cfg: &CorpusConfig,
    spk: &SpeakerProfile,
    tokens: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let sr = cfg.sample_rate as f64;
    let nyquist = sr / 2.0;
    let jitter = Normal::new(0.0, spk.jitter).expect("finite jitter");
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("finite noise");
    let f0 = spk.f0 * (1.0 + jitter.sample(rng));
    let n_harm = ((nyquist * 0.95) / f0).floor() as usize;
    let seg = cfg.segment_len;
    let fade = (seg / 10).max(1);
    let mut wave = vec![0.0f64; tokens.len() * seg];
    for (j, &tok) in tokens.iter().enumerate() {
        let pat = token_pattern(tok, cfg.vocab_size, nyquist);
        let amps: Vec<f64> = (1..=n_harm)
            .map(|h| {
                let f = h as f64 * f0;
                let res = 0.05
                    + (-((f - pat.f1) / pat.bandwidth).powi(2)).exp()
                    + 0.6 * (-((f - pat.f2) / pat.bandwidth).powi(2)).exp();
                spk.gain_at(f, nyquist).exp() * res
            })
            .collect();
        for n in 0..seg {
            let t = (j * seg + n) as f64 / sr;
            let local = n as f64 / sr;
            let edge = n.min(seg - 1 - n);
            let ramp = if edge < fade {
                0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / fade as f64).cos()
            } else {
                1.0
            };
            let am = 1.0
                - pat.am_depth
                    * (0.5 - 0.5 * (2.0 * std::f64::consts::PI * pat.am_rate * local).cos());
            let src: f64 = amps
                .iter()
                .enumerate()
                .map(|(h, &a)| a * (2.0 * std::f64::consts::PI * (h + 1) as f64 * f0 * t).cos())
                .sum();
            wave[j * seg + n] = ramp * am * src;
        }
    }
    let peak = wave.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    wave.iter()
        .map(|v| ((0.8 * v / peak + noise.sample(rng)).clamp(-1.0, 1.0)) as f32)
        .collect()
}

/// Generates the default-shaped corpus for the given counts and seed.
pub fn generate_corpus(
    n_speakers: usize,
    utts_per_speaker: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<Corpus> {
    generate(&CorpusConfig {
        n_speakers,
        utts_per_speaker,
        vocab_size,
        seed,
        ..CorpusConfig::default()
    })
}

/// Generates a corpus. A pure function of the configuration.
pub fn generate(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let speakers = sample_speakers(cfg, &mut rng);
    let mut utterances = Vec::with_capacity(cfg.n_speakers * cfg.utts_per_speaker);
    for spk in &speakers {
        let n = cfg.utts_per_speaker;
        let n_adv = ((cfg.test_adv_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let n_dev = ((cfg.dev_fraction * n as f64).round() as usize).min(n - 1 - n_adv);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut split_of = vec![Split::Train; n];
        for &i in &order[..n_adv] {
            split_of[i] = Split::TestAdv;
        }
        for &i in &order[n_adv..n_adv + n_dev] {
            split_of[i] = Split::Dev;
        }
        for (u, split) in split_of.into_iter().enumerate() {
            let tokens = sample_tokens(cfg, &mut rng);
            let waveform = render(cfg, spk, &tokens, &mut rng);
            utterances.push(Utterance {
                utt_id: format!("s{:02}_u{:03}", spk.speaker_id, u),
                speaker_id: spk.speaker_id,
                tokens,
                split,
                waveform,
            });
        }
    }
    Ok(Corpus {
        config: cfg.clone(),
        speakers,
        utterances,
    })
}

/// A per-speaker stratified partition of utterance indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits the given utterances per speaker: `round(fraction·n)` of each
/// speaker's utterances (at least one, at most `n - 1`) go to the probe
/// training side.
pub fn split_corpus(corpus: &Corpus, probe_fraction: f64, seed: u64) -> Result<ProbeSplit> {
    split_indices(
        corpus,
        &(0..corpus.utterances.len()).collect::<Vec<_>>(),
        probe_fraction,
        seed,
    )
}

pub fn split_indices(
    corpus: &Corpus,
    indices: &[usize],
    probe_fraction: f64,
    seed: u64,
) -> Result<ProbeSplit> {
    if !(probe_fraction > 0.0 && probe_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "probe fraction must lie in (0, 1), got {probe_fraction}"
        )));
    }
    let mut by_speaker: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_speaker
            .entry(corpus.utterances[i].speaker_id)
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (spk, mut utts) in by_speaker {
        if utts.len() < 2 {
            return Err(Error::invalid(format!(
                "speaker {spk} has fewer than 2 utterances"
            )));
        }
        utts.shuffle(&mut rng);
        let n_train =
            ((probe_fraction * utts.len() as f64).round() as usize).clamp(1, utts.len() - 1);
        train.extend_from_slice(&utts[..n_train]);
        test.extend_from_slice(&utts[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(ProbeSplit { train, test })
}
