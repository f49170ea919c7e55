//! Encoder features and batch sampling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::stack_features;
use crate::synthdata::{Corpus, FeatureConfig, MelFrontEnd};
use crate::tensor::{Scalar, Tensor};

/// Log-mel features of every utterance. Waveforms are right-padded with
/// `frame_len - hop` zeros first, so `L` samples give `L / hop` frames and
/// the encoder's frame count lines up with the generator's upsampling.
pub fn featurize(corpus: &Corpus, cfg: &FeatureConfig) -> Result<Vec<Tensor<f32>>> {
    let front = MelFrontEnd::<f32>::new(cfg)?;
    let pad = cfg.frame_len - cfg.hop;
    corpus
        .utterances
        .iter()
        .map(|u| {
            let mut w = u.waveform.clone();
            w.resize(w.len() + pad, 0.0);
            front.compute(&w)
        })
        .collect()
}

/// `[B, F, n_mels]` batch from per-utterance features, cast to `T`.
pub fn stack_batch<T: Scalar>(feats: &[Tensor<f32>], indices: &[usize]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = indices.iter().map(|&i| feats[i].cast()).collect();
    stack_features(&items.iter().collect::<Vec<_>>())
}

/// Shuffles the pool once per epoch and hands out consecutive batches,
/// wrapping into the next epoch when a batch straddles the boundary.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(pool: Vec<usize>, seed: u64) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::invalid("cannot sample batches from an empty pool"));
        }
        Ok(BatchSampler {
            pool,
            order: Vec::new(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_batch(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order = self.pool.clone();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
