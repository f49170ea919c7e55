//! Metrics and analyses: token error rate, unweighted speaker accuracy,
//! waveform mutual information and the report tables.

mod mi;
mod report;

use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::models::{AsrModel, ParamStore};
use crate::tensor::Tensor;
use crate::training::stack_batch;

pub use mi::{
    entropy, mi_difference_report, mutual_information, quantize, Histogram, MiConfig, MiReport,
    WavePair, MIN_MI_SAMPLES,
};
pub use report::{make_report, ProbeRecord, Report, RunResult};

/// Per-frame argmax (ties to the lowest index), merge repeats, drop blanks.
pub fn greedy_ctc_decode(log_probs: &Tensor<f32>, blank: usize) -> Vec<usize> {
    let c = log_probs.shape()[1];
    let mut out = Vec::new();
    let mut prev = None;
    for r in 0..log_probs.shape()[0] {
        let row = &log_probs.data()[r * c..(r + 1) * c];
        let best = crate::training::argmax_row(row);
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// Levenshtein distance between token sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `edit_distance(hyp, reference) / |reference|`.
pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid(
            "token error rate needs a nonempty reference",
        ));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// Mean over the classes present in `labels` of per-class accuracy.
pub fn speaker_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("speaker accuracy of an empty set"));
    }
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (p, l) in preds.iter().zip(labels) {
        let e = per.entry(*l).or_default();
        e.0 += usize::from(p == l);
        e.1 += 1;
    }
    Ok(per
        .values()
        .map(|(ok, n)| *ok as f64 / *n as f64)
        .sum::<f64>()
        / per.len() as f64)
}

/// Corpus-level token error rate (total edits over total reference tokens)
/// of greedy decoding on the given utterances.
pub fn recognizer_ter(
    model: &AsrModel,
    store: &ParamStore<f32>,
    feats: &[Tensor<f32>],
    references: &[&[usize]],
    indices: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::invalid("no utterances to score"));
    }
    let (mut edits, mut total) = (0usize, 0usize);
    for chunk in indices.chunks(32) {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(stack_batch::<f32>(feats, chunk)?);
        let out = model.forward(&mut tape, &p, x, &BTreeSet::new())?;
        let lp = tape.value(out.log_probs);
        let (f, c) = (out.enc.frames, lp.shape()[1]);
        for (j, &i) in chunk.iter().enumerate() {
            let rows = Tensor::new(vec![f, c], lp.data()[j * f * c..(j + 1) * f * c].to_vec())?;
            let hyp = greedy_ctc_decode(&rows, model.head.blank());
            edits += edit_distance(&hyp, references[i]);
            total += references[i].len();
        }
    }
    if total == 0 {
        return Err(Error::invalid("references are empty"));
    }
    Ok(edits as f64 / total as f64)
}

#[cfg(test)]
mod tests;
