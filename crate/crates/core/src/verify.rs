//! Independent numerical checks of the differentiation engine.
//!
//! Every primitive is checked against central finite differences on random
//! shapes, and the CTC dynamic program is checked against brute-force
//! enumeration of all alignments. These run from the unit tests, the
//! acceptance suite and the `grad-check` command alike.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_difference_check, max_relative_error, Tape, Var, CATALOG};
use crate::error::{Error, Result};
use crate::synthdata::{FeatureConfig, MelFrontEnd};
use crate::tensor::{log_sum_exp, Tensor};

/// Central-difference step for single-step checks.
pub const FD_EPS: f64 = 1e-5;

/// Steps tried by [`check_primitive`]. Linear primitives are limited by
/// roundoff at small steps and curved ones by truncation at large steps; a
/// wrong backward rule fails at every step.
pub const FD_LADDER: [f64; 4] = [1e-3, 1e-4, 1e-5, 1e-6];

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Values in `±[0.2, 1.5]`, kept away from the kinks of relu/abs.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = uniform(shape, rng, 0.2, 1.5);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Contracts an arbitrary output with fixed random weights so that every
/// output coordinate contributes a distinct, order-one amount.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = tape.constant(uniform(&shape, &mut rng, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// A primitive instance: inputs and a scalar function of them.
type CaseFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    f: CaseFn,
}

impl Case {
    fn projected(
        inputs: Vec<Tensor<f64>>,
        seed: u64,
        g: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Case {
        Case {
            inputs,
            f: Box::new(move |t, v| {
                let y = g(t, v)?;
                project(t, y, seed)
            }),
        }
    }
}

fn build_case(name: &str, seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let small = |r: &mut ChaCha8Rng| r.random_range(1..=4usize);
    let case = match name {
        "add" | "sub" | "mul" => {
            let shape = [small(r), small(r)];
            let scalar_rhs = name == "mul" && r.random_bool(0.3);
            let a = uniform(&shape, r, -1.0, 1.0);
            let b = if scalar_rhs {
                uniform(&[], r, -1.0, 1.0)
            } else {
                uniform(&shape, r, -1.0, 1.0)
            };
            let name = name.to_string();
            Case::projected(vec![a, b], seed, move |t, v| {
                t.apply_primitive(&name, v, &Default::default())
            })
        }
        "scale" => {
            let c = r.random_range(-2.0..2.0);
            let x = uniform(&[small(r), small(r)], r, -1.0, 1.0);
            Case::projected(vec![x], seed, move |t, v| t.scale(v[0], c))
        }
        "add_scalar" => {
            let c = r.random_range(-2.0..2.0);
            let x = uniform(&[small(r)], r, -1.0, 1.0);
            Case::projected(vec![x], seed, move |t, v| {
                let y = t.add_scalar(v[0], c)?;
                t.square(y)
            })
        }
        "matmul" => {
            let (m, k, n) = (small(r), small(r), small(r));
            let a = uniform(&[m, k], r, -1.0, 1.0);
            let b = uniform(&[k, n], r, -1.0, 1.0);
            Case::projected(vec![a, b], seed, |t, v| t.matmul(v[0], v[1]))
        }
        "conv1d" => {
            let (c_in, c_out, k) = (small(r), small(r), r.random_range(1..=3usize));
            let stride = r.random_range(1..=2usize);
            let dilation = r.random_range(1..=2usize);
            let pad = (r.random_range(0..=1usize), r.random_range(0..=1usize));
            let len = (k - 1) * dilation + 1 + r.random_range(0..=4usize);
            let batched = r.random_bool(0.5);
            let x = if batched {
                uniform(&[2, c_in, len], r, -1.0, 1.0)
            } else {
                uniform(&[c_in, len], r, -1.0, 1.0)
            };
            let w = uniform(&[c_out, c_in, k], r, -1.0, 1.0);
            let b = uniform(&[c_out], r, -1.0, 1.0);
            Case::projected(vec![x, w, b], seed, move |t, v| {
                t.conv1d_dilated(v[0], v[1], Some(v[2]), stride, dilation, pad)
            })
        }
        "depthwise_conv1d" => {
            let c = small(r);
            let k = [1usize, 3, 5][r.random_range(0..3)];
            let s = r.random_range(2..=5usize);
            let segs = r.random_range(1..=2usize);
            let x = uniform(&[segs * s, c], r, -1.0, 1.0);
            let w = uniform(&[c, k], r, -1.0, 1.0);
            let b = uniform(&[c], r, -1.0, 1.0);
            Case::projected(vec![x, w, b], seed, move |t, v| {
                t.depthwise_conv1d(v[0], v[1], Some(v[2]), Some(s))
            })
        }
        "transpose_conv1d" => {
            let (c_in, c_out) = (small(r), small(r));
            let stride = r.random_range(1..=3usize);
            let k = stride + r.random_range(0..=2usize);
            let padding = r.random_range(0..=(k - 1) / 2);
            let len = r.random_range(1..=4usize);
            let x = uniform(&[1, c_in, len], r, -1.0, 1.0);
            let w = uniform(&[c_in, c_out, k], r, -1.0, 1.0);
            let b = uniform(&[c_out], r, -1.0, 1.0);
            Case::projected(vec![x, w, b], seed, move |t, v| {
                t.transpose_conv1d(v[0], v[1], Some(v[2]), stride, padding)
            })
        }
        "layer_norm" => {
            // Two features normalize to exactly ±1, whose gradient is
            // nearly zero and therefore numerically meaningless.
            let d = r.random_range(3..=6usize);
            let x = uniform(&[small(r), d], r, -2.0, 2.0);
            if r.random_bool(0.5) {
                let g = uniform(&[d], r, 0.5, 1.5);
                let b = uniform(&[d], r, -0.5, 0.5);
                Case::projected(vec![x, g, b], seed, |t, v| {
                    t.layer_norm(v[0], Some((v[1], v[2])), 1e-5)
                })
            } else {
                Case::projected(vec![x], seed, |t, v| t.layer_norm(v[0], None, 1e-5))
            }
        }
        "softmax_log" => {
            let x = uniform(&[small(r), r.random_range(2..=5usize)], r, -2.0, 2.0);
            Case::projected(vec![x], seed, |t, v| t.log_softmax(v[0]))
        }
        "relu" | "abs" | "square" | "sigmoid" | "tanh" | "swish" => {
            let x = away_from_zero(&[small(r), small(r)], r);
            let name = name.to_string();
            Case::projected(vec![x], seed, move |t, v| {
                t.apply_primitive(&name, v, &Default::default())
            })
        }
        "leaky_relu" => {
            let x = away_from_zero(&[small(r), small(r)], r);
            let slope = r.random_range(0.01..0.3);
            Case::projected(vec![x], seed, move |t, v| t.leaky_relu(v[0], slope))
        }
        "sqrt" | "log" => {
            let x = uniform(&[small(r), small(r)], r, 0.3, 2.0);
            let name = name.to_string();
            Case::projected(vec![x], seed, move |t, v| {
                t.apply_primitive(&name, v, &Default::default())
            })
        }
        "sum" | "mean" => {
            let x = uniform(&[small(r), small(r)], r, -1.0, 1.0);
            let name = name.to_string();
            Case {
                inputs: vec![x],
                f: Box::new(move |t, v| {
                    let sq = t.square(v[0])?;
                    t.apply_primitive(&name, &[sq], &Default::default())
                }),
            }
        }
        "mean_over_axis" | "variance_over_axis" => {
            let shape = [small(r), r.random_range(2..=4usize), small(r)];
            let axis = r.random_range(0..3usize);
            let mut x = uniform(&shape, r, -1.0, 1.0);
            if shape[axis] == 1 {
                x = uniform(&[shape[0], 3, shape[2]], r, -1.0, 1.0);
            }
            let variance = name == "variance_over_axis";
            Case::projected(vec![x], seed, move |t, v| {
                if variance {
                    t.variance_over_axis(v[0], axis)
                } else {
                    t.mean_over_axis(v[0], axis)
                }
            })
        }
        "concat" => {
            let axis = r.random_range(0..2usize);
            let n = r.random_range(2..=3usize);
            let other = small(r);
            let inputs: Vec<_> = (0..n)
                .map(|_| {
                    let own = small(r);
                    let shape = if axis == 0 {
                        [own, other]
                    } else {
                        [other, own]
                    };
                    uniform(&shape, r, -1.0, 1.0)
                })
                .collect();
            Case::projected(inputs, seed, move |t, v| t.concat(v, axis))
        }
        "slice" => {
            let shape = [r.random_range(2..=4usize), r.random_range(2..=4usize)];
            let axis = r.random_range(0..2usize);
            let start = r.random_range(0..shape[axis] - 1);
            let end = r.random_range(start + 1..=shape[axis]);
            let x = uniform(&shape, r, -1.0, 1.0);
            Case::projected(vec![x], seed, move |t, v| t.slice(v[0], axis, start, end))
        }
        "reshape" => {
            let (a, b) = (small(r), small(r));
            let x = uniform(&[a, b], r, -1.0, 1.0);
            Case::projected(vec![x], seed, move |t, v| t.reshape(v[0], &[b, a]))
        }
        "swap_last" => {
            let shape = [small(r), small(r), small(r)];
            let x = uniform(&shape, r, -1.0, 1.0);
            Case::projected(vec![x], seed, |t, v| t.swap_last(v[0]))
        }
        "expand" => {
            let (lead, d) = (small(r), small(r));
            let x = uniform(&[d], r, -1.0, 1.0);
            Case::projected(vec![x], seed, move |t, v| t.expand(v[0], &[lead, d]))
        }
        "pad_right" => {
            let n = r.random_range(0..=3usize);
            let x = uniform(&[small(r), small(r)], r, -1.0, 1.0);
            Case::projected(vec![x], seed, move |t, v| t.pad_right(v[0], n))
        }
        "embedding_lookup" => {
            let (rows, d) = (small(r) + 1, small(r));
            let idx: Vec<usize> = (0..r.random_range(1..=5usize))
                .map(|_| r.random_range(0..rows))
                .collect();
            let x = uniform(&[rows, d], r, -1.0, 1.0);
            Case::projected(vec![x], seed, move |t, v| t.embedding_lookup(v[0], &idx))
        }
        "pick" => {
            let (b, c) = (small(r), r.random_range(2..=5usize));
            let idx: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
            let x = uniform(&[b, c], r, -1.0, 1.0);
            Case::projected(vec![x], seed, move |t, v| t.pick(v[0], &idx))
        }
        "scaled_dot_attention" => {
            let heads = r.random_range(1..=2usize);
            let d = heads * r.random_range(1..=3usize);
            let s = r.random_range(1..=4usize);
            let segs = r.random_range(1..=2usize);
            let q = uniform(&[segs * s, d], r, -1.0, 1.0);
            let k = uniform(&[segs * s, d], r, -1.0, 1.0);
            let v = uniform(&[segs * s, d], r, -1.0, 1.0);
            Case::projected(vec![q, k, v], seed, move |t, x| {
                t.attention(x[0], x[1], x[2], heads, Some(s))
            })
        }
        "avg_pool1d" => {
            let kernel = r.random_range(1..=4usize);
            let stride = r.random_range(1..=2usize);
            let padding = r.random_range(0..=kernel / 2);
            let len = kernel + r.random_range(0..=4usize);
            let x = uniform(&[1, small(r), len], r, -1.0, 1.0);
            Case::projected(vec![x], seed, move |t, v| {
                t.avg_pool1d(v[0], kernel, stride, padding)
            })
        }
        "ctc_loss" => {
            let n_sym = r.random_range(2..=4usize);
            let vocab = n_sym - 1;
            let n_labels = r.random_range(0..=3usize);
            let labels: Vec<usize> = (0..n_labels).map(|_| r.random_range(0..vocab)).collect();
            let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
            let frames = (labels.len() + repeats).max(1) + r.random_range(0..=3usize);
            let x = uniform(&[frames, n_sym], r, -1.5, 1.5);
            let blank = vocab;
            Case {
                inputs: vec![x],
                f: Box::new(move |t, v| {
                    let lp = t.log_softmax(v[0])?;
                    t.ctc(lp, &labels, blank)
                }),
            }
        }
        "log_mel" => {
            let cfg = FeatureConfig {
                sample_rate: 1600,
                frame_len: 16,
                hop: 8,
                n_fft: 16,
                n_mels: 4,
                log_floor: 1e-10,
            };
            let front = Arc::new(MelFrontEnd::<f64>::new(&cfg)?);
            let len = 16 + 8 * r.random_range(0..=2usize);
            let x = uniform(&[len], r, -1.0, 1.0);
            Case::projected(vec![x], seed, move |t, v| t.log_mel(v[0], &front))
        }
        "grad_reverse" => {
            return Err(Error::invalid(
                "grad_reverse is not a finite-difference target; see grad_reverse_scaling",
            ))
        }
        other => return Err(Error::UnknownPrimitive(other.to_string())),
    };
    Ok(case)
}

/// Finite-difference check of one catalog primitive on a random instance
/// drawn from `seed`. `grad_reverse` is compared against `-alpha` times the
/// finite difference of its (identity) forward map.
pub fn check_primitive(name: &str, seed: u64) -> Result<f64> {
    if name == "grad_reverse" {
        return grad_reverse_scaling(seed);
    }
    let case = build_case(name, seed)?;
    let mut best = f64::INFINITY;
    for eps in FD_LADDER {
        let err = finite_difference_check(&case.f, &case.inputs, eps)?;
        best = best.min(if err.is_nan() { f64::INFINITY } else { err });
    }
    Ok(best)
}

/// Worst error of AD gradients through `grad_reverse(x, alpha)` against
/// `-alpha` times finite differences of the same function.
pub fn grad_reverse_scaling(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = rng.random_range(0.05..2.0);
    let x = uniform(&[rng.random_range(1..=5usize)], &mut rng, -1.0, 1.0);
    let f = move |t: &mut Tape<f64>, v: Var, reverse: bool| -> Result<Var> {
        let y = if reverse {
            t.grad_reverse(v, alpha)?
        } else {
            v
        };
        let sq = t.tanh(y)?;
        project(t, sq, seed)
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv, true)?;
    let ad = tape.backward(out)?.wrt(xv).expect("leaf").to_f64_vec();
    let fd = finite_difference_gradient(
        |xs| {
            let mut t = Tape::new();
            let v = t.constant(xs.clone());
            let o = f(&mut t, v, false)?;
            Ok(t.value(o).item())
        },
        &x,
    )?;
    let expected: Vec<f64> = fd.iter().map(|g| -alpha * g).collect();
    Ok(max_relative_error(&ad, &expected))
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn finite_difference_gradient(
    f: impl Fn(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for j in 0..x.numel() {
        let orig = x.data()[j];
        probe.data_mut()[j] = orig + FD_EPS;
        let up = f(&probe)?;
        probe.data_mut()[j] = orig - FD_EPS;
        let down = f(&probe)?;
        probe.data_mut()[j] = orig;
        out.push((up - down) / (2.0 * FD_EPS));
    }
    Ok(out)
}

/// Outcome of the primitive suite for one primitive.
#[derive(Clone, Debug)]
pub struct PrimitiveReport {
    pub name: &'static str,
    pub worst: f64,
    pub cases: usize,
}

/// Runs every catalog primitive over `seeds` random instances.
pub fn primitive_suite(seeds: u64) -> Result<Vec<PrimitiveReport>> {
    CATALOG
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let mut worst = 0.0f64;
            for s in 0..seeds {
                let err = check_primitive(name, (i as u64) << 32 | s)?;
                worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
            }
            Ok(PrimitiveReport {
                name,
                worst,
                cases: seeds as usize,
            })
        })
        .collect()
}

/// `-ln P(labels | log_probs)` by summing over every length-`T` path whose
/// collapse (merge repeats, drop blanks) equals `labels`.
pub fn ctc_brute_force(log_probs: &Tensor<f64>, labels: &[usize], blank: usize) -> f64 {
    let (t, c) = (log_probs.shape()[0], log_probs.shape()[1]);
    let mut path = vec![0usize; t];
    let mut terms = Vec::new();
    loop {
        if collapse(&path, blank) == labels {
            terms.push(
                (0..t)
                    .map(|i| log_probs.data()[i * c + path[i]])
                    .sum::<f64>(),
            );
        }
        // Odometer increment over all c^t paths.
        let mut i = 0;
        loop {
            if i == t {
                return if terms.is_empty() {
                    f64::INFINITY
                } else {
                    -log_sum_exp(terms)
                };
            }
            path[i] += 1;
            if path[i] < c {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

fn all_sequences(vocab: usize, len: usize) -> Vec<Vec<usize>> {
    let mut seqs = vec![Vec::new()];
    for _ in 0..len {
        seqs = seqs
            .into_iter()
            .flat_map(|s| {
                (0..vocab).map(move |k| {
                    let mut n = s.clone();
                    n.push(k);
                    n
                })
            })
            .collect();
    }
    seqs
}

/// Summary of the exhaustive CTC comparison.
#[derive(Clone, Debug)]
pub struct CtcOracleReport {
    pub instances: usize,
    pub infeasible: usize,
    pub max_abs_diff: f64,
}

/// Compares the dynamic program with enumeration for every `T <= max_t`,
/// vocabulary size `<= max_v` and label sequence of length `<= max_labels`,
/// on random normalized log-probabilities.
pub fn ctc_oracle_suite(
    max_t: usize,
    max_v: usize,
    max_labels: usize,
    seed: u64,
) -> Result<CtcOracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CtcOracleReport {
        instances: 0,
        infeasible: 0,
        max_abs_diff: 0.0,
    };
    for v in 1..=max_v {
        for t in 1..=max_t {
            for len in 0..=max_labels {
                for labels in all_sequences(v, len) {
                    let raw = uniform(&[t, v + 1], &mut rng, -2.0, 2.0);
                    let mut tape = Tape::new();
                    let x = tape.constant(raw);
                    let lp = tape.log_softmax(x)?;
                    let lp_val = tape.value(lp).clone();
                    let dp = tape.ctc(lp, &labels, v)?;
                    let dp = tape.value(dp).item();
                    let brute = ctc_brute_force(&lp_val, &labels, v);
                    report.instances += 1;
                    if brute.is_infinite() {
                        report.infeasible += 1;
                        if dp != f64::INFINITY {
                            report.max_abs_diff = f64::INFINITY;
                        }
                        continue;
                    }
                    report.max_abs_diff = report.max_abs_diff.max((dp - brute).abs());
                }
            }
        }
    }
    Ok(report)
}

/// Outcome of one reversal check.
#[derive(Clone, Debug)]
pub struct GrlOracleReport {
    pub tap: usize,
    pub alpha: f64,
    pub lambda: f64,
    /// Worst relative error over parameters upstream of the reversal.
    pub upstream: f64,
    /// Worst relative error over every other parameter.
    pub downstream: f64,
    /// Task log-probabilities equal bitwise with and without the branch.
    pub forward_identical: bool,
}

/// Checks the composite gradient of `L_y + λ·L_d`, with the speaker branch
/// behind `grad_reverse(·, α)`, against gradients of the two losses taken in
/// separate passes: upstream parameters must see `g_task - α·λ·g_speaker`,
/// the speaker head `λ·g_speaker`, everything else `g_task`.
pub fn grl_dual_backward(seed: u64) -> Result<GrlOracleReport> {
    use std::collections::BTreeSet;

    use crate::losses::{batch_ctc_loss, combined_loss, cross_entropy};
    use crate::models::{AsrModel, EncoderConfig, GrlConfig, Init, ParamGroup, ParamStore};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        n_mels: 8,
        model_dim: 8,
        n_blocks: 4,
        n_heads: 2,
        conv_kernel: 3,
        ff_mult: 2,
    };
    let grl = GrlConfig {
        tap_layer: rng.random_range(1..=cfg.n_blocks),
        alpha: rng.random_range(0.1..2.0),
        lambda: rng.random_range(0.05..1.0),
    };
    let (vocab, n_spk, batch, frames) = (3, 3, 3, 8);
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(seed);
    let mut model = AsrModel::new(&mut store, &mut init, &cfg, vocab)?;
    let plain = model.clone();
    model.attach_speaker_branch(&mut store, &mut init, grl, n_spk)?;
    let feats = uniform(&[batch, frames, cfg.n_mels], &mut rng, -2.0, 2.0);
    let labels: Vec<Vec<usize>> = (0..batch)
        .map(|_| {
            (0..rng.random_range(1..=2usize))
                .map(|_| rng.random_range(0..vocab))
                .collect()
        })
        .collect();
    let speakers: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n_spk)).collect();
    let label_refs: Vec<&[usize]> = labels.iter().map(Vec::as_slice).collect();

    #[derive(Clone, Copy, PartialEq)]
    enum Pass {
        Combined,
        Task,
        Speaker,
    }
    let run = |pass: Pass| -> Result<(Vec<Vec<f64>>, Tensor<f64>)> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(feats.clone());
        let out = if pass == Pass::Speaker {
            model.forward_unreversed(&mut tape, &p, x, &BTreeSet::new())?
        } else {
            model.forward(&mut tape, &p, x, &BTreeSet::new())?
        };
        let (l_y, _) = batch_ctc_loss(&mut tape, out.log_probs, out.enc.frames, &label_refs)?;
        let l_d = cross_entropy(
            &mut tape,
            out.speaker_logits.expect("branch attached"),
            &speakers,
        )?;
        let loss = match pass {
            Pass::Combined => combined_loss(&mut tape, l_y, l_d, grl.lambda)?,
            Pass::Task => l_y,
            Pass::Speaker => l_d,
        };
        let lp = tape.value(out.log_probs).clone();
        let grads = tape.backward(loss)?;
        let per_param = store
            .ids()
            .map(|id| grads.params().get(id).expect("bound").to_f64_vec())
            .collect();
        Ok((per_param, lp))
    };
    let (combined, lp_branch) = run(Pass::Combined)?;
    let (task, _) = run(Pass::Task)?;
    let (speaker, _) = run(Pass::Speaker)?;

    let plain_lp = {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(feats.clone());
        let out = plain.forward(&mut tape, &p, x, &BTreeSet::new())?;
        tape.value(out.log_probs).clone()
    };

    let scale = grl.alpha * grl.lambda;
    let floor = 1e-6
        * task
            .iter()
            .chain(&speaker)
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()));
    let (mut upstream, mut downstream) = (0.0f64, 0.0f64);
    for (id, name, _) in store.iter() {
        let i = id.0;
        let group = ParamGroup::of(name, grl.tap_layer);
        // Each coordinate is (task term, speaker term); the error is measured
        // against the larger of the two so cancellation between them does
        // not inflate it. Structural zeros (attention key biases) carry only
        // roundoff, hence the floor relative to the largest gradient entry.
        let parts: Vec<(f64, f64)> = match group {
            ParamGroup::Extractor => task[i]
                .iter()
                .zip(&speaker[i])
                .map(|(t, s)| (*t, -scale * s))
                .collect(),
            ParamGroup::Speaker => speaker[i].iter().map(|s| (0.0, grl.lambda * s)).collect(),
            ParamGroup::Encoder | ParamGroup::Task => task[i].iter().map(|t| (*t, 0.0)).collect(),
        };
        let err = combined[i]
            .iter()
            .zip(&parts)
            .map(|(c, (t, s))| (c - (t + s)).abs() / t.abs().max(s.abs()).max(floor))
            .fold(0.0, f64::max);
        if group == ParamGroup::Extractor {
            upstream = upstream.max(err);
        } else {
            downstream = downstream.max(err);
        }
    }
    let forward_identical = lp_branch
        .data()
        .iter()
        .zip(plain_lp.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    Ok(GrlOracleReport {
        tap: grl.tap_layer,
        alpha: grl.alpha,
        lambda: grl.lambda,
        upstream,
        downstream,
        forward_identical,
    })
}

/// Finite-difference check of the full combined objective. The reversal is
/// invisible to finite differences, so the reference is assembled from
/// separate differences of `L_y` and `L_d`: `FD(L_y) - α·λ·FD(L_d)` upstream
/// of the tap and `λ·FD(L_d)` on the speaker head. Checked on the extractor
/// frontend weights and a speaker-head weight.
pub fn combined_loss_fd(seed: u64) -> Result<f64> {
    use std::collections::BTreeSet;

    use crate::losses::{batch_ctc_loss, combined_loss, cross_entropy};
    use crate::models::{AsrModel, EncoderConfig, GrlConfig, Init, ParamStore};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        n_mels: 4,
        model_dim: 4,
        n_blocks: 2,
        n_heads: 1,
        conv_kernel: 3,
        ff_mult: 1,
    };
    let grl = GrlConfig {
        tap_layer: rng.random_range(1..=2usize),
        alpha: 0.3,
        lambda: 0.7,
    };
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(seed);
    let mut model = AsrModel::new(&mut store, &mut init, &cfg, 2)?;
    model.attach_speaker_branch(&mut store, &mut init, grl, 2)?;
    let feats = uniform(&[2, 6, cfg.n_mels], &mut rng, -2.0, 2.0);
    let labels: [&[usize]; 2] = [&[0], &[1, 0]];
    let speakers = [1usize, 0];

    // Which objective to evaluate: 0 combined, 1 task only, 2 speaker only.
    let objective =
        |store: &ParamStore<f64>, which: u8, grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let x = tape.constant(feats.clone());
            let out = model.forward(&mut tape, &p, x, &BTreeSet::new())?;
            let (l_y, _) = batch_ctc_loss(&mut tape, out.log_probs, out.enc.frames, &labels)?;
            let l_d = cross_entropy(&mut tape, out.speaker_logits.expect("attached"), &speakers)?;
            let loss = match which {
                0 => combined_loss(&mut tape, l_y, l_d, grl.lambda)?,
                1 => l_y,
                _ => l_d,
            };
            let value = tape.value(loss).item();
            if !grads {
                return Ok((value, Vec::new()));
            }
            let g = tape.backward(loss)?;
            Ok((
                value,
                store
                    .ids()
                    .map(|id| g.params().get(id).expect("bound").to_f64_vec())
                    .collect(),
            ))
        };
    let (_, ad) = objective(&store, 0, true)?;
    let targets = [
        (store.id("enc.front.w").expect("frontend"), true),
        (store.id("spk.out.w").expect("speaker head"), false),
    ];
    let mut worst = 0.0f64;
    for (id, upstream) in targets {
        let base = store.get(id).clone();
        let fd_of = |which: u8| {
            finite_difference_gradient(
                |w| {
                    let mut s = store.clone();
                    *s.get_mut(id) = w.clone();
                    Ok(objective(&s, which, false)?.0)
                },
                &base,
            )
        };
        let fd_task = fd_of(1)?;
        let fd_spk = fd_of(2)?;
        let reference: Vec<f64> = fd_task
            .iter()
            .zip(&fd_spk)
            .map(|(t, s)| {
                if upstream {
                    t - grl.alpha * grl.lambda * s
                } else {
                    t + grl.lambda * s
                }
            })
            .collect();
        worst = worst.max(max_relative_error(&ad[id.0], &reference));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_rules() {
        assert_eq!(collapse(&[0, 0, 2, 1], 2), vec![0, 1]);
        assert_eq!(collapse(&[0, 2, 0], 2), vec![0, 0]);
        assert!(collapse(&[2, 2], 2).is_empty());
    }

    #[test]
    fn brute_force_matches_hand_counts() {
        let half = Tensor::from_f64([2, 2], &[0.5f64.ln(); 4]).unwrap();
        assert!((ctc_brute_force(&half, &[0], 1) - -(0.75f64.ln())).abs() < 1e-15);
        assert!((ctc_brute_force(&half, &[], 1) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(ctc_brute_force(&half, &[0, 0], 1), f64::INFINITY);
    }

    #[test]
    fn ctc_matches_enumeration_exhaustively() {
        let r = ctc_oracle_suite(6, 3, 3, 1).unwrap();
        assert!(r.instances > 0 && r.infeasible > 0);
        assert!(r.max_abs_diff < 1e-10, "{r:?}");
    }

    #[test]
    fn reversal_oracle_holds() {
        for seed in 0..5 {
            let r = grl_dual_backward(seed).unwrap();
            assert!(r.forward_identical);
            assert!(r.upstream < 1e-10 && r.downstream < 1e-10, "{r:?}");
        }
    }

    #[test]
    fn combined_objective_passes_finite_differences() {
        let err = combined_loss_fd(3).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn every_catalog_entry_has_a_case() {
        for name in CATALOG {
            check_primitive(name, 0).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
