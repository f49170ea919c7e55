use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::models::GrlConfig;

fn one_hot_path(path: &[usize], classes: usize) -> Tensor<f32> {
    let mut data = vec![-10.0f32; path.len() * classes];
    for (t, &k) in path.iter().enumerate() {
        data[t * classes + k] = 0.0;
    }
    Tensor::new(vec![path.len(), classes], data).unwrap()
}

#[test]
fn greedy_decode_collapses_and_drops_blanks() {
    // blank = 2
    assert_eq!(
        greedy_ctc_decode(&one_hot_path(&[0, 0, 2, 1], 3), 2),
        vec![0, 1]
    );
    assert_eq!(
        greedy_ctc_decode(&one_hot_path(&[2, 2, 2], 3), 2),
        Vec::<usize>::new()
    );
    assert_eq!(
        greedy_ctc_decode(&one_hot_path(&[0, 2, 0], 3), 2),
        vec![0, 0]
    );
}

#[test]
fn greedy_decode_breaks_ties_low() {
    let lp = Tensor::new(vec![1, 3], vec![-1.0f32, -1.0, -1.0]).unwrap();
    assert_eq!(greedy_ctc_decode(&lp, 2), vec![0]);
}

#[test]
fn token_error_rate_examples() {
    assert_eq!(token_error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
    assert_eq!(token_error_rate(&[], &[1, 2, 3, 4]).unwrap(), 1.0);
    assert!((token_error_rate(&[0, 1, 2], &[0, 5, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!(matches!(
        token_error_rate(&[1], &[]),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn speaker_accuracy_is_a_macro_average() {
    assert_eq!(speaker_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
    // Class 0 has nine utterances all right, class 1 one utterance wrong.
    let mut labels = vec![0; 9];
    labels.push(1);
    let mut preds = vec![0; 9];
    preds.push(0);
    assert_eq!(speaker_accuracy(&preds, &labels).unwrap(), 0.5);
    assert!(speaker_accuracy(&[], &[]).is_err());
    assert!(speaker_accuracy(&[0], &[0, 1]).is_err());
}

fn uniform(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// `H(X) + H(Y) - H(X, Y)` from hashed pair counts.
fn mi_by_entropies(x: &[f32], y: &[f32], n_bins: usize) -> f64 {
    let (qx, qy) = (quantize(x, n_bins), quantize(y, n_bins));
    let h = |counts: HashMap<(usize, usize), usize>| {
        let n = x.len() as f64;
        counts
            .values()
            .map(|&c| -(c as f64 / n) * (c as f64 / n).ln())
            .sum::<f64>()
            / std::f64::consts::LN_2
    };
    let mut jx = HashMap::new();
    let mut jy = HashMap::new();
    let mut jxy = HashMap::new();
    for (&a, &b) in qx.iter().zip(&qy) {
        *jx.entry((a, 0)).or_insert(0) += 1;
        *jy.entry((0, b)).or_insert(0) += 1;
        *jxy.entry((a, b)).or_insert(0) += 1;
    }
    h(jx) + h(jy) - h(jxy)
}

#[test]
fn self_information_equals_entropy() {
    let cfg = MiConfig::default();
    let x = uniform(5000, 1);
    let i = mutual_information(&x, &x, &cfg).unwrap();
    let h = entropy(&x, &cfg).unwrap();
    assert!((i - h).abs() < 1e-12, "{i} vs {h}");
}

#[test]
fn independent_noise_carries_little_information() {
    let cfg = MiConfig::default();
    let i = mutual_information(&uniform(100_000, 2), &uniform(100_000, 3), &cfg).unwrap();
    assert!((0.0..0.05).contains(&i), "{i}");
}

#[test]
fn negation_preserves_information() {
    let cfg = MiConfig::default();
    let x = uniform(20_000, 4);
    let y: Vec<f32> = x.iter().map(|v| -v).collect();
    let h = entropy(&x, &cfg).unwrap();
    assert!((mutual_information(&x, &y, &cfg).unwrap() - h).abs() < 0.01);
}

#[test]
fn mi_matches_the_entropy_decomposition() {
    let x = uniform(4000, 5);
    let y: Vec<f32> = x
        .iter()
        .zip(uniform(4000, 6))
        .map(|(a, b)| 0.6 * a + 0.4 * b)
        .collect();
    for bins in [2, 7, 64] {
        let cfg = MiConfig {
            n_bins: bins,
            ..MiConfig::default()
        };
        let a = mutual_information(&x, &y, &cfg).unwrap();
        let b = mi_by_entropies(&x, &y, bins);
        assert!((a - b).abs() < 1e-10, "{bins} bins: {a} vs {b}");
    }
}

#[test]
fn mi_rejects_bad_inputs() {
    let cfg = MiConfig::default();
    assert!(mutual_information(&uniform(1000, 0), &uniform(1001, 0), &cfg).is_err());
    assert!(mutual_information(&uniform(999, 0), &uniform(999, 0), &cfg).is_err());
    let bad = MiConfig {
        n_bins: 1,
        ..MiConfig::default()
    };
    assert!(mutual_information(&uniform(1000, 0), &uniform(1000, 0), &bad).is_err());
}

#[test]
fn quantize_clamps_out_of_range() {
    assert_eq!(
        quantize(&[-2.0, -1.0, 0.0, 0.999, 1.0, 3.0], 4),
        vec![0, 0, 2, 3, 3, 3]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mi_is_symmetric_nonnegative_and_bounded(
        seed in 0u64..1000,
        mix in 0.0f32..1.0,
        bins in 2usize..80,
    ) {
        let x = uniform(1500, seed);
        let y: Vec<f32> = x.iter().zip(uniform(1500, seed + 1)).map(|(a, b)| mix * a + (1.0 - mix) * b).collect();
        let cfg = MiConfig { n_bins: bins, ..MiConfig::default() };
        let xy = mutual_information(&x, &y, &cfg).unwrap();
        let yx = mutual_information(&y, &x, &cfg).unwrap();
        prop_assert!(xy >= -1e-12);
        prop_assert!((xy - yx).abs() < 1e-12);
        let hmin = entropy(&x, &cfg).unwrap().min(entropy(&y, &cfg).unwrap());
        prop_assert!(xy <= hmin + 1e-12);
    }

    #[test]
    fn ter_obeys_the_triangle_bound(
        a in prop::collection::vec(0usize..4, 1..8),
        b in prop::collection::vec(0usize..4, 0..8),
        c in prop::collection::vec(0usize..4, 1..8),
    ) {
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        prop_assert_eq!(token_error_rate(&c, &c).unwrap(), 0.0);
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
    }

    #[test]
    fn accuracy_ignores_relabeling(
        pairs in prop::collection::vec((0usize..5, 0usize..5), 1..40),
        shift in 1usize..5,
    ) {
        let (preds, labels): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let perm = |k: usize| (k + shift) % 5;
        let p2: Vec<_> = preds.iter().map(|&k| perm(k)).collect();
        let l2: Vec<_> = labels.iter().map(|&k| perm(k)).collect();
        let a = speaker_accuracy(&preds, &labels).unwrap();
        let b = speaker_accuracy(&p2, &l2).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn decoding_a_repeat_free_path_is_identity(
        seq in prop::collection::vec(0usize..4, 0..10),
    ) {
        let mut s = seq;
        s.dedup();
        prop_assert_eq!(greedy_ctc_decode(&one_hot_path(&s, 5), 4), s);
    }
}

#[test]
fn identical_models_give_zero_differences() {
    let x = uniform(2000, 7);
    let xh = uniform(2000, 8);
    let pairs: Vec<WavePair> = vec![("u0", &x, &xh), ("u1", &xh, &x)];
    let r = mi_difference_report(&pairs, &pairs, &MiConfig::default()).unwrap();
    assert!(r.differences.iter().all(|&d| d == 0.0));
    assert_eq!(r.histogram.counts.iter().sum::<usize>(), 2);
    assert_eq!(r.mean_difference(), 0.0);
    assert_eq!(r.per_utterance_csv().lines().count(), 3);
    assert_eq!(
        r.curves_csv().lines().next(),
        Some("rank,baseline,anonymized")
    );
    assert_eq!(r.histogram_csv().lines().count(), 21);
}

#[test]
fn mi_report_rejects_mismatches() {
    let x = uniform(2000, 9);
    let cfg = MiConfig::default();
    assert!(mi_difference_report(&[], &[], &cfg).is_err());
    let a: Vec<WavePair> = vec![("u0", &x, &x)];
    let b: Vec<WavePair> = vec![("u1", &x, &x)];
    assert!(mi_difference_report(&a, &b, &cfg).is_err());
    assert!(mi_difference_report(&a, &[], &cfg).is_err());
}

#[test]
fn histogram_counts_every_value() {
    let v = [0.0, 0.1, 0.5, 1.0, -3.0];
    let h = Histogram::of(&v, 4);
    assert_eq!(h.counts.iter().sum::<usize>(), v.len());
    assert_eq!(h.edges.len(), 5);
    assert_eq!(h.counts, vec![1, 0, 0, 4]);
}

fn run(name: &str, grl: Option<GrlConfig>, taps: &[usize]) -> RunResult {
    RunResult {
        name: name.into(),
        grl,
        ter_dev: 0.1,
        ter_test: 0.125,
        probes: taps
            .iter()
            .map(|&tap| ProbeRecord { tap, accuracy: 0.5 })
            .collect(),
    }
}

#[test]
fn single_run_report_has_one_row_per_table() {
    let r = make_report(&[run("baseline", None, &[3])]);
    assert_eq!(
        r.recognition_csv,
        "Model,GRL,α/λ,TER-dev,TER-test\nbaseline,-,-,0.1000,0.1250\n"
    );
    assert_eq!(
        r.probe_csv,
        "Model,GRL,α/λ,AE,SPK-ACC\nbaseline,-,-,3,0.5000\n"
    );
    assert_eq!(r.recognition_text.lines().count(), 3);
    assert!(r.probe_text.starts_with("Model"));
}

#[test]
fn sweep_report_has_a_row_per_combination() {
    let mut runs = Vec::new();
    for tap in [1, 3, 5] {
        for alpha in [0.1, 0.5] {
            for lambda in [0.05, 0.3, 0.5] {
                let g = GrlConfig {
                    tap_layer: tap,
                    alpha,
                    lambda,
                };
                runs.push(run(&format!("adv{tap}"), Some(g), &[tap, tap + 2]));
            }
        }
    }
    let r = make_report(&runs);
    assert_eq!(r.recognition_csv.lines().count(), 1 + 18);
    assert_eq!(r.probe_csv.lines().count(), 1 + 36);
    assert!(r.recognition_csv.contains("adv3,3,0.1/0.3,"));
}
