//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion.
//!
//! The suite always exits 0 so that a criterion that cannot be met at this
//! scale is reported rather than hidden; set `ANONLAB_ACCEPTANCE_STRICT=1` to
//! turn any `FAIL` into a nonzero exit.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anonlab_core::evaluation::{
    entropy, make_report, mi_difference_report, mutual_information, recognizer_ter, MiConfig,
    ProbeRecord, RunResult, WavePair,
};
use anonlab_core::losses::{feature_matching, mel_l1};
use anonlab_core::models::{
    Checkpoint, DiscriminatorEnsemble, EncoderConfig, GrlConfig, Init, ParamStore,
};
use anonlab_core::synthdata::{generate, Corpus, CorpusConfig, FeatureConfig, MelFrontEnd, Split};
use anonlab_core::training::{
    featurize, resynthesize_utterances, train_probe, train_stage1, train_synth, ProbeConfig,
    SynthOutcome, SynthTrainConfig, TrainConfig,
};
use anonlab_core::{verify, Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;
const REQUIRED_SEEDS: usize = 4;
/// Stage-1 length for the trend criteria; the suite runs on one core.
const STAGE1_STEPS: usize = 1000;
const GRL_TAP: usize = 3;
const STRICT_ENV: &str = "ANONLAB_ACCEPTANCE_STRICT";

type Res<T> = anonlab_core::Result<T>;

struct Verdict {
    pass: bool,
    summary: String,
}

fn verdict(pass: bool, summary: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        summary: summary.into(),
    }
}

fn within(elapsed: Duration, secs: u64) -> bool {
    elapsed <= Duration::from_secs(secs)
}

struct Data {
    corpus: Corpus,
    feats: Vec<Tensor<f32>>,
}

impl Data {
    fn new() -> Res<Data> {
        let corpus = generate(&CorpusConfig::default())?;
        let feats = featurize(&corpus, &FeatureConfig::default())?;
        Ok(Data { corpus, feats })
    }

    fn ter(&self, ckpt: &Checkpoint, split: Split) -> Res<f64> {
        let (model, store) = ckpt.asr_model()?;
        let refs: Vec<&[usize]> = self
            .corpus
            .utterances
            .iter()
            .map(|u| u.tokens.as_slice())
            .collect();
        recognizer_ter(
            &model,
            &store,
            &self.feats,
            &refs,
            &self.corpus.split_indices(split),
        )
    }

    fn stage1(&self, grl: Option<GrlConfig>, cfg: &TrainConfig) -> Res<Checkpoint> {
        Ok(train_stage1(
            &self.corpus,
            &self.feats,
            &EncoderConfig::default(),
            grl,
            cfg,
        )?
        .checkpoint)
    }

    fn synth(&self, ckpt: &Checkpoint, cfg: &SynthTrainConfig) -> Res<SynthOutcome> {
        let train = self.corpus.balanced_subset(Split::Train, 20);
        let heldout = self.corpus.split_indices(Split::TestAdv);
        train_synth(
            ckpt,
            GRL_TAP,
            &self.corpus,
            &self.feats,
            &train,
            &heldout,
            cfg,
        )
    }
}

fn grl() -> GrlConfig {
    GrlConfig {
        tap_layer: GRL_TAP,
        alpha: 0.5,
        lambda: 0.5,
    }
}

fn criterion_1() -> Res<Verdict> {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut identical = true;
    for seed in 0..20 {
        let r = verify::grl_dual_backward(seed)?;
        worst = worst.max(r.upstream).max(r.downstream);
        identical &= r.forward_identical;
    }
    let el = t.elapsed();
    Ok(verdict(
        identical && worst < 1e-10 && within(el, 60),
        format!("reversal: forward identical {identical}, worst relative error {worst:.2e} over 20 seeds ({el:.1?})"),
    ))
}

fn criterion_2() -> Res<Verdict> {
    let t = Instant::now();
    let prims = verify::primitive_suite(3)?;
    let (mut worst, mut name) = (0.0f64, String::new());
    for p in &prims {
        if p.worst >= worst {
            worst = p.worst;
            name = p.name.to_string();
        }
    }
    let mut combined = 0.0f64;
    for seed in 0..3 {
        combined = combined.max(verify::combined_loss_fd(seed)?);
    }
    let el = t.elapsed();
    Ok(verdict(
        worst < 1e-6 && combined < 1e-6 && within(el, 120),
        format!(
            "finite differences: {} primitives worst {worst:.2e} ({name}), combined objective {combined:.2e} ({el:.1?})",
            prims.len()
        ),
    ))
}

fn criterion_3() -> Res<Verdict> {
    let t = Instant::now();
    let r = verify::ctc_oracle_suite(6, 3, 3, 0)?;
    let el = t.elapsed();
    Ok(verdict(
        r.max_abs_diff < 1e-10 && within(el, 60),
        format!(
            "ctc enumeration: {} instances, max |diff| {:.2e} ({el:.1?})",
            r.instances, r.max_abs_diff
        ),
    ))
}

/// One seed of the baseline-versus-adversarial comparison.
struct SeedRun {
    seed: u64,
    base: Checkpoint,
    adv: Checkpoint,
    base_tap: f64,
    adv_tap: f64,
    adv_deeper: f64,
    ter_base: f64,
    ter_adv: f64,
    elapsed: Duration,
}

impl SeedRun {
    fn gap(&self) -> f64 {
        self.base_tap - self.adv_tap
    }

    /// Relative TER degradation of at least 10% (a zero baseline tolerates no increase).
    fn degraded(&self) -> bool {
        self.ter_adv > self.ter_base
            && (self.ter_base == 0.0 || (self.ter_adv - self.ter_base) / self.ter_base >= 0.1)
    }

    fn trend(&self) -> bool {
        self.gap() >= 0.15 && !self.degraded() && within(self.elapsed, 600)
    }

    fn depth(&self) -> bool {
        self.adv_deeper <= self.adv_tap + 0.05
    }
}

fn seed_run(data: &Data, seed: u64) -> Res<SeedRun> {
    let t = Instant::now();
    let cfg = TrainConfig {
        steps: STAGE1_STEPS,
        seed,
        ..TrainConfig::default()
    };
    let base = data.stage1(None, &cfg)?;
    let adv = data.stage1(Some(grl()), &cfg)?;
    let probe = ProbeConfig::default();
    let acc = |c: &Checkpoint, tap| {
        Ok::<_, Error>(train_probe(c, tap, &data.corpus, &data.feats, &probe)?.accuracy)
    };
    let run = SeedRun {
        seed,
        base_tap: acc(&base, GRL_TAP)?,
        adv_tap: acc(&adv, GRL_TAP)?,
        adv_deeper: acc(&adv, GRL_TAP + 2)?,
        ter_base: data.ter(&base, Split::Dev)?,
        ter_adv: data.ter(&adv, Split::Dev)?,
        base,
        adv,
        elapsed: t.elapsed(),
    };
    println!(
        "  seed {seed}: tap {GRL_TAP} probe {:.3} -> {:.3} (gap {:+.3}), tap {} probe {:.3}, dev TER {:.4} -> {:.4} ({:.0?})",
        run.base_tap,
        run.adv_tap,
        run.gap(),
        GRL_TAP + 2,
        run.adv_deeper,
        run.ter_base,
        run.ter_adv,
        run.elapsed
    );
    Ok(run)
}

fn criterion_4(runs: &[SeedRun]) -> Verdict {
    let ok = runs.iter().filter(|r| r.trend()).count();
    verdict(
        ok >= REQUIRED_SEEDS,
        format!(
            "anonymization trend: {ok}/{} seeds with gap >= 15 points and no TER degradation",
            runs.len()
        ),
    )
}

fn criterion_5(runs: &[SeedRun]) -> Verdict {
    let ok = runs.iter().filter(|r| r.depth()).count();
    verdict(
        ok >= REQUIRED_SEEDS,
        format!(
            "depth trend: {ok}/{} seeds with tap {} probe <= tap {GRL_TAP} probe + 5 points",
            runs.len(),
            GRL_TAP + 2
        ),
    )
}

fn criterion_6(data: &Data) -> Res<Verdict> {
    let mut tripped = 0;
    let mut weak_tripped = 0;
    for seed in 0..SEEDS {
        let strong = GrlConfig {
            tap_layer: GRL_TAP,
            alpha: 50.0,
            lambda: 1.0,
        };
        let cfg = TrainConfig {
            steps: 500,
            seed,
            ..TrainConfig::default()
        };
        let note = match data.stage1(Some(strong), &cfg) {
            Err(Error::Diverged { step, .. }) => {
                tripped += 1;
                format!("tripped at step {step}")
            }
            Err(e) => return Err(e),
            Ok(c) => format!("ran 500 steps, dev TER {:.4}", data.ter(&c, Split::Dev)?),
        };
        let weak = GrlConfig {
            tap_layer: GRL_TAP,
            alpha: 0.5,
            lambda: 0.05,
        };
        let cfg = TrainConfig {
            steps: STAGE1_STEPS,
            seed,
            ..TrainConfig::default()
        };
        let weak_note = match data.stage1(Some(weak), &cfg) {
            Err(Error::Diverged { step, .. }) => {
                weak_tripped += 1;
                format!("tripped at step {step}")
            }
            Err(e) => return Err(e),
            Ok(_) => "never tripped".to_string(),
        };
        println!("  seed {seed}: alpha 50 / lambda 1 {note}; alpha 0.5 / lambda 0.05 {weak_note}");
    }
    Ok(verdict(
        tripped >= REQUIRED_SEEDS && weak_tripped == 0,
        format!("divergence guard: strong reversal tripped in {tripped}/{SEEDS} seeds, weak reversal in {weak_tripped}/{SEEDS}"),
    ))
}

fn wave_pairs<'a>(corpus: &'a Corpus, idx: &[usize], hats: &'a [Vec<f32>]) -> Vec<WavePair<'a>> {
    idx.iter()
        .zip(hats)
        .map(|(&i, h)| {
            let u = &corpus.utterances[i];
            (u.utt_id.as_str(), u.waveform.as_slice(), h.as_slice())
        })
        .collect()
}

fn criterion_7(
    data: &Data,
    run: Option<&SeedRun>,
    base_synth: &SynthOutcome,
    synth_cfg: &SynthTrainConfig,
) -> Res<Verdict> {
    let mi = MiConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x: Vec<f32> = (0..100_000)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let y: Vec<f32> = (0..100_000)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let self_gap = (mutual_information(&x, &x, &mi)? - entropy(&x, &mi)?).abs();
    let indep = mutual_information(&x, &y, &mi)?;
    let Some(run) = run else {
        return Ok(verdict(
            false,
            "mutual information: no accepted trend run to resynthesize from",
        ));
    };
    let adv_synth = data.synth(&run.adv, synth_cfg)?;
    let idx = data.corpus.split_indices(Split::TestAdv);
    let len = data.corpus.config.utterance_len();
    let base = resynthesize_utterances(&run.base, &base_synth.checkpoint, &data.feats, &idx, len)?;
    let anon = resynthesize_utterances(&run.adv, &adv_synth.checkpoint, &data.feats, &idx, len)?;
    let report = mi_difference_report(
        &wave_pairs(&data.corpus, &idx, &base),
        &wave_pairs(&data.corpus, &idx, &anon),
        &mi,
    )?;
    let mean = report.mean_difference();
    Ok(verdict(
        self_gap < 1e-12 && indep < 0.05 && mean > 0.0,
        format!(
            "mutual information: |I(X,X) - H(X)| {self_gap:.1e}, independent {indep:.4} bits, mean difference {mean:.4} bits over {} utterances (seed {})",
            report.ids.len(),
            run.seed
        ),
    ))
}

fn identity_losses() -> Res<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let wave: Vec<f32> = (0..3200).map(|_| rng.random_range(-0.8f32..0.8)).collect();
    let mut store = ParamStore::<f32>::new();
    let disc = DiscriminatorEnsemble::new(&mut store, &mut Init::new(2))?;
    let front = Arc::new(MelFrontEnd::<f32>::new(&FeatureConfig::default())?);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let real = tape.constant(Tensor::new([1, 3200], wave.clone())?);
    let fake = tape.constant(Tensor::new([1, 3200], wave)?);
    let dr = disc.forward(&mut tape, &p, real)?;
    let df = disc.forward(&mut tape, &p, fake)?;
    let fr: Vec<_> = dr.iter().flat_map(|o| o.features.clone()).collect();
    let ff: Vec<_> = df.iter().flat_map(|o| o.features.clone()).collect();
    let l_fm = feature_matching(&mut tape, &fr, &ff)?;
    let l_mel = mel_l1(&mut tape, real, fake, &front)?;
    Ok((
        f64::from(tape.value(l_mel).item()),
        f64::from(tape.value(l_fm).item()),
    ))
}

fn criterion_8(base_synth: &SynthOutcome) -> Res<Verdict> {
    let (l_mel, l_fm) = identity_losses()?;
    let start = base_synth.heldout_at(50);
    let best = base_synth
        .heldout_mel
        .iter()
        .filter(|(s, _)| *s <= 2000)
        .map(|(_, v)| *v)
        .fold(f64::INFINITY, f64::min);
    let drop = start.map(|s| 1.0 - best / s).unwrap_or(f64::NAN);
    Ok(verdict(
        l_mel == 0.0 && l_fm == 0.0 && drop >= 0.5,
        format!(
            "toy synthesis: held-out mel L1 {:.4} at step 50 -> best {best:.4} (drop {:.1}%), identical inputs give L_mel {l_mel} and L_FM {l_fm}",
            start.unwrap_or(f64::NAN),
            100.0 * drop
        ),
    ))
}

/// Everything a short pipeline run persists, as bytes.
fn pipeline_bytes(data: &Data) -> Res<Vec<Vec<u8>>> {
    let cfg = TrainConfig {
        steps: 20,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut out = Vec::new();
    let mut runs = Vec::new();
    for (name, g) in [("baseline", None), ("adv", Some(grl()))] {
        let o = train_stage1(
            &data.corpus,
            &data.feats,
            &EncoderConfig::default(),
            g,
            &cfg,
        )?;
        out.push(o.checkpoint.to_bytes()?);
        out.push(o.trace.to_csv().into_bytes());
        let probe = ProbeConfig {
            steps: 50,
            ..ProbeConfig::default()
        };
        let acc = train_probe(&o.checkpoint, GRL_TAP, &data.corpus, &data.feats, &probe)?.accuracy;
        runs.push(RunResult {
            name: name.to_string(),
            grl: g,
            ter_dev: data.ter(&o.checkpoint, Split::Dev)?,
            ter_test: data.ter(&o.checkpoint, Split::TestAdv)?,
            probes: vec![ProbeRecord {
                tap: GRL_TAP,
                accuracy: acc,
            }],
        });
        if g.is_none() {
            let s = data.synth(
                &o.checkpoint,
                &SynthTrainConfig {
                    steps: 4,
                    eval_every: 2,
                    ..SynthTrainConfig::default()
                },
            )?;
            out.push(s.checkpoint.to_bytes()?);
            out.push(format!("{:?}", s.heldout_mel).into_bytes());
        }
    }
    let r = make_report(&runs);
    for text in [
        r.recognition_csv,
        r.recognition_text,
        r.probe_csv,
        r.probe_text,
    ] {
        out.push(text.into_bytes());
    }
    Ok(out)
}

fn criterion_9(data: &Data) -> Res<Verdict> {
    let a = pipeline_bytes(data)?;
    let b = pipeline_bytes(data)?;
    let same = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x == y);
    let total: usize = a.iter().map(Vec::len).sum();
    Ok(verdict(
        same,
        format!(
            "reproducibility: {} artifacts ({total} bytes) identical across two runs: {same}",
            a.len()
        ),
    ))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut verdicts: Vec<(usize, Verdict)> = Vec::new();
    let mut record = |n: usize, v: Result<Verdict, String>| {
        let v = v.unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        println!(
            "{} criterion {n}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.summary
        );
        verdicts.push((n, v));
    };

    record(1, criterion_1().map_err(|e| e.to_string()));
    record(2, criterion_2().map_err(|e| e.to_string()));
    record(3, criterion_3().map_err(|e| e.to_string()));

    let data = match Data::new() {
        Ok(d) => d,
        Err(e) => {
            for n in 4..=9 {
                record(n, Err(e.to_string()));
            }
            return finish(&verdicts, started);
        }
    };
    let mut runs = Vec::new();
    let mut run_err = None;
    for seed in 0..SEEDS {
        match seed_run(&data, seed) {
            Ok(r) => runs.push(r),
            Err(e) => {
                run_err = Some(e);
                break;
            }
        }
    }
    match run_err {
        Some(e) => {
            record(4, Err(e.to_string()));
            record(5, Err(e.to_string()));
        }
        None => {
            record(4, Ok(criterion_4(&runs)));
            record(5, Ok(criterion_5(&runs)));
        }
    }
    record(6, criterion_6(&data).map_err(|e| e.to_string()));

    let accepted = runs.iter().find(|r| r.trend());
    let synth_cfg = SynthTrainConfig::default();
    // The baseline generator is both the criterion-7 reference and the
    // criterion-8 fixture run.
    let source = accepted.or(runs.first());
    let base_synth = match source {
        Some(r) => data.synth(&r.base, &synth_cfg),
        None => data
            .stage1(
                None,
                &TrainConfig {
                    steps: STAGE1_STEPS,
                    ..TrainConfig::default()
                },
            )
            .and_then(|c| data.synth(&c, &synth_cfg)),
    };
    match &base_synth {
        Ok(s) => {
            record(
                7,
                criterion_7(&data, accepted, s, &synth_cfg).map_err(|e| e.to_string()),
            );
            record(8, criterion_8(s).map_err(|e| e.to_string()));
        }
        Err(e) => {
            record(7, Err(e.to_string()));
            record(8, Err(e.to_string()));
        }
    }
    record(9, criterion_9(&data).map_err(|e| e.to_string()));
    finish(&verdicts, started)
}

fn finish(verdicts: &[(usize, Verdict)], started: Instant) -> ExitCode {
    let failed: Vec<String> = verdicts
        .iter()
        .filter(|(_, v)| !v.pass)
        .map(|(n, _)| n.to_string())
        .collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0?}{}",
        verdicts.len() - failed.len(),
        verdicts.len(),
        started.elapsed(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed: {}", failed.join(", "))
        }
    );
    let strict = std::env::var(STRICT_ENV).is_ok_and(|v| v == "1");
    if strict && !failed.is_empty() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
