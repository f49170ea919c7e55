//! One function per subcommand. Every artifact lands under the fixed
//! layout `corpus/`, `ckpt/`, `metrics/`, `reports/` of the output root.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use anonlab_core::evaluation::{
    make_report, mi_difference_report, recognizer_ter, ProbeRecord, RunResult, WavePair,
};
use anonlab_core::models::{Architecture, Checkpoint, GrlConfig};
use anonlab_core::synthdata::{generate, load_corpus, save_corpus, Corpus, Split, CORPUS_MANIFEST};
use anonlab_core::tensor::Tensor;
use anonlab_core::training::{
    featurize, resynthesize_utterances, train_probe, train_stage1, train_synth,
};
use anonlab_core::verify;

use crate::config::{run_name, PipelineConfig};

/// Thread count for sweeps; each grid point itself runs single-threaded.
pub const THREADS_ENV: &str = "ANONLAB_THREADS";

pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout {
            root: root.to_path_buf(),
        }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn ckpt_dir(&self) -> PathBuf {
        self.root.join("ckpt")
    }

    pub fn ckpt(&self, name: &str) -> PathBuf {
        self.ckpt_dir().join(format!("{name}.ckpt"))
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{name}.csv"))
    }

    pub fn report(&self, file: &str) -> PathBuf {
        self.root.join("reports").join(file)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

struct Data {
    corpus: Corpus,
    feats: Vec<Tensor<f32>>,
}

fn load_data(cfg: &PipelineConfig, layout: &Layout) -> Result<Data> {
    let dir = layout.corpus();
    if !dir.join(CORPUS_MANIFEST).exists() {
        bail!(
            "no corpus found at {}; run `anonlab gen-data` first",
            dir.display()
        );
    }
    let corpus =
        load_corpus(&dir).with_context(|| format!("loading corpus from {}", dir.display()))?;
    let feats = featurize(&corpus, &cfg.features)?;
    Ok(Data { corpus, feats })
}

fn load_ckpt(layout: &Layout, name: &str) -> Result<Checkpoint> {
    let path = layout.ckpt(name);
    if !path.exists() {
        bail!(
            "no checkpoint `{name}` at {}; train it first",
            path.display()
        );
    }
    Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn gen_data(cfg: &PipelineConfig) -> Result<()> {
    let layout = Layout::new(&cfg.output.dir);
    let corpus = generate(&cfg.corpus)?;
    save_corpus(&layout.corpus(), &corpus)?;
    cfg.echo(&layout.corpus().join("config.toml"))?;
    eprintln!(
        "wrote {} utterances of {} speakers to {}",
        corpus.utterances.len(),
        corpus.n_speakers(),
        layout.corpus().display()
    );
    Ok(())
}

/// Trains one recognizer and writes its checkpoint, metrics and config.
fn train_one(
    cfg: &PipelineConfig,
    layout: &Layout,
    data: &Data,
    grl: Option<GrlConfig>,
) -> Result<String> {
    let name = run_name(grl.as_ref());
    let out = train_stage1(&data.corpus, &data.feats, &cfg.encoder, grl, &cfg.train)
        .with_context(|| format!("training `{name}`"))?;
    out.checkpoint.save(&layout.ckpt(&name))?;
    out.trace
        .write_csv(&layout.metrics(&name))
        .with_context(|| format!("writing metrics of `{name}`"))?;
    cfg.echo(&layout.ckpt_dir().join(format!("{name}.config.toml")))?;
    let last = out.trace.last().expect("at least one step");
    eprintln!(
        "{name}: {} steps, final L_y {:.4}, {} rejected steps",
        last.step, last.l_y, out.rejected_steps
    );
    Ok(name)
}

pub fn train(cfg: &PipelineConfig, adversarial: bool) -> Result<()> {
    let layout = Layout::new(&cfg.output.dir);
    let data = load_data(cfg, &layout)?;
    let grl = adversarial.then(|| cfg.grl.get());
    train_one(cfg, &layout, &data, grl)?;
    Ok(())
}

fn probe_one(
    cfg: &PipelineConfig,
    layout: &Layout,
    data: &Data,
    name: &str,
    taps: &[usize],
) -> Result<Vec<ProbeRecord>> {
    let ckpt = load_ckpt(layout, name)?;
    let mut records = Vec::new();
    for &tap in taps {
        let r = train_probe(&ckpt, tap, &data.corpus, &data.feats, &cfg.probe.settings)
            .with_context(|| format!("probing `{name}` at tap {tap}"))?;
        eprintln!("{name}: tap {tap} speaker accuracy {:.4}", r.accuracy);
        records.push(ProbeRecord {
            tap,
            accuracy: r.accuracy,
        });
    }
    let mut csv = String::from("tap,accuracy\n");
    for r in &records {
        writeln!(csv, "{},{}", r.tap, r.accuracy).expect("writing to a String");
    }
    write(&layout.report(&format!("probe-{name}.csv")), csv)?;
    write(
        &layout.report(&format!("probe-{name}.json")),
        serde_json::to_string_pretty(&records)?,
    )?;
    cfg.echo(&layout.report(&format!("probe-{name}.config.toml")))?;
    Ok(records)
}

pub fn probe(cfg: &PipelineConfig) -> Result<()> {
    let layout = Layout::new(&cfg.output.dir);
    let data = load_data(cfg, &layout)?;
    probe_one(cfg, &layout, &data, &cfg.probe.model, &cfg.probe.taps)?;
    Ok(())
}

pub fn train_synth_cmd(cfg: &PipelineConfig) -> Result<()> {
    let layout = Layout::new(&cfg.output.dir);
    let data = load_data(cfg, &layout)?;
    let name = &cfg.synth.model;
    let ckpt = load_ckpt(&layout, name)?;
    let train = data
        .corpus
        .balanced_subset(Split::Train, cfg.synth.train_utterances);
    let heldout = data.corpus.split_indices(Split::TestAdv);
    let out = train_synth(
        &ckpt,
        cfg.synth.tap,
        &data.corpus,
        &data.feats,
        &train,
        &heldout,
        &cfg.synth.settings,
    )
    .with_context(|| format!("training the generator on `{name}`"))?;
    let synth_name = format!("synth-{name}");
    out.checkpoint.save(&layout.ckpt(&synth_name))?;
    let mut csv = String::from("step,l_g,l_d\n");
    for (s, g, d) in &out.losses {
        writeln!(csv, "{s},{g},{d}").expect("writing to a String");
    }
    write(&layout.metrics(&synth_name), csv)?;
    let mut csv = String::from("step,heldout_mel_l1\n");
    for (s, v) in &out.heldout_mel {
        writeln!(csv, "{s},{v}").expect("writing to a String");
    }
    write(&layout.metrics(&format!("{synth_name}-heldout")), csv)?;
    cfg.echo(&layout.ckpt_dir().join(format!("{synth_name}.config.toml")))?;
    if let (Some(first), Some(last)) = (out.heldout_mel.first(), out.heldout_mel.last()) {
        eprintln!(
            "{synth_name}: held-out mel L1 {:.4} at step {} -> {:.4} at step {}",
            first.1, first.0, last.1, last.0
        );
    }
    Ok(())
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

pub fn eval_mi(cfg: &PipelineConfig) -> Result<()> {
    let layout = Layout::new(&cfg.output.dir);
    let data = load_data(cfg, &layout)?;
    let idx = data.corpus.split_indices(Split::TestAdv);
    let len = data.corpus.config.utterance_len();
    let resynth = |name: &str| -> Result<Vec<Vec<f32>>> {
        let asr = load_ckpt(&layout, name)?;
        let gen = load_ckpt(&layout, &format!("synth-{name}"))?;
        Ok(resynthesize_utterances(&asr, &gen, &data.feats, &idx, len)?)
    };
    let base = resynth(&cfg.mi.baseline)?;
    let anon = resynth(&cfg.mi.anonymized)?;
    let report = mi_difference_report(
        &wave_pairs(&data.corpus, &idx, &base),
        &wave_pairs(&data.corpus, &idx, &anon),
        &cfg.mi.settings,
    )?;
    write(
        &layout.report("mi-per-utterance.csv"),
        report.per_utterance_csv(),
    )?;
    write(&layout.report("mi-curves.csv"), report.curves_csv())?;
    write(&layout.report("mi-histogram.csv"), report.histogram_csv())?;
    cfg.echo(&layout.report("mi.config.toml"))?;
    eprintln!(
        "MI over {} utterances: mean difference {:.4} bits",
        report.ids.len(),
        report.mean_difference()
    );
    Ok(())
}

fn ter(data: &Data, ckpt: &Checkpoint, split: Split) -> Result<f64> {
    let (model, store) = ckpt.asr_model()?;
    let refs: Vec<&[usize]> = data
        .corpus
        .utterances
        .iter()
        .map(|u| u.tokens.as_slice())
        .collect();
    Ok(recognizer_ter(
        &model,
        &store,
        &data.feats,
        &refs,
        &data.corpus.split_indices(split),
    )?)
}

pub fn report(cfg: &PipelineConfig) -> Result<()> {
    let layout = Layout::new(&cfg.output.dir);
    let data = load_data(cfg, &layout)?;
    let dir = layout.ckpt_dir();
    let mut names: Vec<String> = match fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                e.file_name()
                    .to_str()
                    .and_then(|n| n.strip_suffix(".ckpt"))
                    .map(String::from)
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    names.sort_by_key(|n| (n != "baseline", n.clone()));
    let mut runs = Vec::new();
    for name in names {
        let ckpt = load_ckpt(&layout, &name)?;
        if !matches!(ckpt.manifest.arch, Architecture::Asr { .. }) {
            continue;
        }
        let probe_path = layout.report(&format!("probe-{name}.json"));
        let probes: Vec<ProbeRecord> = if probe_path.exists() {
            serde_json::from_str(&fs::read_to_string(&probe_path)?)
                .with_context(|| format!("reading {}", probe_path.display()))?
        } else {
            Vec::new()
        };
        runs.push(RunResult {
            ter_dev: ter(&data, &ckpt, Split::Dev)?,
            ter_test: ter(&data, &ckpt, Split::TestAdv)?,
            grl: ckpt.manifest.grl,
            name,
            probes,
        });
    }
    if runs.is_empty() {
        bail!(
            "no recognizer checkpoints under {}; train one first",
            dir.display()
        );
    }
    let r = make_report(&runs);
    write(&layout.report("recognition.csv"), &r.recognition_csv)?;
    write(&layout.report("recognition.txt"), &r.recognition_text)?;
    write(&layout.report("probes.csv"), &r.probe_csv)?;
    write(&layout.report("probes.txt"), &r.probe_text)?;
    cfg.echo(&layout.report("report.config.toml"))?;
    print!("{}\n{}", r.recognition_text, r.probe_text);
    Ok(())
}

/// Thresholds of the numerical checks.
pub const FD_TOLERANCE: f64 = 1e-6;
pub const ORACLE_TOLERANCE: f64 = 1e-10;
pub const GRL_SEEDS: u64 = 20;

/// Runs every gradient and oracle suite; returns whether all passed.
pub fn grad_check() -> Result<bool> {
    let mut ok = true;
    let mut line = |name: &str, value: f64, tol: f64| {
        let pass = value < tol;
        ok &= pass;
        println!(
            "{} {name}: {value:.3e} (< {tol:.0e})",
            if pass { "PASS" } else { "FAIL" }
        );
    };
    for r in verify::primitive_suite(3)? {
        line(&format!("primitive {}", r.name), r.worst, FD_TOLERANCE);
    }
    let mut worst = 0.0f64;
    for seed in 0..3 {
        worst = worst.max(verify::combined_loss_fd(seed)?);
    }
    line("combined objective", worst, FD_TOLERANCE);
    let ctc = verify::ctc_oracle_suite(6, 3, 3, 0)?;
    line(
        &format!("ctc enumeration ({} instances)", ctc.instances),
        ctc.max_abs_diff,
        ORACLE_TOLERANCE,
    );
    let mut worst = 0.0f64;
    let mut identical = true;
    for seed in 0..GRL_SEEDS {
        let r = verify::grl_dual_backward(seed)?;
        worst = worst.max(r.upstream).max(r.downstream);
        identical &= r.forward_identical;
    }
    line(
        &format!("reversal dual backward ({GRL_SEEDS} seeds)"),
        worst,
        ORACLE_TOLERANCE,
    );
    line(
        "reversal forward identity",
        if identical { 0.0 } else { 1.0 },
        0.5,
    );
    Ok(ok)
}

fn threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`")),
        Err(_) => Ok(1),
    }
}

pub fn sweep(cfg: &PipelineConfig) -> Result<()> {
    let layout = Layout::new(&cfg.output.dir);
    let data = load_data(cfg, &layout)?;
    let grid = cfg.sweep.grid();
    for g in &grid {
        g.validate(cfg.encoder.n_blocks)
            .with_context(|| format!("sweep point {}", run_name(Some(g))))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads()?)
        .build()?;
    let mut points: Vec<Option<GrlConfig>> = vec![None];
    points.extend(grid.iter().copied().map(Some));
    let failures: Vec<String> = pool.install(|| {
        points
            .par_iter()
            .filter_map(|g| {
                let name = run_name(g.as_ref());
                let mut taps: Vec<usize> = g.iter().map(|g| g.tap_layer).collect();
                taps.extend(&cfg.probe.taps);
                taps.retain(|&t| t <= cfg.encoder.n_blocks);
                taps.sort_unstable();
                taps.dedup();
                let res = train_one(cfg, &layout, &data, *g)
                    .and_then(|_| probe_one(cfg, &layout, &data, &name, &taps));
                match res {
                    Ok(_) => None,
                    Err(e) => {
                        // A failed point must not leave a stale checkpoint for the report.
                        let _ = fs::remove_file(layout.ckpt(&name));
                        let _ = fs::remove_file(layout.report(&format!("probe-{name}.json")));
                        Some(format!("{name}: {e:#}"))
                    }
                }
            })
            .collect()
    });
    for f in &failures {
        eprintln!("sweep point failed: {f}");
    }
    report(cfg)
}
