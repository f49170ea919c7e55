//! Pipeline configuration: a TOML file of `[section]` tables, every key
//! optional, plus `section.key=value` overrides from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use anonlab_core::evaluation::MiConfig;
use anonlab_core::models::{EncoderConfig, GrlConfig};
use anonlab_core::synthdata::{CorpusConfig, FeatureConfig};
use anonlab_core::training::{ProbeConfig, SynthTrainConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Root holding `corpus/`, `ckpt/`, `metrics/` and `reports/`.
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrlSection {
    pub tap_layer: usize,
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for GrlSection {
    fn default() -> Self {
        GrlSection {
            tap_layer: 3,
            alpha: 0.5,
            lambda: 0.5,
        }
    }
}

impl GrlSection {
    pub fn get(&self) -> GrlConfig {
        GrlConfig {
            tap_layer: self.tap_layer,
            alpha: self.alpha,
            lambda: self.lambda,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSection {
    /// Run name of the checkpoint to probe, e.g. `baseline`.
    pub model: String,
    pub taps: Vec<usize>,
    #[serde(flatten)]
    pub settings: ProbeConfig,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            model: "baseline".into(),
            taps: vec![3, 5],
            settings: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    /// Run name of the recognizer whose embeddings drive the generator.
    pub model: String,
    pub tap: usize,
    /// Training utterances, taken round-robin over speakers from the train
    /// split. Held-out loss is measured on the `test_adv` split.
    pub train_utterances: usize,
    #[serde(flatten)]
    pub settings: SynthTrainConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            model: "baseline".into(),
            tap: 3,
            train_utterances: 20,
            settings: SynthTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiSection {
    pub baseline: String,
    pub anonymized: String,
    #[serde(flatten)]
    pub settings: MiConfig,
}

impl Default for MiSection {
    fn default() -> Self {
        MiSection {
            baseline: "baseline".into(),
            anonymized: run_name(Some(&GrlSection::default().get())),
            settings: MiConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub taps: Vec<usize>,
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            taps: vec![1, 3, 5],
            alphas: vec![0.1, 0.5],
            lambdas: vec![0.05, 0.3, 0.5],
        }
    }
}

impl SweepSection {
    pub fn grid(&self) -> Vec<GrlConfig> {
        let mut out = Vec::new();
        for &tap_layer in &self.taps {
            for &alpha in &self.alphas {
                for &lambda in &self.lambdas {
                    out.push(GrlConfig {
                        tap_layer,
                        alpha,
                        lambda,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output: OutputSection,
    pub corpus: CorpusConfig,
    pub features: FeatureConfig,
    pub encoder: EncoderConfig,
    pub grl: GrlSection,
    pub train: TrainConfig,
    pub probe: ProbeSection,
    pub synth: SynthSection,
    pub mi: MiSection,
    pub sweep: SweepSection,
}

/// `baseline`, or `adv-t{tap}-a{alpha}-l{lambda}` for an adversarial run.
pub fn run_name(grl: Option<&GrlConfig>) -> String {
    match grl {
        None => "baseline".into(),
        Some(g) => format!("adv-t{}-a{}-l{}", g.tap_layer, g.alpha, g.lambda),
    }
}

impl PipelineConfig {
    /// Reads `path` (if given), applies the overrides in order and checks
    /// the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let defaults = toml::Table::try_from(PipelineConfig::default())?;
        reject_unknown(&table, &defaults, "")?;
        let text = toml::to_string(&table)?;
        let cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate().context("corpus")?;
        self.features.validate().context("features")?;
        self.encoder.validate().context("encoder")?;
        self.grl
            .get()
            .validate(self.encoder.n_blocks)
            .context("grl")?;
        self.train.validate().context("train")?;
        self.probe.settings.validate().context("probe")?;
        self.synth.settings.validate().context("synth")?;
        self.mi.settings.validate().context("mi")?;
        if self.features.n_mels != self.encoder.n_mels {
            bail!(
                "features.n_mels = {} but encoder.n_mels = {}; they must agree",
                self.features.n_mels,
                self.encoder.n_mels
            );
        }
        if self.features.sample_rate != self.corpus.sample_rate {
            bail!(
                "features.sample_rate = {} but corpus.sample_rate = {}; they must agree",
                self.features.sample_rate,
                self.corpus.sample_rate
            );
        }
        Ok(())
    }

    /// The fully resolved configuration, every field spelled out.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the resolved configuration to `path`.
    pub fn echo(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override `{spec}` is not of the form section.key=value");
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` must be section.key");
    }
    let raw = raw.trim();
    // Anything that is not a TOML literal is taken as a bare string.
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override `{key}`: `{part}` is not a section"),
        };
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

/// Every key the user wrote must exist in the default configuration.
fn reject_unknown(given: &toml::Table, known: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in given {
        let name = format!("{prefix}{k}");
        match known.get(k) {
            None => bail!("unknown config field `{name}`"),
            Some(toml::Value::Table(r)) => {
                if let toml::Value::Table(g) = v {
                    reject_unknown(g, r, &format!("{name}."))?;
                }
            }
            Some(_) => {}
        }
    }
    Ok(())
}
