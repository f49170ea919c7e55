//! Single-file checkpoints: magic, format version, JSON manifest, then the
//! raw little-endian `f32` parameter data in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::asr::{AsrModel, GrlConfig};
use super::encoder::EncoderConfig;
use super::params::{Init, ParamStore};
use super::synth::{SynthConfig, SynthGenerator};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ANLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture needed to rebuild a model before loading its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Asr {
        encoder: EncoderConfig,
        vocab_size: usize,
    },
    Synth {
        synth: SynthConfig,
        tap: usize,
    },
}

impl Architecture {
    pub fn kind(&self) -> &'static str {
        match self {
            Architecture::Asr { .. } => "recognizer",
            Architecture::Synth { .. } => "generator",
        }
    }

    fn mismatch(&self, expected: &'static str) -> Error {
        Error::Architecture {
            expected,
            found: self.kind(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub arch: Architecture,
    pub grl: Option<GrlConfig>,
    pub seed: u64,
    pub step: usize,
    pub params: Vec<ParamEntry>,
}

/// A loaded checkpoint: manifest plus named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    /// Captures the parameters of `store` accepted by `keep`, sorted by name.
    pub fn capture(
        arch: Architecture,
        grl: Option<GrlConfig>,
        seed: u64,
        step: usize,
        store: &ParamStore<f32>,
        keep: impl Fn(&str) -> bool,
    ) -> Checkpoint {
        let tensors: BTreeMap<String, Tensor<f32>> = store
            .iter()
            .filter(|(_, n, _)| keep(n))
            .map(|(_, n, t)| (n.to_string(), t.clone()))
            .collect();
        let mut offset = 0;
        let params = tensors
            .iter()
            .map(|(name, t)| {
                let e = ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect();
        Checkpoint {
            manifest: Manifest {
                arch,
                grl,
                seed,
                step,
                params,
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(
            24 + manifest.len() + 4 * self.tensors.values().map(Tensor::numel).sum::<usize>(),
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for entry in &self.manifest.params {
            for v in self.tensors[&entry.name].data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + mlen)
            .ok_or_else(|| Error::Format("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        let data = &bytes[20 + mlen..];
        let mut tensors = BTreeMap::new();
        let mut expected = 0;
        for e in &manifest.params {
            let n: usize = e.shape.iter().product();
            if e.offset != expected {
                return Err(Error::Format(format!(
                    "parameter `{}` has a non-contiguous offset",
                    e.name
                )));
            }
            let raw = data
                .get(4 * e.offset..4 * (e.offset + n))
                .ok_or_else(|| Error::Format(format!("truncated data for `{}`", e.name)))?;
            let vals = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), vals)?);
            expected += n;
        }
        if data.len() != 4 * expected {
            return Err(Error::Format("trailing bytes after parameter data".into()));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies every stored tensor into `store`, which must hold exactly the
    /// same names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for (_, name, _) in store.iter() {
            if !self.tensors.contains_key(name) {
                return Err(Error::Format(format!(
                    "checkpoint lacks parameter `{name}`"
                )));
            }
        }
        for (name, t) in &self.tensors {
            store.set(name, t.clone())?;
        }
        Ok(())
    }

    /// Rebuilds a recognizer (without speaker branch) from its weights.
    pub fn asr_model(&self) -> Result<(AsrModel, ParamStore<f32>)> {
        let Architecture::Asr {
            encoder,
            vocab_size,
        } = &self.manifest.arch
        else {
            return Err(self.manifest.arch.mismatch("recognizer"));
        };
        let mut store = ParamStore::new();
        let model = AsrModel::new(&mut store, &mut Init::new(0), encoder, *vocab_size)?;
        self.restore_into(&mut store)?;
        Ok((model, store))
    }

    /// Rebuilds a generator from its weights.
    pub fn synth_model(&self) -> Result<(SynthGenerator, ParamStore<f32>, usize)> {
        let Architecture::Synth { synth, tap } = &self.manifest.arch else {
            return Err(self.manifest.arch.mismatch("generator"));
        };
        let mut store = ParamStore::new();
        let model = SynthGenerator::new(&mut store, &mut Init::new(0), synth)?;
        self.restore_into(&mut store)?;
        Ok((model, store, *tap))
    }
}
