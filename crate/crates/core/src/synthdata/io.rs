//! Corpus persistence: a `corpus.json` manifest plus one raw little-endian
//! `f32` waveform per utterance under `wav/`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusConfig, SpeakerProfile, Utterance};
use crate::error::{Error, Result};

pub const CORPUS_MANIFEST: &str = "corpus.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: CorpusConfig,
    speakers: Vec<SpeakerProfile>,
    utterances: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    #[serde(flatten)]
    utt: Utterance,
    file: String,
    n_samples: usize,
}

pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut entries = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let file = format!("wav/{}.f32", u.utt_id);
        let bytes: Vec<u8> = u.waveform.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(Entry {
            utt: u.clone(),
            file,
            n_samples: u.waveform.len(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: corpus.config.clone(),
        speakers: corpus.speakers.clone(),
        utterances: entries,
    };
    let path = dir.join(CORPUS_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(CORPUS_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    for e in manifest.utterances {
        let wpath = dir.join(&e.file);
        let bytes = fs::read(&wpath).map_err(|err| Error::io(&wpath, err))?;
        if bytes.len() != e.n_samples * 4 {
            return Err(Error::Format(format!(
                "{} holds {} bytes, expected {}",
                e.file,
                bytes.len(),
                e.n_samples * 4
            )));
        }
        let mut utt = e.utt;
        utt.waveform = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        utterances.push(utt);
    }
    Ok(Corpus {
        config: manifest.config,
        speakers: manifest.speakers,
        utterances,
    })
}
