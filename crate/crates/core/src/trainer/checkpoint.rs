//! On-disk checkpoints: `manifest.json`, `tensors.bin` (little-endian f32
//! in manifest order) and `history.jsonl`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{ModelConfig, Params};
use crate::error::{Error, Result};
use crate::objectives::LossReport;

pub const MANIFEST: &str = "manifest.json";
pub const TENSORS: &str = "tensors.bin";
pub const HISTORY: &str = "history.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initial,
    Pretrained,
    Finetuned,
}

/// Position of the training RNG: its seed, stream and word offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &crate::encoder::TrainRng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<crate::encoder::TrainRng> {
        use rand::SeedableRng;
        let bad = || Error::CorruptCheckpoint("rng_state".into());
        let seed: [u8; 32] = hex::decode(&self.seed).map_err(|_| bad())?.try_into().map_err(|_| bad())?;
        let mut rng = crate::encoder::TrainRng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// One line of `history.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<LossReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_ndcg10: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Params<f32>,
    pub stage: Stage,
    pub epoch: usize,
    pub rng_state: RngState,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub epoch: usize,
    pub config: ModelConfig,
    pub rng_state: RngState,
    pub tensors: Vec<TensorEntry>,
    pub sha256: String,
}

fn payload(params: &Params<f32>) -> (Vec<u8>, Vec<TensorEntry>) {
    let names = Params::<f32>::names(&params.config);
    let mut bytes = Vec::with_capacity(params.n_scalars() * 4);
    let mut entries = Vec::with_capacity(names.len());
    for (name, t) in names.into_iter().zip(&params.tensors) {
        let offset = bytes.len();
        for v in t.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            shape: [t.nrows(), t.ncols()],
            dtype: "f32".into(),
            offset,
            bytes: bytes.len() - offset,
        });
    }
    (bytes, entries)
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let (bytes, tensors) = payload(&ckpt.params);
    let manifest = Manifest {
        stage: ckpt.stage,
        epoch: ckpt.epoch,
        config: ckpt.params.config.clone(),
        rng_state: ckpt.rng_state.clone(),
        tensors,
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    std::fs::write(dir.join(TENSORS), &bytes)?;
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    let mut hist = std::io::BufWriter::new(std::fs::File::create(dir.join(HISTORY))?);
    for rec in &ckpt.history {
        serde_json::to_writer(&mut hist, rec)?;
        hist.write_all(b"\n")?;
    }
    hist.flush()?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST))?)
        .map_err(|e| Error::CorruptCheckpoint(format!("manifest: {e}")))?;
    manifest.config.validate()?;
    let bytes = std::fs::read(dir.join(TENSORS))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.sha256 {
        return Err(Error::CorruptCheckpoint("tensor payload hash mismatch".into()));
    }
    let cfg = &manifest.config;
    let names = Params::<f32>::names(cfg);
    let shapes = Params::<f32>::shapes(cfg);
    let mut tensors = Vec::with_capacity(names.len());
    for (name, (rows, cols)) in names.iter().zip(shapes) {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
        if entry.shape != [rows, cols] || entry.dtype != "f32" || entry.bytes != rows * cols * 4 {
            return Err(Error::CorruptCheckpoint(format!("tensor {name} has unexpected layout")));
        }
        let raw = bytes
            .get(entry.offset..entry.offset + entry.bytes)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor {name} out of bounds")))?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Array2::from_shape_vec((rows, cols), values).expect("shape checked"));
    }
    let mut history = Vec::new();
    let hist_path = dir.join(HISTORY);
    if hist_path.exists() {
        for line in BufReader::new(std::fs::File::open(hist_path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                history.push(serde_json::from_str(&line)?);
            }
        }
    }
    Ok(Checkpoint {
        params: Params {
            config: manifest.config,
            tensors,
        },
        stage: manifest.stage,
        epoch: manifest.epoch,
        rng_state: manifest.rng_state,
        history,
    })
}
