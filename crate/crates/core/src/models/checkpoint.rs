//! Weight checkpoints: a little-endian f32 blob plus a JSON manifest that
//! records the configuration, training history and the blob's SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NetworkConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Synthesis,
    Segmentation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss; absent for the initial-weights entry.
    pub train_loss: Option<f64>,
    /// Validation selection metric, when evaluated this epoch.
    pub val_metric: Option<f64>,
    #[serde(default)]
    pub terms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ModelKind,
    /// `"base"` or `"FT"`.
    pub tag: String,
    pub config: NetworkConfig,
    /// Epoch whose weights are stored (0 = initial weights).
    pub epoch: usize,
    pub seed: u64,
    pub loss_history: Vec<EpochRecord>,
    pub parent_hash: Option<String>,
    pub blob_sha256: String,
    pub num_weights: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub weights: Vec<f32>,
}

fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.bin")), dir.join(format!("{name}.json")))
}

pub fn blob_hash(weights: &[f32]) -> String {
    let mut h = Sha256::new();
    for w in weights {
        h.update(w.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Writes `<name>.bin` and `<name>.json`; the manifest's hash and weight
/// count are filled in here. Returns the blob hash.
pub fn save_checkpoint(dir: &Path, name: &str, manifest: &Manifest, weights: &[f32]) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (bin, json) = paths(dir, name);
    let bytes: Vec<u8> = weights.iter().flat_map(|w| w.to_le_bytes()).collect();
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let mut m = manifest.clone();
    m.blob_sha256 = blob_hash(weights);
    m.num_weights = weights.len();
    m.format_version = CHECKPOINT_VERSION;
    let text = serde_json::to_string_pretty(&m)?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(m.blob_sha256)
}

/// Loads and verifies a checkpoint; missing or corrupt files are state
/// errors.
pub fn load_checkpoint(dir: &Path, name: &str) -> Result<Checkpoint> {
    let (bin, json) = paths(dir, name);
    if !json.exists() || !bin.exists() {
        return Err(Error::State(format!("checkpoint '{name}' not found in {}", dir.display())));
    }
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::State(format!("unreadable manifest {}: {e}", json.display())))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::State(format!(
            "checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})",
            manifest.format_version
        )));
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::State(format!("{} is not a whole number of f32 values", bin.display())));
    }
    let weights: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if blob_hash(&weights) != manifest.blob_sha256 || weights.len() != manifest.num_weights {
        return Err(Error::State(format!("checkpoint blob {} does not match its manifest", bin.display())));
    }
    Ok(Checkpoint { manifest, weights })
}

impl Manifest {
    pub fn new(kind: ModelKind, tag: &str, config: &NetworkConfig) -> Self {
        Manifest {
            format_version: CHECKPOINT_VERSION,
            kind,
            tag: tag.to_string(),
            config: config.clone(),
            epoch: 0,
            seed: config.seed,
            loss_history: Vec::new(),
            parent_hash: None,
            blob_sha256: String::new(),
            num_weights: 0,
        }
    }
}
