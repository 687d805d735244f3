//! Run configuration documents, config hashing and run manifests.

use std::path::{Path, PathBuf};

use ldva_core::config::TrainConfig;
use ldva_core::data::{ShiftKind, SynthSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read, write, Error, Result};

/// Environment variable that replaces `train.seed` when set.
pub const SEED_ENV: &str = "LDVA_SEED";

/// An image file and its label file, plus optional loading adjustments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Keep only the first `limit` samples.
    #[serde(default)]
    pub limit: Option<usize>,
    /// Nearest-neighbour resize to a square side.
    #[serde(default)]
    pub resize: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftStep {
    pub kind: ShiftKind,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generated data, used instead of the IDX files when present.
    pub synth: Option<SynthSpec>,
    pub train: Option<IdxPaths>,
    pub test: Option<IdxPaths>,
    /// Unlabeled target domain for DA.
    pub target: Option<IdxPaths>,
    /// Semantic-vector CSV covering seen and unseen classes.
    pub semantics: Option<PathBuf>,
    /// Share of classes kept for training (GZSL seen classes, FSL base classes).
    pub seen_fraction: f64,
    /// Share of each GZSL seen class used for training; the rest is test data.
    pub train_fraction: f64,
    pub split_seed: u64,
    /// Shifts applied in order to the synthetic DA target half.
    pub target_shift: Vec<ShiftStep>,
    /// FSL rotation augmentation, in degrees.
    pub rotations: Vec<u32>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: None,
            train: None,
            test: None,
            target: None,
            semantics: None,
            seen_fraction: 0.75,
            train_fraction: 0.7,
            split_seed: 0,
            target_shift: Vec::new(),
            rotations: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Strict parse; errors carry the path of the offending field.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::Config { path: origin.into(), field, detail: e.into_inner().to_string() }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "config is not UTF-8"))?;
        Self::from_json(&text, path)
    }

    /// Applies `LDVA_SEED` if set. Returns whether it was applied.
    pub fn apply_seed_env(&mut self) -> Result<bool> {
        match std::env::var(SEED_ENV) {
            Ok(s) => {
                self.train.seed = s
                    .trim()
                    .parse()
                    .map_err(|_| Error::Usage(format!("{SEED_ENV}={s} is not an unsigned integer")))?;
                Ok(true)
            }
            Err(_) => Ok(false),
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    let canon = serde_json::to_value(value).expect("config serializes");
    hex::encode(Sha256::digest(serde_json::to_vec(&canon).expect("value serializes")))
}

/// Manifest written next to command outputs. `created_unix` is the only
/// field that changes between identical runs.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest<T: Serialize> {
    pub command: &'static str,
    pub config_hash: String,
    pub seed: u64,
    pub seed_from_env: bool,
    #[serde(flatten)]
    pub extra: T,
    pub created_unix: u64,
}

pub fn write_manifest<T: Serialize>(dir: &Path, m: &Manifest<T>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
    text.push('\n');
    write(&dir.join("manifest.json"), text.as_bytes())
}

pub fn now_unix() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}
