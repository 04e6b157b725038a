//! On-disk snapshot store: a directory holding `manifest.json` plus two
//! checkpoint files per round, `round_NNNN.params.bin` (starting model) and
//! `round_NNNN.grad.bin` (epoch gradient). Every file is listed in the
//! manifest with its SHA-256 and verified on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{GradientSnapshot, SnapshotStore};
use crate::nnmodel::checkpoint::{Checkpoint, CheckpointError};
use crate::nnmodel::{MlpConfig, ParamVector};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported manifest version {0}")]
    Version(u32),
    #[error("{file}: hash mismatch")]
    Hash { file: String },
    #[error("{file}: {source}")]
    Checkpoint {
        file: String,
        source: CheckpointError,
    },
    #[error("inconsistent store: {0}")]
    Inconsistent(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRound {
    pub round: usize,
    pub file: String,
    pub hash: String,
    pub gradient_file: String,
    pub gradient_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub lr: f64,
    pub model: MlpConfig,
    pub rounds: Vec<ManifestRound>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<String, StoreError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(sha256_hex(bytes))
}

fn read_checked(dir: &Path, name: &str, hash: &str) -> Result<Checkpoint, StoreError> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|source| StoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if sha256_hex(&bytes) != hash {
        return Err(StoreError::Hash {
            file: name.to_string(),
        });
    }
    Checkpoint::decode(&bytes).map_err(|source| StoreError::Checkpoint {
        file: name.to_string(),
        source,
    })
}

impl SnapshotStore {
    pub fn save(&self, dir: &Path) -> Result<Manifest, StoreError> {
        fs::create_dir_all(dir).map_err(|source| StoreError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let dims = self.model.layer_dims();
        let mut rounds = Vec::with_capacity(self.len());
        for s in self.snapshots() {
            let file = format!("round_{:04}.params.bin", s.round);
            let gradient_file = format!("round_{:04}.grad.bin", s.round);
            let ck = |values: Vec<f64>| Checkpoint {
                epoch: s.round as u32,
                seed: self.model.seed,
                dims: dims.clone(),
                values,
            };
            let hash = write(dir, &file, &ck(s.params.flatten()).encode())?;
            let gradient_hash = write(dir, &gradient_file, &ck(s.gradient.clone()).encode())?;
            rounds.push(ManifestRound {
                round: s.round,
                file,
                hash,
                gradient_file,
                gradient_hash,
            });
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            lr: self.lr,
            model: self.model.clone(),
            rounds,
        };
        write(dir, MANIFEST_FILE, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<SnapshotStore, StoreError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|source| StoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(StoreError::Version(manifest.version));
        }
        let dims = manifest.model.layer_dims();
        let mut store = SnapshotStore::new(manifest.model.clone(), manifest.lr);
        for r in &manifest.rounds {
            let params = read_checked(dir, &r.file, &r.hash)?;
            let grad = read_checked(dir, &r.gradient_file, &r.gradient_hash)?;
            if params.dims != dims || grad.dims != dims {
                return Err(StoreError::Inconsistent(format!(
                    "round {} layout differs from manifest",
                    r.round
                )));
            }
            let params = ParamVector::from_flat(&dims, &params.values)
                .map_err(|e| StoreError::Inconsistent(e.to_string()))?;
            store
                .push(GradientSnapshot {
                    round: r.round,
                    params,
                    gradient: grad.values,
                })
                .map_err(|e| StoreError::Inconsistent(e.to_string()))?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_purchase_like, SynthSpec};
    use crate::fedsim::{run_federation, FedConfig};

    #[test]
    fn save_load_round_trip_and_tamper_detection() {
        let ds = synth_purchase_like(&SynthSpec {
            n: 12,
            attributes: 4,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = FedConfig {
            rounds: 3,
            ..FedConfig::default()
        };
        let fed = run_federation(&cfg, &MlpConfig::new(4, vec![5], 2, 3), &[ds], 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = fed.store.save(dir.path()).unwrap();
        assert_eq!(manifest.rounds.len(), 3);
        assert_eq!(SnapshotStore::load(dir.path()).unwrap(), fed.store);
        let victim = dir.path().join(&manifest.rounds[1].gradient_file);
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&victim, bytes).unwrap();
        assert!(matches!(
            SnapshotStore::load(dir.path()),
            Err(StoreError::Hash { .. })
        ));
    }
}
