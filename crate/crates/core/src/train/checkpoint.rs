//! Checkpoint directories: one TMDF file per named parameter (plus optional
//! optimizer moments), indexed by a JSON document carrying shapes, groups,
//! per-file digests, the step count, and the full model config.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{decode_tensor, write_tensor, DataError};
use crate::model::{group_of, AblationConfig, ModelConfig, TmdcParams};
use crate::tensor::Tensor;

use super::adam::AdamState;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("checkpoint index at {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("digest mismatch for {file}; the checkpoint is corrupt")]
    DigestMismatch { file: String },
    #[error("parameter {name} has no file in the checkpoint")]
    MissingParam { name: String },
    #[error("checkpoint lists {name}, which the indexed config does not define")]
    UnknownParam { name: String },
    #[error("parameter {name}: expected shape {expected:?}, checkpoint holds {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint was trained with ablation {got:?}, expected {expected:?}; parameter groups do not match")]
    AblationMismatch {
        expected: AblationConfig,
        got: AblationConfig,
    },
    #[error("checkpoint config invalid: {0}")]
    BadConfig(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
    group: String,
    sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    moment_files: Option<[String; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    moment_sha256: Option<[String; 2]>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointIndex {
    config: ModelConfig,
    step: u64,
    #[serde(default)]
    extra: BTreeMap<String, serde_json::Value>,
    entries: Vec<IndexEntry>,
}

/// Everything a checkpoint restores. Parameters come back at 32-bit storage
/// precision; config, step, and extra metadata round-trip exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: TmdcParams,
    pub adam: Option<AdamState>,
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.adam.as_ref().map(|a| a.step).unwrap_or(0)
    }

    /// Guards a load against the wrong ablation: parameter groups follow the
    /// ablation, so a mismatch means the trees are not interchangeable.
    pub fn expect_ablation(&self, expected: &AblationConfig) -> Result<()> {
        if self.config.ablation != *expected {
            return Err(CheckpointError::AblationMismatch {
                expected: *expected,
                got: self.config.ablation,
            });
        }
        Ok(())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(sha256_hex(&bytes))
}

/// Writes `dir/params/<name>.tmdf` per parameter, moment files under
/// `dir/moments/` when an optimizer state is given, and `dir/index.json`
/// last. Overwrites any previous checkpoint at `dir`.
pub fn save(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let params_dir = dir.join("params");
    fs::create_dir_all(&params_dir).map_err(io_err(&params_dir))?;
    let moments_dir = dir.join("moments");
    if ckpt.adam.is_some() {
        fs::create_dir_all(&moments_dir).map_err(io_err(&moments_dir))?;
    }

    let mut entries = Vec::new();
    let mut failure: Option<CheckpointError> = None;
    ckpt.params.for_each(&mut |name, tensor| {
        if failure.is_some() {
            return;
        }
        let rel = format!("params/{name}.tmdf");
        let path = dir.join(&rel);
        if let Err(e) = write_tensor(&path, tensor) {
            failure = Some(e.into());
            return;
        }
        let sha = match file_digest(&path) {
            Ok(s) => s,
            Err(e) => {
                failure = Some(e);
                return;
            }
        };
        let mut entry = IndexEntry {
            name: name.clone(),
            file: rel,
            shape: tensor.shape().to_vec(),
            group: group_of(&name).to_string(),
            sha256: sha,
            moment_files: None,
            moment_sha256: None,
        };
        if let Some(adam) = &ckpt.adam {
            if let (Some(m), Some(v)) = (adam.m.get(&name), adam.v.get(&name)) {
                let rels = [format!("moments/{name}.m.tmdf"), format!("moments/{name}.v.tmdf")];
                let mut shas = [String::new(), String::new()];
                for (i, (rel, t)) in rels.iter().zip([m, v]).enumerate() {
                    let path = dir.join(rel);
                    if let Err(e) = write_tensor(&path, t) {
                        failure = Some(e.into());
                        return;
                    }
                    match file_digest(&path) {
                        Ok(s) => shas[i] = s,
                        Err(e) => {
                            failure = Some(e);
                            return;
                        }
                    }
                }
                entry.moment_files = Some(rels);
                entry.moment_sha256 = Some(shas);
            }
        }
        entries.push(entry);
    });
    if let Some(e) = failure {
        return Err(e);
    }

    let index = CheckpointIndex {
        config: ckpt.config.clone(),
        step: ckpt.step(),
        extra: ckpt.extra.clone(),
        entries,
    };
    let index_path = dir.join("index.json");
    let json = serde_json::to_string_pretty(&index).map_err(|source| CheckpointError::Json {
        path: index_path.display().to_string(),
        source,
    })?;
    fs::write(&index_path, json).map_err(io_err(&index_path))
}

fn read_verified(dir: &Path, rel: &str, sha: &str, name: &str) -> Result<Tensor> {
    let path: PathBuf = dir.join(rel);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(CheckpointError::MissingParam { name: name.to_string() })
        }
        Err(e) => return Err(io_err(&path)(e)),
    };
    if sha256_hex(&bytes) != sha {
        return Err(CheckpointError::DigestMismatch {
            file: rel.to_string(),
        });
    }
    Ok(decode_tensor(&bytes, rel)?)
}

/// Restores a checkpoint written by [`save`]. Every parameter the indexed
/// config defines must be present with a verified digest and matching
/// shape; entries naming unknown parameters are rejected.
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let index_path = dir.join("index.json");
    let raw = fs::read_to_string(&index_path).map_err(io_err(&index_path))?;
    let index: CheckpointIndex =
        serde_json::from_str(&raw).map_err(|source| CheckpointError::Json {
            path: index_path.display().to_string(),
            source,
        })?;
    index
        .config
        .validate()
        .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;

    // Parameter values are immediately overwritten; the seed is irrelevant.
    let mut params = TmdcParams::new(&index.config, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    let by_name: BTreeMap<&str, &IndexEntry> =
        index.entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let expected: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for entry in &index.entries {
        if !expected.iter().any(|n| n == &entry.name) {
            return Err(CheckpointError::UnknownParam {
                name: entry.name.clone(),
            });
        }
    }

    let mut adam = AdamState {
        step: index.step,
        ..AdamState::default()
    };
    let mut any_moments = false;
    let mut failure: Option<CheckpointError> = None;
    params.for_each_mut(&mut |name, slot| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = by_name.get(name.as_str()) else {
            failure = Some(CheckpointError::MissingParam { name: name.clone() });
            return;
        };
        let stored = match read_verified(dir, &entry.file, &entry.sha256, &name) {
            Ok(t) => t,
            Err(e) => {
                failure = Some(e);
                return;
            }
        };
        if stored.shape() != slot.shape() {
            failure = Some(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: slot.shape().to_vec(),
                got: stored.shape().to_vec(),
            });
            return;
        }
        *slot = stored;
        if let (Some(files), Some(shas)) = (&entry.moment_files, &entry.moment_sha256) {
            for (i, map) in [&mut adam.m, &mut adam.v].into_iter().enumerate() {
                match read_verified(dir, &files[i], &shas[i], &name) {
                    Ok(t) if t.shape() == slot.shape() => {
                        map.insert(name.clone(), t);
                    }
                    Ok(t) => {
                        failure = Some(CheckpointError::ShapeMismatch {
                            name: name.clone(),
                            expected: slot.shape().to_vec(),
                            got: t.shape().to_vec(),
                        });
                        return;
                    }
                    Err(e) => {
                        failure = Some(e);
                        return;
                    }
                }
            }
            any_moments = true;
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }

    Ok(Checkpoint {
        config: index.config,
        params,
        adam: any_moments.then_some(adam),
        extra: index.extra,
    })
}
