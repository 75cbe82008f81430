//! Dataset manifests: a JSON document naming the task, the split, and every
//! sample's per-modality tensor files. Loading reads and validates all
//! referenced files; saving writes one TMDF file per modality per sample.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    read_tensor, write_tensor, DataError, Dataset, Label, ModalityBundle, Result, Sample, TaskKind,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub task: TaskKind,
    pub split: String,
    pub samples: Vec<SampleRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub audio_path: String,
    pub text_path: String,
    pub video_path: String,
    pub label: Label,
}

/// Write `ds` under `dir` as `<id>_{A,T,V}.tmdf` files plus `manifest.json`.
pub fn save_dataset(dir: &Path, split: &str, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut records = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let names: [String; 3] =
            std::array::from_fn(|m| format!("{}_{}.tmdf", s.id, ["A", "T", "V"][m]));
        for m in 0..3 {
            write_tensor(&dir.join(&names[m]), &s.bundle.feats[m])?;
        }
        records.push(SampleRecord {
            id: s.id.clone(),
            audio_path: names[0].clone(),
            text_path: names[1].clone(),
            video_path: names[2].clone(),
            label: s.bundle.label,
        });
    }
    let manifest = Manifest {
        task: ds.task,
        split: split.to_string(),
        samples: records,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), json).map_err(|source| DataError::Io {
        path: dir.join("manifest.json").display().to_string(),
        source,
    })
}

/// Load the dataset described by `dir/manifest.json`, reading every
/// referenced tensor file (their existence and finiteness is thereby
/// validated). Loaded bundles are complete; masking is applied downstream.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let raw = fs::read_to_string(&path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_str(&raw).map_err(|source| DataError::Json {
        path: path.display().to_string(),
        source,
    })?;
    validate_labels(&manifest)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for r in &manifest.samples {
        let feats = [
            read_tensor(&dir.join(&r.audio_path))?,
            read_tensor(&dir.join(&r.text_path))?,
            read_tensor(&dir.join(&r.video_path))?,
        ];
        for t in &feats {
            if t.rank() != 2 {
                return Err(DataError::Invalid(format!(
                    "sample {}: modality tensors must be rank-2 [rows, dims], got {:?}",
                    r.id,
                    t.shape()
                )));
            }
        }
        samples.push(Sample {
            id: r.id.clone(),
            bundle: ModalityBundle {
                feats,
                available: [true; 3],
                label: r.label,
            },
        });
    }
    Ok(Dataset {
        task: manifest.task,
        samples,
    })
}

fn validate_labels(m: &Manifest) -> Result<()> {
    for r in &m.samples {
        match (m.task, r.label) {
            (TaskKind::Regression, Label::Score(v)) if v.is_finite() => {}
            (TaskKind::Classification { classes }, Label::Class(c)) if c < classes => {}
            _ => {
                return Err(DataError::Invalid(format!(
                    "sample {}: label {:?} inconsistent with task {:?}",
                    r.id, r.label, m.task
                )))
            }
        }
    }
    Ok(())
}
