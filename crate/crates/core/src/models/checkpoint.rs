//! Checkpoint layout: `manifest.json` plus one `<name>.bin` per parameter
//! (little-endian f32, C-order).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, Result};
use crate::nncore::{ParamStore, Tensor};
use crate::volumes::VolumeError;

const FORMAT_TAG: &str = "llpq-checkpoint";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    /// Free-form training provenance (phase, epoch, seeds, history).
    training: serde_json::Value,
}

/// A model with its training provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub training: serde_json::Value,
}

fn ck_err(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |e| ck_err(path, e.to_string())
}

fn blob_name(name: &str) -> String {
    format!("{name}.bin")
}

/// Writes each tensor as `<dir>/<name>.bin`; returns the entries.
pub fn write_tensors(
    dir: &Path,
    tensors: &BTreeMap<String, Tensor<f32>>,
) -> Result<Vec<TensorEntry>> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    tensors
        .iter()
        .map(|(name, t)| {
            let file = blob_name(name);
            crate::volumes::io::write_raw_f32(&dir.join(&file), t.data.iter().copied())?;
            Ok(TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                file,
            })
        })
        .collect()
}

/// Reads tensors listed in `entries` from `dir`, checking payload sizes.
pub fn read_tensors(dir: &Path, entries: &[TensorEntry]) -> Result<BTreeMap<String, Tensor<f32>>> {
    entries
        .iter()
        .map(|e| {
            let n = e.shape.iter().product();
            let data =
                crate::volumes::io::read_raw_f32(&dir.join(&e.file), n).map_err(
                    |err| match err {
                        VolumeError::PayloadSizeMismatch { .. } => ck_err(
                            &dir.join(&e.file),
                            format!("blob size does not match shape {:?}: {err}", e.shape),
                        ),
                        other => ModelError::Volume(other),
                    },
                )?;
            Ok((e.name.clone(), Tensor::new(e.shape.clone(), data)?))
        })
        .collect()
}

pub fn save_checkpoint(dir: &Path, model: &Model<f32>, training: &serde_json::Value) -> Result<()> {
    let tensors: BTreeMap<String, Tensor<f32>> = model
        .params
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let entries = write_tensors(dir, &tensors)?;
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        version: 1,
        dtype: "float32-le".into(),
        model: model.config.clone(),
        tensors: entries,
        training: training.clone(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io(&path))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| ck_err(&path, e.to_string()))?;
    if m.format != FORMAT_TAG {
        return Err(ck_err(&path, format!("unknown format tag {:?}", m.format)));
    }
    let expected: BTreeMap<String, Vec<usize>> = m.model.param_shapes().into_iter().collect();
    for e in &m.tensors {
        match expected.get(&e.name) {
            Some(s) if *s == e.shape => {}
            Some(s) => {
                return Err(ck_err(
                    &path,
                    format!(
                        "tensor {} declared {:?}, architecture needs {s:?}",
                        e.name, e.shape
                    ),
                ))
            }
            None => return Err(ck_err(&path, format!("unexpected tensor {}", e.name))),
        }
    }
    if m.tensors.len() != expected.len() {
        return Err(ck_err(&path, "missing parameter tensors"));
    }
    let mut params = ParamStore::new();
    for (name, t) in read_tensors(dir, &m.tensors)? {
        params.insert(name, t)?;
    }
    Ok(Checkpoint {
        model: Model::from_parts(m.model, params)?,
        training: m.training,
    })
}
