//! On-disk layout of one sample:
//!
//! ```text
//! <dir>/volume.raw   little-endian f32, C-order (depth, height, width)
//! <dir>/region.raw   same encoding, values 0.0 / 1.0
//! <dir>/lesion.raw   optional, same encoding
//! <dir>/meta.json    shape, spacing, dtype tag, array roles, labels
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    validate_shape, voxel_count, LabeledSample, Mask, Pattern, Result, Shape3, Volume, VolumeError,
};
use crate::losses::Grade;

pub const DTYPE_TAG: &str = "float32-le";
const FORMAT_TAG: &str = "llpq-sample";

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    file: String,
    role: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    format: String,
    version: u32,
    id: String,
    shape: Vec<usize>,
    spacing: [f32; 3],
    dtype: String,
    arrays: Vec<ArrayEntry>,
    grade_rater1: u8,
    grade_rater2: u8,
    true_proportion: Option<f64>,
    pattern: Option<Pattern>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_raw_f32(path: &Path, data: impl Iterator<Item = f32>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub(crate) fn read_raw_f32(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    if !path.exists() {
        return Err(VolumeError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    let expected = (expected_len * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(VolumeError::PayloadSizeMismatch {
            file: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_mask(path: &Path, shape: Shape3) -> Result<Mask> {
    let raw = read_raw_f32(path, voxel_count(shape))?;
    let mut data = Vec::with_capacity(raw.len());
    for v in raw {
        data.push(match v {
            v if v == 0.0 => 0,
            v if v == 1.0 => 1,
            _ => return Err(VolumeError::NonBinaryMask(path.display().to_string())),
        });
    }
    Ok(Mask { shape, data })
}

fn mask_values(m: &Mask) -> impl Iterator<Item = f32> + '_ {
    m.data.iter().map(|&v| v as f32)
}

pub fn save_sample(dir: &Path, sample: &LabeledSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut arrays = vec![
        ArrayEntry {
            file: "volume.raw".into(),
            role: "volume".into(),
        },
        ArrayEntry {
            file: "region.raw".into(),
            role: "region".into(),
        },
    ];
    write_raw_f32(&dir.join("volume.raw"), sample.volume.data.iter().copied())?;
    write_raw_f32(&dir.join("region.raw"), mask_values(&sample.region))?;
    if let Some(lesion) = &sample.lesion {
        arrays.push(ArrayEntry {
            file: "lesion.raw".into(),
            role: "lesion".into(),
        });
        write_raw_f32(&dir.join("lesion.raw"), mask_values(lesion))?;
    }
    let meta = SampleMeta {
        format: FORMAT_TAG.into(),
        version: 1,
        id: sample.id.clone(),
        shape: sample.volume.shape.to_vec(),
        spacing: sample.volume.spacing,
        dtype: DTYPE_TAG.into(),
        arrays,
        grade_rater1: sample.grade_rater1.0,
        grade_rater2: sample.grade_rater2.0,
        true_proportion: sample.true_proportion,
        pattern: sample.pattern,
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

pub fn load_sample(dir: &Path) -> Result<LabeledSample> {
    let meta_path = dir.join("meta.json");
    if !meta_path.exists() {
        return Err(VolumeError::MissingFile(meta_path));
    }
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let corrupt = |reason: String| VolumeError::CorruptHeader {
        file: meta_path.clone(),
        reason,
    };
    let meta: SampleMeta = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    if meta.format != FORMAT_TAG {
        return Err(corrupt(format!("unknown format tag {:?}", meta.format)));
    }
    if meta.dtype != DTYPE_TAG {
        return Err(corrupt(format!("unsupported dtype {:?}", meta.dtype)));
    }
    validate_shape(&meta.shape)?;
    let shape: Shape3 = [meta.shape[0], meta.shape[1], meta.shape[2]];

    let role_file = |role: &str| -> Option<PathBuf> {
        meta.arrays
            .iter()
            .find(|a| a.role == role)
            .map(|a| dir.join(&a.file))
    };
    let volume_path = role_file("volume").ok_or_else(|| corrupt("no volume array".into()))?;
    let region_path = role_file("region").ok_or_else(|| corrupt("no region array".into()))?;

    let volume = Volume::new(
        shape,
        meta.spacing,
        read_raw_f32(&volume_path, voxel_count(shape))?,
    )?;
    let region = read_mask(&region_path, shape)?;
    let lesion = role_file("lesion")
        .map(|p| read_mask(&p, shape))
        .transpose()?;

    Ok(LabeledSample {
        id: meta.id,
        volume,
        region,
        grade_rater1: Grade(meta.grade_rater1),
        grade_rater2: Grade(meta.grade_rater2),
        true_proportion: meta.true_proportion,
        lesion,
        pattern: meta.pattern,
    })
}

/// One row of `labels.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub id: String,
    pub grade_rater1: u8,
    pub grade_rater2: u8,
    pub true_proportion: Option<f64>,
    pub pattern: Option<Pattern>,
}

impl From<&LabeledSample> for LabelRow {
    fn from(s: &LabeledSample) -> Self {
        Self {
            id: s.id.clone(),
            grade_rater1: s.grade_rater1.0,
            grade_rater2: s.grade_rater2.0,
            true_proportion: s.true_proportion,
            pattern: s.pattern,
        }
    }
}

pub fn write_labels_csv(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<LabelRow>> {
    if !path.exists() {
        return Err(VolumeError::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| VolumeError::CorruptHeader {
                file: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> VolumeError {
    VolumeError::CorruptHeader {
        file: path.to_path_buf(),
        reason: e.to_string(),
    }
}
