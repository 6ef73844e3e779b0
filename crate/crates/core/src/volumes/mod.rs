//! Volumes, region masks, labelled samples, and the operations applied to
//! them before they reach a network: cropping to the region, axial
//! augmentation, and the on-disk cohort format.

mod augment;
mod edt;
pub(crate) mod io;
mod preprocess;

pub use augment::{augment, AugmentConfig};
pub use edt::distance_to_outside;
pub use io::{load_sample, read_labels_csv, save_sample, write_labels_csv, LabelRow};
pub use preprocess::{
    crop_mask, crop_volume, preprocess_region, preprocess_sample, region_bbox, CropBox,
    PreprocessOptions,
};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::Grade;

/// Default intensity written outside the region, in HU.
pub const DEFAULT_FILL_HU: f32 = -800.0;

/// `(depth, height, width)` voxel counts.
pub type Shape3 = [usize; 3];

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("empty region")]
    EmptyRegion,
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("invalid spacing {0:?}")]
    InvalidSpacing([f32; 3]),
    #[error("non-finite intensity at voxel {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mask {0} contains values other than 0 and 1")]
    NonBinaryMask(String),
    #[error("payload size mismatch in {file}: expected {expected} bytes, found {actual}")]
    PayloadSizeMismatch {
        file: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("corrupt header {file}: {reason}")]
    CorruptHeader { file: PathBuf, reason: String },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("invalid label data: {0}")]
    InvalidLabel(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

pub(crate) fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.len() != 3 || shape.contains(&0) {
        return Err(VolumeError::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

#[inline]
pub fn linear_index(shape: Shape3, z: usize, y: usize, x: usize) -> usize {
    (z * shape[1] + y) * shape[2] + x
}

pub fn voxel_count(shape: Shape3) -> usize {
    shape.iter().product()
}

/// 3D scalar grid of HU-like intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: Shape3,
    /// mm per voxel along (depth, height, width).
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape3, spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        let v = Self {
            shape,
            spacing,
            data,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn filled(shape: Shape3, spacing: [f32; 3], value: f32) -> Self {
        Self {
            shape,
            spacing,
            data: vec![value; voxel_count(shape)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_shape(&self.shape)?;
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolumeError::InvalidSpacing(self.spacing));
        }
        if self.data.len() != voxel_count(self.shape) {
            return Err(VolumeError::ShapeMismatch(format!(
                "volume of shape {:?} has {} voxels",
                self.shape,
                self.data.len()
            )));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(())
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[linear_index(self.shape, z, y, x)]
    }
}

/// Binary 3D grid. Used for bag regions and for planted lesions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub shape: Shape3,
    pub data: Vec<u8>,
}

/// The bag over which proportions are defined.
pub type RegionMask = Mask;

impl Mask {
    pub fn new(shape: Shape3, data: Vec<u8>) -> Result<Self> {
        validate_shape(&shape)?;
        if data.len() != voxel_count(shape) {
            return Err(VolumeError::ShapeMismatch(format!(
                "mask of shape {shape:?} has {} voxels",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(VolumeError::NonBinaryMask("<memory>".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn empty(shape: Shape3) -> Self {
        Self {
            shape,
            data: vec![0; voxel_count(shape)],
        }
    }

    pub fn full(shape: Shape3) -> Self {
        Self {
            shape,
            data: vec![1; voxel_count(shape)],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[linear_index(self.shape, z, y, x)] != 0
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, on: bool) {
        let i = linear_index(self.shape, z, y, x);
        self.data[i] = on as u8;
    }

    /// Number of voxels set in both masks.
    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a != 0 && b != 0)
            .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    None,
    Paraseptal,
    Centrilobular,
}

impl Pattern {
    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::None => "none",
            Pattern::Paraseptal => "paraseptal",
            Pattern::Centrilobular => "centrilobular",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Pattern::None),
            "paraseptal" => Some(Pattern::Paraseptal),
            "centrilobular" => Some(Pattern::Centrilobular),
            _ => None,
        }
    }
}

/// A bag (image + region) with its labels and, for synthetic data, the
/// planted ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub volume: Volume,
    pub region: RegionMask,
    pub grade_rater1: Grade,
    pub grade_rater2: Grade,
    pub true_proportion: Option<f64>,
    pub lesion: Option<Mask>,
    pub pattern: Option<Pattern>,
}

impl LabeledSample {
    /// Checks shapes, label ranges, and consistency of the planted lesion
    /// with `true_proportion`.
    pub fn validate(&self, ncat: usize) -> Result<()> {
        self.volume.validate()?;
        if self.region.shape != self.volume.shape {
            return Err(VolumeError::ShapeMismatch("region vs volume".into()));
        }
        let region_count = self.region.count();
        if region_count == 0 {
            return Err(VolumeError::EmptyRegion);
        }
        for g in [self.grade_rater1, self.grade_rater2] {
            if g.index() >= ncat {
                return Err(VolumeError::InvalidLabel(format!(
                    "grade {} with ncat {ncat}",
                    g.0
                )));
            }
        }
        if let Some(p) = self.true_proportion {
            if !(0.0..=1.0).contains(&p) {
                return Err(VolumeError::InvalidLabel(format!("proportion {p}")));
            }
        }
        if let Some(lesion) = &self.lesion {
            if lesion.shape != self.volume.shape {
                return Err(VolumeError::ShapeMismatch("lesion vs volume".into()));
            }
            if let Some(p) = self.true_proportion {
                let measured = lesion.intersection_count(&self.region) as f64 / region_count as f64;
                if (measured - p).abs() > 1e-6 {
                    return Err(VolumeError::InvalidLabel(format!(
                        "true_proportion {p} but lesion covers {measured}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fraction of region voxels covered by the lesion mask.
    pub fn lesion_proportion(&self) -> Option<f64> {
        let lesion = self.lesion.as_ref()?;
        let n = self.region.count();
        (n > 0).then(|| lesion.intersection_count(&self.region) as f64 / n as f64)
    }
}
