//! Training protocol: stratified triplet batches, a presence (MIL) phase
//! followed by an extent (LLP) phase, per-phase model selection on the
//! validation split, resumable state, and inference helpers.

mod run;
mod sampler;
mod split;

pub use run::{train, EpochRecord, TrainControl, TrainOutcome};
pub use sampler::{sample_batch, Strata};
pub use split::stratified_split;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{Grade, LossError, LpiConfig, ThresholdVector};
use crate::models::{upsample_to_input, Geometry, HeadKind, Model, ModelConfig, ModelError};
use crate::nncore::{AdadeltaConfig, NnError};
use crate::volumes::{preprocess_sample, AugmentConfig, CropBox, LabeledSample, Mask, VolumeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("missing strata: grades {0}")]
    MissingStrata(String),
    #[error("training diverged at epoch {epoch}, iteration {iter}: {reason}")]
    Diverged {
        epoch: usize,
        iter: usize,
        reason: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{path}: {reason}")]
    Io {
        path: std::path::PathBuf,
        reason: String,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Presence-only interval loss (first threshold).
    Lpi2,
    /// Full interval loss over all grades.
    Lpi6,
    /// Root-mean-square error on the integer grade.
    Rms,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub loss: LossKind,
    pub epochs: usize,
    /// Add the negative-bag term; defaults to on for the proportion head.
    #[serde(default)]
    pub mila: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    PresenceAuc,
    ExtentAuc,
}

impl PhaseSpec {
    pub fn selection_metric(&self) -> SelectionMetric {
        match self.loss {
            LossKind::Lpi2 => SelectionMetric::PresenceAuc,
            LossKind::Lpi6 | LossKind::Rms => SelectionMetric::ExtentAuc,
        }
    }

    pub fn uses_mila(&self, head: HeadKind) -> bool {
        self.mila.unwrap_or(head == HeadKind::Proportion)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub phases: Vec<PhaseSpec>,
    pub batch_size: usize,
    pub iters_per_epoch: usize,
    pub lpi: LpiConfig,
    pub adadelta: AdadeltaConfig,
    pub augment: AugmentConfig,
    /// Seed for batch sampling and augmentation.
    pub seed: u64,
    /// Validate every this many epochs (the last epoch of a phase always
    /// validates).
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            phases: vec![
                PhaseSpec {
                    loss: LossKind::Lpi2,
                    epochs: 30,
                    mila: None,
                },
                PhaseSpec {
                    loss: LossKind::Lpi6,
                    epochs: 30,
                    mila: None,
                },
            ],
            batch_size: 3,
            iters_per_epoch: 100,
            lpi: LpiConfig::default(),
            adadelta: AdadeltaConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            validate_every: 1,
        }
    }
}

impl TrainConfig {
    /// Score regression baseline: linear GAP output, RMS loss for the same
    /// total number of epochs.
    pub fn rms_baseline(&self) -> Self {
        let epochs = self.phases.iter().map(|p| p.epochs).sum();
        let mut cfg = self.clone();
        cfg.model.head = HeadKind::Gap;
        cfg.model.linear_output = true;
        cfg.model.head_bias_init = 0.0;
        cfg.phases = vec![PhaseSpec {
            loss: LossKind::Rms,
            epochs,
            mila: Some(false),
        }];
        cfg
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        self.model.validate()?;
        self.lpi.validate()?;
        self.adadelta.validate()?;
        if self.batch_size < 3 || !self.batch_size.is_multiple_of(3) {
            return bad(format!(
                "batch_size {} must be a positive multiple of 3",
                self.batch_size
            ));
        }
        if self.phases.is_empty() {
            return bad("at least one phase is required".into());
        }
        if self.validate_every == 0 {
            return bad("validate_every must be >= 1".into());
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.epochs == 0 {
                return bad(format!("phase {i}: epochs must be >= 1"));
            }
            let linear = self.model.linear_output;
            match p.loss {
                LossKind::Rms if !linear => {
                    return bad(format!("phase {i}: RMS loss needs linear_output"))
                }
                LossKind::Lpi2 | LossKind::Lpi6 if linear => {
                    return bad(format!("phase {i}: interval losses need a sigmoid output"))
                }
                _ => {}
            }
            if p.uses_mila(self.model.head) && self.model.head != HeadKind::Proportion {
                return bad(format!("phase {i}: MILA needs the proportion head"));
            }
        }
        Ok(())
    }
}

/// How a model's raw output maps to a grade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputMapping {
    /// Proportion read through the training thresholds.
    Proportion { thresholds: ThresholdVector },
    /// Score rounded to the nearest grade.
    Score { ncat: usize },
}

impl OutputMapping {
    pub fn for_config(cfg: &TrainConfig) -> Self {
        if cfg.model.linear_output {
            OutputMapping::Score {
                ncat: cfg.lpi.ncat(),
            }
        } else {
            OutputMapping::Proportion {
                thresholds: cfg.lpi.thresholds.clone(),
            }
        }
    }

    pub fn grade(&self, y_hat: f64) -> Grade {
        match self {
            OutputMapping::Proportion { thresholds } => thresholds.grade_of(y_hat),
            OutputMapping::Score { ncat } => {
                Grade(y_hat.round().clamp(0.0, (*ncat - 1) as f64) as u8)
            }
        }
    }

    /// Presence decision: the first threshold for proportions, grade ≥ 1
    /// for scores.
    pub fn presence(&self, y_hat: f64) -> bool {
        match self {
            OutputMapping::Proportion { thresholds } => {
                crate::losses::presence_threshold_classify(y_hat, thresholds)
            }
            OutputMapping::Score { .. } => self.grade(y_hat).0 >= 1,
        }
    }
}

/// A sample cropped to its region the way the model expects it.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub sample: LabeledSample,
    pub crop: CropBox,
    /// Shape of the uncropped grid.
    pub source_shape: [usize; 3],
}

pub fn prepare(sample: &LabeledSample, model: &ModelConfig) -> Result<PreparedSample> {
    let (cropped, crop) = preprocess_sample(sample, model.preprocess_options())?;
    Ok(PreparedSample {
        sample: cropped,
        crop,
        source_shape: sample.volume.shape,
    })
}

/// Inference result for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePrediction {
    pub y_hat: f64,
    pub presence: bool,
    pub grade: Grade,
    /// Probability map on the feature grid (proportion head only).
    pub prob_map: Option<Vec<f32>>,
    pub geometry: Geometry,
    /// Region on the feature grid, where the head uses one.
    pub aligned_region: Option<Mask>,
    pub crop: CropBox,
    pub source_shape: [usize; 3],
}

impl SamplePrediction {
    /// Probability map resampled to the uncropped input grid (zero outside
    /// the aligned cells).
    pub fn prob_map_on_source(&self) -> Option<Vec<f32>> {
        let map = self.prob_map.as_ref()?;
        let up = upsample_to_input(map, &self.geometry);
        let [d, h, w] = self.source_shape;
        let cs = self.crop.shape;
        let mut out = vec![0.0; d * h * w];
        for z in 0..cs[0] {
            for y in 0..cs[1] {
                for x in 0..cs[2] {
                    let s = [
                        self.crop.origin[0] + z as isize,
                        self.crop.origin[1] + y as isize,
                        self.crop.origin[2] + x as isize,
                    ];
                    if s.iter()
                        .zip(self.source_shape)
                        .all(|(&c, n)| c >= 0 && (c as usize) < n)
                    {
                        out[(s[0] as usize * h + s[1] as usize) * w + s[2] as usize] =
                            up[(z * cs[1] + y) * cs[2] + x];
                    }
                }
            }
        }
        Some(out)
    }

    /// Probability map thresholded at `threshold` on the source grid,
    /// restricted to `region`.
    pub fn segmentation(&self, region: &Mask, threshold: f32) -> Option<Mask> {
        let map = self.prob_map_on_source()?;
        let data = map
            .iter()
            .zip(&region.data)
            .map(|(&p, &r)| (r != 0 && p >= threshold) as u8)
            .collect();
        Some(Mask {
            shape: region.shape,
            data,
        })
    }
}

/// Prepares `sample`, runs the model, and maps the output to a grade.
pub fn predict(
    model: &Model<f32>,
    mapping: &OutputMapping,
    sample: &LabeledSample,
) -> Result<SamplePrediction> {
    let prepared = prepare(sample, &model.config)?;
    predict_prepared(model, mapping, &prepared)
}

pub fn predict_prepared(
    model: &Model<f32>,
    mapping: &OutputMapping,
    p: &PreparedSample,
) -> Result<SamplePrediction> {
    let pred = model.predict(&p.sample.volume, &p.sample.region)?;
    Ok(SamplePrediction {
        y_hat: pred.y_hat,
        presence: mapping.presence(pred.y_hat),
        grade: mapping.grade(pred.y_hat),
        prob_map: pred.prob_map,
        geometry: pred.geometry,
        aligned_region: pred.aligned_region,
        crop: p.crop,
        source_shape: p.source_shape,
    })
}
