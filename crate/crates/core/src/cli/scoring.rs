//! Per-sample scoring shared by `eval`, `pattern`, and the experiment
//! harness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evalmetrics::{boundary_ratio, densitometry_laa950, dice, EvalInput, LAA_THRESHOLD_HU};
use crate::losses::ThresholdVector;
use crate::models::Model;
use crate::trainer::{predict, OutputMapping, TrainError};
use crate::volumes::{LabeledSample, Mask, Pattern};

/// Source of `y_hat` (and optionally a segmentation) for a sample.
#[derive(Clone, Debug)]
pub enum Scorer {
    Model {
        model: Model<f32>,
        mapping: OutputMapping,
    },
    /// `y_hat` is the planted proportion and the segmentation the planted
    /// lesion.
    TruthOracle { thresholds: ThresholdVector },
}

/// What the boundary ratio is computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternSource {
    /// The binary segmentation (prob map ≥ threshold, or the planted mask).
    Segmentation,
    /// Probability mass of the upsampled prob map.
    ProbMass,
    /// The planted lesion mask, whatever the scorer.
    LesionMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreOptions {
    /// Prob-map threshold for segmentations.
    pub seg_threshold: f64,
    /// Near-boundary margin in input voxels.
    pub pattern_margin_vox: f64,
    pub pattern_source: PatternSource,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            seg_threshold: 0.5,
            pattern_margin_vox: 3.0,
            pattern_source: PatternSource::Segmentation,
        }
    }
}

/// One scored sample; spatial fields are on the sample's own grid.
#[derive(Clone, Debug)]
pub struct ScoredSample {
    pub input: EvalInput,
    pub true_proportion: Option<f64>,
    pub segmentation: Option<Mask>,
    /// Dice of the segmentation against the planted lesion mask.
    pub dice: Option<f64>,
}

fn lesion_foreground(sample: &LabeledSample) -> Option<Vec<f64>> {
    sample
        .lesion
        .as_ref()
        .map(|l| l.data.iter().map(|&v| v as f64).collect())
}

fn score_one(
    scorer: &Scorer,
    sample: &LabeledSample,
    opts: &ScoreOptions,
) -> Result<ScoredSample, TrainError> {
    let (y_hat, grade, segmentation, mass) = match scorer {
        Scorer::Model { model, mapping } => {
            let p = predict(model, mapping, sample)?;
            let seg = p.segmentation(&sample.region, opts.seg_threshold as f32);
            let mass = p
                .prob_map_on_source()
                .map(|m| m.iter().map(|&v| v as f64).collect::<Vec<_>>());
            (p.y_hat, p.grade, seg, mass)
        }
        Scorer::TruthOracle { thresholds } => {
            let y = sample
                .true_proportion
                .or_else(|| sample.lesion_proportion())
                .ok_or_else(|| {
                    TrainError::InvalidConfig(format!(
                        "{}: no planted proportion for the truth oracle",
                        sample.id
                    ))
                })?;
            (
                y,
                thresholds.grade_of(y),
                sample.lesion.clone(),
                lesion_foreground(sample),
            )
        }
    };
    let foreground = match opts.pattern_source {
        PatternSource::Segmentation => segmentation
            .as_ref()
            .map(|m| m.data.iter().map(|&v| v as f64).collect()),
        PatternSource::ProbMass => mass,
        PatternSource::LesionMask => lesion_foreground(sample),
    };
    let ratio = match foreground {
        Some(f) => Some(
            boundary_ratio(&f, &sample.region, opts.pattern_margin_vox).map_err(|e| {
                TrainError::InvalidConfig(format!("{}: boundary ratio: {e}", sample.id))
            })?,
        ),
        None => None,
    };
    let laa950 = densitometry_laa950(&sample.volume, &sample.region, LAA_THRESHOLD_HU).ok();
    let dice = match (&segmentation, &sample.lesion) {
        (Some(s), Some(l)) => Some(dice(s, l)),
        _ => None,
    };
    Ok(ScoredSample {
        input: EvalInput {
            id: sample.id.clone(),
            y_hat,
            predicted_grade: grade,
            grade_rater1: sample.grade_rater1,
            grade_rater2: sample.grade_rater2,
            laa950,
            boundary_ratio: ratio,
            pattern: sample.pattern.filter(|&p| p != Pattern::None),
        },
        true_proportion: sample.true_proportion,
        segmentation,
        dice,
    })
}

/// Scores every sample (in order).
pub fn score_samples(
    scorer: &Scorer,
    samples: &[LabeledSample],
    opts: &ScoreOptions,
) -> Result<Vec<ScoredSample>, TrainError> {
    samples
        .par_iter()
        .map(|s| score_one(scorer, s, opts))
        .collect()
}

/// Mean Dice over samples whose first-rater grade is at least `min_grade`
/// and that have both a segmentation and a planted mask.
pub fn mean_dice(scored: &[ScoredSample], min_grade: u8) -> Option<f64> {
    let v: Vec<f64> = scored
        .iter()
        .filter(|s| s.input.grade_rater1.0 >= min_grade)
        .filter_map(|s| s.dice)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthcohort::{generate_cohort, CohortSpec};

    #[test]
    fn truth_oracle_is_exact() {
        let spec = CohortSpec {
            n_samples: 12,
            grid_shape: [20, 20, 20],
            ..CohortSpec::default()
        };
        let cohort = generate_cohort(&spec).unwrap();
        let scorer = Scorer::TruthOracle {
            thresholds: ThresholdVector::scoring(),
        };
        let scored = score_samples(&scorer, &cohort, &ScoreOptions::default()).unwrap();
        for (s, c) in scored.iter().zip(&cohort) {
            assert_eq!(s.input.predicted_grade, c.grade_rater1);
            assert!((s.input.laa950.unwrap() - c.true_proportion.unwrap()).abs() <= 0.005);
            if c.lesion.as_ref().is_some_and(|l| l.count() > 0) {
                assert_eq!(s.dice, Some(1.0));
            }
        }
        assert_eq!(mean_dice(&scored, 2).unwrap_or(1.0), 1.0);
    }
}
