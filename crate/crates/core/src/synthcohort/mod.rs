//! Synthetic cohort with planted lesions and simulated raters.
//!
//! Every sample is a centred ellipsoidal region on a small grid. Lesion
//! voxels are far below −950 HU and region background is above it, so the
//! planted proportion is recoverable exactly by densitometry. Lesions follow
//! one of two spatial patterns: near the region boundary (paraseptal) or
//! away from it (centrilobular).

mod sample;

pub use sample::generate_sample;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::losses::{Grade, ThresholdVector};
use crate::volumes::{
    load_sample, read_labels_csv, save_sample, write_labels_csv, LabelRow, LabeledSample, Pattern,
    Shape3, VolumeError,
};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("invalid cohort spec: {0}")]
    InvalidSpec(String),
    #[error("cannot place proportion for grade {grade}: {reason}")]
    CannotPlace { grade: u8, reason: String },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T, E = CohortError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSpec {
    pub n_samples: usize,
    pub grid_shape: Shape3,
    pub spacing: [f32; 3],
    /// Prevalence of each grade; must sum to 1.
    pub grade_distribution: Vec<f64>,
    /// Scoring intervals defining the ground-truth grade.
    pub thresholds: ThresholdVector,
    pub lesion_intensity: f32,
    /// Standard deviation of lesion noise, truncated at ±3σ.
    pub lesion_noise_sigma: f32,
    pub background_intensity_range: [f32; 2],
    /// Intensity of voxels outside the region.
    pub exterior_intensity_range: [f32; 2],
    /// Allowed fraction of the grid covered by the region.
    pub region_fraction: [f64; 2],
    pub blob_radius_range: [f64; 2],
    pub pattern_margin_vox: usize,
    /// Probability that a rater reports an adjacent grade.
    pub rater_confusion: f64,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_samples: 400,
            grid_shape: [32, 32, 32],
            spacing: [1.0, 1.0, 1.0],
            grade_distribution: vec![0.4, 0.2, 0.15, 0.1, 0.1, 0.05],
            thresholds: ThresholdVector::scoring(),
            lesion_intensity: -970.0,
            lesion_noise_sigma: 5.0,
            background_intensity_range: [-850.0, -750.0],
            exterior_intensity_range: [-100.0, 100.0],
            region_fraction: [0.4, 0.6],
            blob_radius_range: [2.0, 4.5],
            pattern_margin_vox: 3,
            rater_confusion: 0.0,
            seed: 0,
        }
    }
}

/// LAA cut-off the intensities are designed around.
const DENSITOMETRY_CUTOFF: f32 = -950.0;

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CohortError::InvalidSpec(m));
        let ncat = self.thresholds.ncat();
        if self.grade_distribution.len() != ncat {
            return bad(format!(
                "grade_distribution has {} entries, thresholds define {ncat} grades",
                self.grade_distribution.len()
            ));
        }
        if self
            .grade_distribution
            .iter()
            .any(|&p| !(p >= 0.0 && p.is_finite()))
        {
            return bad("grade_distribution entries must be nonnegative".into());
        }
        let total: f64 = self.grade_distribution.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("grade_distribution sums to {total}, expected 1"));
        }
        if self.grid_shape.contains(&0) {
            return bad(format!("grid_shape {:?} has a zero axis", self.grid_shape));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad(format!("spacing {:?} must be positive", self.spacing));
        }
        if !(self.lesion_noise_sigma >= 0.0 && self.lesion_noise_sigma.is_finite()) {
            return bad("lesion_noise_sigma must be >= 0".into());
        }
        if !(self.lesion_intensity + 3.0 * self.lesion_noise_sigma < DENSITOMETRY_CUTOFF) {
            return bad(format!(
                "lesion_intensity + 3 sigma = {} must stay below {DENSITOMETRY_CUTOFF}",
                self.lesion_intensity + 3.0 * self.lesion_noise_sigma
            ));
        }
        let [lo, hi] = self.background_intensity_range;
        if !(lo <= hi && lo >= DENSITOMETRY_CUTOFF && hi.is_finite()) {
            return bad(format!("background_intensity_range [{lo}, {hi}] must be ordered and >= {DENSITOMETRY_CUTOFF}"));
        }
        let [lo, hi] = self.exterior_intensity_range;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return bad(format!(
                "exterior_intensity_range [{lo}, {hi}] must be ordered"
            ));
        }
        let [lo, hi] = self.region_fraction;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return bad(format!("region_fraction [{lo}, {hi}] must lie in (0, 1)"));
        }
        let [lo, hi] = self.blob_radius_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!(
                "blob_radius_range [{lo}, {hi}] must be positive and ordered"
            ));
        }
        let min_axis = *self.grid_shape.iter().min().unwrap();
        if self.pattern_margin_vox == 0 || 2 * self.pattern_margin_vox >= min_axis {
            return bad(format!(
                "pattern_margin_vox {} must be >= 1 and fit twice inside the grid",
                self.pattern_margin_vox
            ));
        }
        if !(0.0..1.0).contains(&self.rater_confusion) {
            return bad(format!(
                "rater_confusion {} must lie in [0, 1)",
                self.rater_confusion
            ));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; decorrelates derived seeds.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `stream` of item `index` under base `seed`.
pub fn derive_seed(seed: u64, index: u64, stream: u64) -> u64 {
    mix64(mix64(mix64(seed) ^ index) ^ stream)
}

/// True interval grade of `proportion`, replaced with probability
/// `confusion` by an adjacent grade (the only neighbour at either end).
pub fn simulate_rater(
    proportion: f64,
    thresholds: &ThresholdVector,
    confusion: f64,
    rng_seed: u64,
) -> Grade {
    let truth = thresholds.grade_of(proportion);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    if !rng.gen_bool(confusion.clamp(0.0, 1.0)) {
        return truth;
    }
    let top = thresholds.top_grade().0;
    let up = match truth.0 {
        0 => true,
        g if g == top => false,
        _ => rng.gen_bool(0.5),
    };
    Grade(if up { truth.0 + 1 } else { truth.0 - 1 })
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:04}")
}

/// Sample `index` of the cohort defined by `spec`, independent of every
/// other index.
pub fn generate_indexed(spec: &CohortSpec, index: usize) -> Result<LabeledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64, 0));
    let dist = WeightedIndex::new(&spec.grade_distribution)
        .map_err(|e| CohortError::InvalidSpec(format!("grade_distribution: {e}")))?;
    let grade = Grade(dist.sample(&mut rng) as u8);
    let pattern = match (grade.0, rng.gen_bool(0.5)) {
        (0, _) => Pattern::None,
        (_, true) => Pattern::Paraseptal,
        (_, false) => Pattern::Centrilobular,
    };
    let mut s = generate_sample(
        spec,
        grade,
        pattern,
        derive_seed(spec.seed, index as u64, 1),
    )?;
    let p = s
        .true_proportion
        .expect("generated samples carry a proportion");
    s.id = sample_id(index);
    s.grade_rater1 = simulate_rater(
        p,
        &spec.thresholds,
        spec.rater_confusion,
        derive_seed(spec.seed, index as u64, 2),
    );
    s.grade_rater2 = simulate_rater(
        p,
        &spec.thresholds,
        spec.rater_confusion,
        derive_seed(spec.seed, index as u64, 3),
    );
    Ok(s)
}

/// All `spec.n_samples` samples in index order. Parallel across samples;
/// the result does not depend on the thread count.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    (0..spec.n_samples)
        .into_par_iter()
        .map(|i| generate_indexed(spec, i))
        .collect()
}

/// Contents of `cohort.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub spec: CohortSpec,
    pub ids: Vec<String>,
    /// SHA-256 of every sample's files, keyed by sample id.
    pub checksums: BTreeMap<String, String>,
    /// SHA-256 over the per-sample checksums and `labels.csv`.
    pub cohort_checksum: String,
}

pub const MANIFEST_FILE: &str = "cohort.json";
pub const LABELS_FILE: &str = "labels.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CohortError + '_ {
    move |source| CohortError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// SHA-256 over the sorted file names and contents of a sample directory.
pub fn sample_checksum(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<_>>()?;
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(p.file_name().unwrap().to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(&p).map_err(io_err(&p))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn combine_checksums(checksums: &BTreeMap<String, String>, labels: &[u8]) -> String {
    let mut h = Sha256::new();
    for (id, c) in checksums {
        h.update(id.as_bytes());
        h.update(c.as_bytes());
    }
    h.update(labels);
    hex::encode(h.finalize())
}

/// Writes `<dir>/<id>/…` per sample, `labels.csv`, and `cohort.json`.
pub fn write_cohort(
    dir: &Path,
    spec: &CohortSpec,
    samples: &[LabeledSample],
) -> Result<CohortManifest> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let checksums = samples
        .par_iter()
        .map(|s| {
            let d = dir.join(&s.id);
            save_sample(&d, s)?;
            Ok((s.id.clone(), sample_checksum(&d)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let rows: Vec<LabelRow> = samples.iter().map(LabelRow::from).collect();
    let labels_path = dir.join(LABELS_FILE);
    write_labels_csv(&labels_path, &rows)?;
    let labels = fs::read(&labels_path).map_err(io_err(&labels_path))?;
    let manifest = CohortManifest {
        spec: spec.clone(),
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        cohort_checksum: combine_checksums(&checksums, &labels),
        checksums,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

/// Loads every sample listed in `labels.csv`, in file order. Grades and
/// pattern come from the CSV row.
pub fn load_cohort(dir: &Path) -> Result<Vec<LabeledSample>> {
    let rows = read_labels_csv(&dir.join(LABELS_FILE))?;
    rows.par_iter()
        .map(|row| {
            let mut s = load_sample(&dir.join(&row.id))?;
            s.grade_rater1 = Grade(row.grade_rater1);
            s.grade_rater2 = Grade(row.grade_rater2);
            s.true_proportion = row.true_proportion;
            s.pattern = row.pattern;
            Ok(s)
        })
        .collect()
}

/// Recomputes the cohort checksum from the files on disk.
pub fn cohort_checksum(dir: &Path) -> Result<String> {
    let rows = read_labels_csv(&dir.join(LABELS_FILE))?;
    let checksums = rows
        .iter()
        .map(|r| Ok((r.id.clone(), sample_checksum(&dir.join(&r.id))?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let labels_path = dir.join(LABELS_FILE);
    let labels = fs::read(&labels_path).map_err(io_err(&labels_path))?;
    Ok(combine_checksums(&checksums, &labels))
}
