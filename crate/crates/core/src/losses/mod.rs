//! Interval losses for learning from graded proportions.
//!
//! A grade `y` of an `ncat`-category scale stands for the proportion
//! interval `[thresh[y], thresh[y + 1])` of a [`ThresholdVector`]. The LPI
//! loss sums one weighted cross-entropy per inner threshold, comparing a
//! steep sigmoid of `ŷ − thresh[c]` against the indicator `y ≥ c`, so it is
//! nearly flat inside the labelled interval and grows outside it.

mod thresholds;

pub use thresholds::{Grade, ThresholdVector};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probability clamp applied before every logarithm.
pub const CE_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("grade {grade} out of range for {ncat} categories")]
    GradeOutOfRange { grade: u8, ncat: usize },
    #[error("empty region")]
    EmptyRegion,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// Thresholds, per-term weights, sigmoid steepness and MILA weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpiConfig {
    pub thresholds: ThresholdVector,
    pub weights: Vec<f64>,
    pub alpha: f64,
    pub w_mila: f64,
}

impl Default for LpiConfig {
    /// Retuned training thresholds with presence-heavy weights.
    fn default() -> Self {
        Self {
            thresholds: ThresholdVector::training(),
            weights: vec![0.5, 0.1, 0.005, 0.005, 0.005],
            alpha: 120.0,
            w_mila: 0.5,
        }
    }
}

impl LpiConfig {
    pub fn validate(&self) -> Result<()> {
        let ncat = self.thresholds.ncat();
        if self.weights.len() != ncat - 1 {
            return Err(LossError::InvalidConfig(format!(
                "{} weights for {ncat} categories (need {})",
                self.weights.len(),
                ncat - 1
            )));
        }
        if self.weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(LossError::InvalidConfig("weights must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.w_mila >= 0.0 && self.w_mila.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "w_mila must be >= 0, got {}",
                self.w_mila
            )));
        }
        Ok(())
    }

    /// Two-category (presence) variant keeping only the first term:
    /// thresholds `(0, thresh[1], 1)` and weight `w[0]`.
    pub fn presence_only(&self) -> Self {
        Self {
            thresholds: ThresholdVector::new(vec![0.0, self.thresholds.presence_threshold(), 1.0])
                .expect("presence threshold lies strictly inside (0, 1)"),
            weights: vec![self.weights[0]],
            alpha: self.alpha,
            w_mila: self.w_mila,
        }
    }

    pub fn ncat(&self) -> usize {
        self.thresholds.ncat()
    }
}

/// `1 / (1 + exp(−alpha·x))`, evaluated without overflow for any `alpha·x`.
pub fn sharp_sigmoid(x: f64, alpha: f64) -> f64 {
    let z = alpha * x;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of probability `p` against target `t ∈ {0, 1}` with
/// `p` clamped to `[CE_CLAMP, 1 − CE_CLAMP]`. Also returns dCE/dp, which is
/// zero where the clamp is active.
fn clamped_ce(p: f64, target: bool) -> (f64, f64) {
    let lo = CE_CLAMP;
    let hi = 1.0 - CE_CLAMP;
    let clamped = !(lo..=hi).contains(&p);
    let pc = p.clamp(lo, hi);
    if target {
        (-pc.ln(), if clamped { 0.0 } else { -1.0 / pc })
    } else {
        (
            -(1.0 - pc).ln(),
            if clamped { 0.0 } else { 1.0 / (1.0 - pc) },
        )
    }
}

fn check_grade(y: Grade, ncat: usize) -> Result<()> {
    if y.index() >= ncat {
        return Err(LossError::GradeOutOfRange { grade: y.0, ncat });
    }
    Ok(())
}

/// Individual weighted terms `w_c · CE(σ_α(ŷ − thresh[c]), [y ≥ c])` for
/// `c = 1..ncat−1`, each paired with its derivative in `ŷ`.
pub fn lpi_terms(y_hat: f64, y: Grade, cfg: &LpiConfig) -> Result<Vec<(f64, f64)>> {
    let ncat = cfg.ncat();
    check_grade(y, ncat)?;
    let t = cfg.thresholds.values();
    Ok((1..ncat)
        .map(|c| {
            let s = sharp_sigmoid(y_hat - t[c], cfg.alpha);
            let (ce, dce_dp) = clamped_ce(s, y.index() >= c);
            let w = cfg.weights[c - 1];
            (w * ce, w * dce_dp * cfg.alpha * s * (1.0 - s))
        })
        .collect())
}

/// LPI loss and its derivative with respect to `ŷ`.
pub fn lpi_loss_and_grad(y_hat: f64, y: Grade, cfg: &LpiConfig) -> Result<(f64, f64)> {
    let terms = lpi_terms(y_hat, y, cfg)?;
    Ok(terms
        .iter()
        .fold((0.0, 0.0), |(v, g), &(tv, tg)| (v + tv, g + tg)))
}

pub fn lpi_loss(y_hat: f64, y: Grade, cfg: &LpiConfig) -> Result<f64> {
    lpi_loss_and_grad(y_hat, y, cfg).map(|(v, _)| v)
}

/// Negative-bag term: for `y = 0`, `w_mila` times the mean over region
/// voxels of `−ln(1 − p_i)`; exactly zero otherwise. Returns the value and
/// the gradient with respect to every entry of `prob_map` (zero outside the
/// region).
pub fn mila_loss(
    prob_map: &[f64],
    region: &[u8],
    y: Grade,
    cfg: &LpiConfig,
) -> Result<(f64, Vec<f64>)> {
    if prob_map.len() != region.len() {
        return Err(LossError::LengthMismatch(format!(
            "prob_map has {} voxels, region {}",
            prob_map.len(),
            region.len()
        )));
    }
    let m = region.iter().filter(|&&r| r != 0).count();
    if m == 0 {
        return Err(LossError::EmptyRegion);
    }
    let mut grad = vec![0.0; prob_map.len()];
    if y.0 != 0 || cfg.w_mila == 0.0 {
        return Ok((0.0, grad));
    }
    let scale = cfg.w_mila / m as f64;
    let mut total = 0.0;
    for ((&p, &r), g) in prob_map.iter().zip(region).zip(grad.iter_mut()) {
        if r == 0 {
            continue;
        }
        let (ce, d) = clamped_ce(p, false);
        total += ce;
        *g = scale * d;
    }
    Ok((scale * total, grad))
}

/// Root of the batch mean of squared errors between predicted scores and
/// integer grades, with its gradient per prediction.
pub fn rms_loss(scores: &[f64], grades: &[Grade]) -> Result<(f64, Vec<f64>)> {
    if scores.len() != grades.len() || scores.is_empty() {
        return Err(LossError::LengthMismatch(format!(
            "{} scores for {} grades",
            scores.len(),
            grades.len()
        )));
    }
    let n = scores.len() as f64;
    let errs: Vec<f64> = scores
        .iter()
        .zip(grades)
        .map(|(&s, g)| s - g.0 as f64)
        .collect();
    let rms = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let grad = if rms > 0.0 {
        errs.iter().map(|e| e / (n * rms)).collect()
    } else {
        vec![0.0; errs.len()]
    };
    Ok((rms, grad))
}

/// Presence decision: positive iff `ŷ ≥ thresh[1]`.
pub fn presence_threshold_classify(y_hat: f64, thresholds: &ThresholdVector) -> bool {
    y_hat >= thresholds.presence_threshold()
}
