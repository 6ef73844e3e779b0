//! Discrimination and agreement metrics, the densitometry baseline, and the
//! boundary-ratio pattern feature.

mod report;
mod spatial;

pub use report::{bootstrap_ci, evaluate, EvalInput, EvalReport, GradeIntervalMap, RATIO_CAP};
pub use spatial::{
    boundary_ratio, densitometry_laa950, dice, pattern_auc, scaled_margin, LAA_THRESHOLD_HU,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{Grade, ThresholdVector};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("single-class input: {0}")]
    SingleClass(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("empty region")]
    EmptyRegion,
    #[error("no positive samples")]
    NoPositives,
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(MetricError::LengthMismatch(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        // positions i..j share ranks i+1..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Mann–Whitney AUC: P(score⁺ > score⁻) + ½·P(score⁺ = score⁻).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len(scores.len(), labels.len(), "scores vs labels")?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass(format!(
            "{n_pos} positives, {n_neg} negatives"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricError::Degenerate("NaN score".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// ROC curve vertices `(fpr, tpr)` from the strictest threshold down,
/// starting at (0, 0) and ending at (1, 1). Tied scores form one step.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    check_len(scores.len(), labels.len(), "scores vs labels")?;
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(MetricError::SingleClass("roc".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (idx, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        let last_of_tie = order.get(idx + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_tie {
            pts.push((fp / n_neg, tp / n_pos));
        }
    }
    Ok(pts)
}

/// AUC of grade 0 against grades ≥ 1.
pub fn presence_auc(y_hats: &[f64], grades: &[Grade]) -> Result<f64> {
    let labels: Vec<bool> = grades.iter().map(|g| g.0 >= 1).collect();
    auc(y_hats, &labels)
}

/// Adjacent-grade AUCs and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtentAuc {
    pub mean: f64,
    /// `(lower grade, AUC of lower vs lower + 1)` for evaluated pairs.
    pub pairs: Vec<(u8, f64)>,
    /// Lower grades of pairs skipped because a grade was absent.
    pub skipped: Vec<u8>,
}

/// Mean of the 1v2, 2v3, … AUCs up to the top grade. Pairs lacking either
/// grade are skipped and listed.
pub fn extent_auc(y_hats: &[f64], grades: &[Grade], ncat: usize) -> Result<ExtentAuc> {
    check_len(y_hats.len(), grades.len(), "predictions vs grades")?;
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for lo in 1..ncat.saturating_sub(1) as u8 {
        let (s, l): (Vec<f64>, Vec<bool>) = y_hats
            .iter()
            .zip(grades)
            .filter(|(_, g)| g.0 == lo || g.0 == lo + 1)
            .map(|(&y, g)| (y, g.0 == lo + 1))
            .unzip();
        match auc(&s, &l) {
            Ok(a) => pairs.push((lo, a)),
            Err(MetricError::SingleClass(_)) => skipped.push(lo),
            Err(e) => return Err(e),
        }
    }
    if pairs.is_empty() {
        return Err(MetricError::SingleClass(
            "no adjacent grade pair has both grades".into(),
        ));
    }
    let mean = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
    Ok(ExtentAuc {
        mean,
        pairs,
        skipped,
    })
}

/// ICC(2,1) between two measurements per subject: two-way random effects,
/// absolute agreement, single measure, from the ANOVA mean squares.
pub fn icc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len(), "icc inputs")?;
    let n = a.len();
    if n < 2 {
        return Err(MetricError::Degenerate(format!(
            "icc needs >= 2 subjects, got {n}"
        )));
    }
    let k = 2.0;
    let nf = n as f64;
    let grand = (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (k * nf);
    let mean_a = a.iter().sum::<f64>() / nf;
    let mean_b = b.iter().sum::<f64>() / nf;
    let ss_rows: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| ((x + y) / k - grand).powi(2))
        .sum::<f64>()
        * k;
    let ss_cols = nf * ((mean_a - grand).powi(2) + (mean_b - grand).powi(2));
    let ss_total: f64 = a.iter().chain(b).map(|v| (v - grand).powi(2)).sum();
    let ss_err = ss_total - ss_rows - ss_cols;
    let msr = ss_rows / (nf - 1.0);
    let msc = ss_cols / (k - 1.0);
    let mse = ss_err / ((nf - 1.0) * (k - 1.0));
    let denom = msr + (k - 1.0) * mse + k * (msc - mse) / nf;
    if !(denom.abs() > 0.0) || !denom.is_finite() {
        return Err(MetricError::Degenerate("zero variance".into()));
    }
    Ok((msr - mse) / denom)
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x.len(), y.len(), "spearman inputs")?;
    if x.len() < 2 {
        return Err(MetricError::Degenerate("spearman needs >= 2 points".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Degenerate("constant input".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Half-open interval lookup.
pub fn grade_from_proportion(p: f64, thresholds: &ThresholdVector) -> Grade {
    thresholds.grade_of(p)
}
