use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{auc, extent_auc, icc, pattern_auc, presence_auc, spearman, Result};
use crate::losses::{Grade, ThresholdVector};
use crate::synthcohort::derive_seed;
use crate::volumes::Pattern;

/// Report value for boundary ratios with an empty interior.
pub const RATIO_CAP: f64 = 1e6;

/// Grade ↔ interval-midpoint conversion under scoring thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeIntervalMap {
    pub thresholds: ThresholdVector,
    pub midpoints: Vec<f64>,
}

impl GradeIntervalMap {
    pub fn new(thresholds: ThresholdVector) -> Self {
        let midpoints = (0..thresholds.ncat() as u8)
            .map(|g| thresholds.midpoint(Grade(g)))
            .collect();
        Self {
            thresholds,
            midpoints,
        }
    }

    pub fn midpoint(&self, g: Grade) -> f64 {
        self.midpoints[g.index()]
    }

    pub fn grade_of(&self, p: f64) -> Grade {
        self.thresholds.grade_of(p)
    }
}

impl Default for GradeIntervalMap {
    fn default() -> Self {
        Self::new(ThresholdVector::scoring())
    }
}

/// Per-sample inputs to [`evaluate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalInput {
    pub id: String,
    /// Raw model output.
    pub y_hat: f64,
    /// Grade the model output converts to.
    pub predicted_grade: Grade,
    pub grade_rater1: Grade,
    pub grade_rater2: Grade,
    /// LAA%-950 of the sample, when the volume was available.
    pub laa950: Option<f64>,
    pub boundary_ratio: Option<f64>,
    pub pattern: Option<Pattern>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    /// Sample count per first-rater grade.
    pub grade_counts: Vec<usize>,
    /// Presence AUC averaged over the two raters.
    pub presence_auc: Option<f64>,
    /// Presence AUC against the maximum of the raters' presence labels.
    pub presence_auc_max_rater: Option<f64>,
    /// Extent AUC averaged over the two raters.
    pub extent_auc: Option<f64>,
    /// First-rater adjacent-pair AUCs.
    pub extent_pairs: Vec<(u8, f64)>,
    pub extent_skipped: Vec<u8>,
    pub icc: Option<f64>,
    pub spearman_r: Option<f64>,
    /// LAA%-950 presence AUC against the maximum rater presence label.
    pub densitometry_auc: Option<f64>,
    pub pattern_auc: Option<f64>,
    /// 95% percentile bootstrap intervals keyed by metric name.
    pub ci: BTreeMap<String, [f64; 2]>,
    /// Metrics that could not be computed, with the reason.
    pub notes: Vec<String>,
}

fn rater_mean(f: impl Fn(&[Grade]) -> Result<f64>, r1: &[Grade], r2: &[Grade]) -> Result<f64> {
    Ok((f(r1)? + f(r2)?) / 2.0)
}

struct Columns {
    y: Vec<f64>,
    pred_mid: Vec<f64>,
    rater_mid: Vec<f64>,
    r1: Vec<Grade>,
    r2: Vec<Grade>,
    presence_max: Vec<bool>,
}

impl Columns {
    fn new(inputs: &[&EvalInput], map: &GradeIntervalMap) -> Self {
        Self {
            y: inputs.iter().map(|s| s.y_hat).collect(),
            pred_mid: inputs
                .iter()
                .map(|s| map.midpoint(s.predicted_grade))
                .collect(),
            rater_mid: inputs
                .iter()
                .map(|s| (map.midpoint(s.grade_rater1) + map.midpoint(s.grade_rater2)) / 2.0)
                .collect(),
            r1: inputs.iter().map(|s| s.grade_rater1).collect(),
            r2: inputs.iter().map(|s| s.grade_rater2).collect(),
            presence_max: inputs
                .iter()
                .map(|s| s.grade_rater1.0.max(s.grade_rater2.0) >= 1)
                .collect(),
        }
    }

    fn presence(&self) -> Result<f64> {
        rater_mean(|g| presence_auc(&self.y, g), &self.r1, &self.r2)
    }

    fn extent(&self, ncat: usize) -> Result<f64> {
        rater_mean(
            |g| extent_auc(&self.y, g, ncat).map(|e| e.mean),
            &self.r1,
            &self.r2,
        )
    }
}

/// Computes every metric over `inputs`. Metrics that are undefined on the
/// given cohort are left empty and explained in `notes`.
pub fn evaluate(
    inputs: &[EvalInput],
    map: &GradeIntervalMap,
    bootstrap_resamples: usize,
    seed: u64,
) -> EvalReport {
    let ncat = map.thresholds.ncat();
    let refs: Vec<&EvalInput> = inputs.iter().collect();
    let cols = Columns::new(&refs, map);
    let mut notes = Vec::new();
    let mut keep = |name: &str, r: Result<f64>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(format!("{name}: {e}"));
            None
        }
    };

    let mut grade_counts = vec![0usize; ncat];
    for s in inputs {
        if let Some(c) = grade_counts.get_mut(s.grade_rater1.index()) {
            *c += 1;
        }
    }
    let presence = keep("presence_auc", cols.presence());
    let presence_max = keep("presence_auc_max_rater", auc(&cols.y, &cols.presence_max));
    let extent_r1 = extent_auc(&cols.y, &cols.r1, ncat);
    let extent = keep("extent_auc", cols.extent(ncat));
    let icc_v = keep("icc", icc(&cols.pred_mid, &cols.rater_mid));
    let spearman_v = keep("spearman_r", spearman(&cols.y, &cols.rater_mid));

    let densitometry = if inputs.iter().all(|s| s.laa950.is_some()) && !inputs.is_empty() {
        let laa: Vec<f64> = inputs.iter().map(|s| s.laa950.unwrap()).collect();
        keep("densitometry_auc", auc(&laa, &cols.presence_max))
    } else {
        None
    };

    let with_ratio: Vec<&EvalInput> = inputs
        .iter()
        .filter(|s| s.boundary_ratio.is_some())
        .collect();
    let pattern = if with_ratio.is_empty() {
        None
    } else {
        let ratios: Vec<f64> = with_ratio
            .iter()
            .map(|s| s.boundary_ratio.unwrap().min(RATIO_CAP))
            .collect();
        let pats: Vec<Pattern> = with_ratio
            .iter()
            .map(|s| s.pattern.unwrap_or(Pattern::None))
            .collect();
        keep("pattern_auc", pattern_auc(&ratios, &pats))
    };

    let mut ci = BTreeMap::new();
    if bootstrap_resamples > 0 && !inputs.is_empty() {
        type Stat<'a> = Box<dyn Fn(&Columns) -> Result<f64> + Sync + 'a>;
        let stats: Vec<(&str, Stat)> = vec![
            ("presence_auc", Box::new(|c: &Columns| c.presence())),
            ("extent_auc", Box::new(move |c: &Columns| c.extent(ncat))),
            (
                "icc",
                Box::new(|c: &Columns| icc(&c.pred_mid, &c.rater_mid)),
            ),
            (
                "spearman_r",
                Box::new(|c: &Columns| spearman(&c.y, &c.rater_mid)),
            ),
        ];
        for (name, stat) in &stats {
            let r = bootstrap_ci(inputs.len(), bootstrap_resamples, seed, |idx| {
                let sub: Vec<&EvalInput> = idx.iter().map(|&i| &inputs[i]).collect();
                stat(&Columns::new(&sub, map)).ok()
            });
            if let Some(b) = r {
                ci.insert(name.to_string(), b);
            }
        }
    }

    let (extent_pairs, extent_skipped) = match extent_r1 {
        Ok(e) => (e.pairs, e.skipped),
        Err(_) => (Vec::new(), (1..ncat.saturating_sub(1) as u8).collect()),
    };
    EvalReport {
        n_samples: inputs.len(),
        grade_counts,
        presence_auc: presence,
        presence_auc_max_rater: presence_max,
        extent_auc: extent,
        extent_pairs,
        extent_skipped,
        icc: icc_v,
        spearman_r: spearman_v,
        densitometry_auc: densitometry,
        pattern_auc: pattern,
        ci,
        notes,
    }
}

/// 95% percentile interval of `stat` over `resamples` bootstrap draws of
/// `n` indices. Draws where `stat` is undefined are dropped; `None` when
/// fewer than half remain. Resample `r` uses its own seed, so the result
/// does not depend on the thread count.
pub fn bootstrap_ci<F>(n: usize, resamples: usize, seed: u64, stat: F) -> Option<[f64; 2]>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    let mut vals: Vec<f64> = (0..resamples)
        .into_par_iter()
        .filter_map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64, 0xB007));
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            stat(&idx).filter(|v| v.is_finite())
        })
        .collect();
    if vals.len() * 2 < resamples || vals.is_empty() {
        return None;
    }
    vals.sort_by(f64::total_cmp);
    let q = |p: f64| vals[((p * (vals.len() - 1) as f64).round() as usize).min(vals.len() - 1)];
    Some([q(0.025), q(0.975)])
}

impl EvalReport {
    /// `metric,value,ci_lo,ci_hi` rows; empty cells for missing values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,ci_lo,ci_hi\n");
        let fields = [
            ("presence_auc", self.presence_auc),
            ("presence_auc_max_rater", self.presence_auc_max_rater),
            ("extent_auc", self.extent_auc),
            ("icc", self.icc),
            ("spearman_r", self.spearman_r),
            ("densitometry_auc", self.densitometry_auc),
            ("pattern_auc", self.pattern_auc),
        ];
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for (name, v) in fields {
            let c = self.ci.get(name);
            out.push_str(&format!(
                "{name},{},{},{}\n",
                fmt(v),
                fmt(c.map(|c| c[0])),
                fmt(c.map(|c| c[1]))
            ));
        }
        for (g, n) in self.grade_counts.iter().enumerate() {
            out.push_str(&format!("count_grade_{g},{n},,\n"));
        }
        out
    }
}
