use serde::{Deserialize, Serialize};

use super::{LossError, Result};

/// Ordinal extent grade, `0` meaning no lesion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Grade(pub u8);

impl Grade {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Presence label: grade 0 stays 0, everything else becomes 1.
    pub fn presence(self) -> Grade {
        Grade(self.0.min(1))
    }
}

/// Strictly increasing proportions `0 = t[0] < t[1] < … < t[ncat] = 1`.
/// Grade `g` covers `[t[g], t[g + 1])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ThresholdVector {
    thresh: Vec<f64>,
}

impl TryFrom<Vec<f64>> for ThresholdVector {
    type Error = LossError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ThresholdVector> for Vec<f64> {
    fn from(t: ThresholdVector) -> Self {
        t.thresh
    }
}

impl ThresholdVector {
    pub fn new(thresh: Vec<f64>) -> Result<Self> {
        if thresh.len() < 3 {
            return Err(LossError::InvalidThresholds(format!(
                "need at least 3 entries (ncat >= 2), got {}",
                thresh.len()
            )));
        }
        if thresh[0] != 0.0 || *thresh.last().unwrap() != 1.0 {
            return Err(LossError::InvalidThresholds(
                "first must be 0 and last must be 1".into(),
            ));
        }
        if thresh.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(LossError::InvalidThresholds(format!(
                "not strictly increasing: {thresh:?}"
            )));
        }
        Ok(Self { thresh })
    }

    /// Visual scoring intervals 0%, 1–5%, 6–25%, 26–50%, 51–75%, 76–100%.
    pub fn scoring() -> Self {
        Self::new(vec![0.0, 0.005, 0.055, 0.255, 0.505, 0.755, 1.0]).expect("valid")
    }

    /// Retuned thresholds used by the training loss.
    pub fn training() -> Self {
        Self::new(vec![0.0, 0.005, 0.055, 0.165, 0.385, 0.605, 1.0]).expect("valid")
    }

    pub fn ncat(&self) -> usize {
        self.thresh.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.thresh
    }

    pub fn presence_threshold(&self) -> f64 {
        self.thresh[1]
    }

    pub fn top_grade(&self) -> Grade {
        Grade((self.ncat() - 1) as u8)
    }

    /// `[lower, upper)` of grade `g`.
    pub fn interval(&self, g: Grade) -> (f64, f64) {
        (self.thresh[g.index()], self.thresh[g.index() + 1])
    }

    /// Half-open interval lookup; proportions at or above 1 map to the top
    /// grade and negative ones to grade 0.
    pub fn grade_of(&self, p: f64) -> Grade {
        let inner = &self.thresh[1..self.ncat()];
        Grade(inner.iter().take_while(|&&t| p >= t).count() as u8)
    }

    /// Interval midpoint; grade 0 maps to 0.
    pub fn midpoint(&self, g: Grade) -> f64 {
        if g.0 == 0 {
            return 0.0;
        }
        let (lo, hi) = self.interval(g);
        0.5 * (lo + hi)
    }
}
