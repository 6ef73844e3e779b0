use rand::Rng;

use super::{Result, TrainError};
use crate::losses::Grade;

/// Sample indices grouped by grade.
#[derive(Clone, Debug)]
pub struct Strata {
    by_grade: Vec<Vec<usize>>,
    /// Grades ≥ 2 with at least one sample.
    upper: Vec<usize>,
}

impl Strata {
    /// Groups `grades` (one per sample). Errors unless grade 0, grade 1,
    /// and at least one grade ≥ 2 are present.
    pub fn new(grades: &[Grade], ncat: usize) -> Result<Self> {
        let mut by_grade = vec![Vec::new(); ncat];
        for (i, g) in grades.iter().enumerate() {
            by_grade
                .get_mut(g.index())
                .ok_or_else(|| TrainError::InvalidConfig(format!("grade {} out of range", g.0)))?
                .push(i);
        }
        let upper: Vec<usize> = (2..ncat).filter(|&g| !by_grade[g].is_empty()).collect();
        let mut missing: Vec<String> = [0, 1]
            .iter()
            .filter(|&&g| by_grade[g].is_empty())
            .map(|g| g.to_string())
            .collect();
        if upper.is_empty() {
            missing.push(format!("2-{}", ncat - 1));
        }
        if !missing.is_empty() {
            return Err(TrainError::MissingStrata(missing.join(", ")));
        }
        Ok(Self { by_grade, upper })
    }

    /// Grades that can fill the third slot of a triplet.
    pub fn upper_grades(&self) -> &[usize] {
        &self.upper
    }

    fn pick(&self, grade: usize, rng: &mut impl Rng) -> usize {
        let pool = &self.by_grade[grade];
        pool[rng.gen_range(0..pool.len())]
    }
}

/// `batch_size / 3` triplets, each holding one grade-0 sample, one grade-1
/// sample, and one sample of a grade drawn uniformly from the grades ≥ 2
/// present. Samples within a grade are drawn uniformly with replacement.
pub fn sample_batch(strata: &Strata, batch_size: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size / 3 {
        out.push(strata.pick(0, rng));
        out.push(strata.pick(1, rng));
        let g = strata.upper[rng.gen_range(0..strata.upper.len())];
        out.push(strata.pick(g, rng));
    }
    out
}
