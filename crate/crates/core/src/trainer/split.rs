use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, TrainError};
use crate::losses::Grade;

/// Splits sample indices into parts of exactly `sizes[k]` samples,
/// stratified by grade: samples are ordered by grade (shuffled within a
/// grade) and dealt to the parts in an evenly interleaved sequence, so
/// every grade is shared out in proportion to the part sizes. Indices not
/// covered by `sizes` are left out. Each part is returned sorted.
pub fn stratified_split(grades: &[Grade], sizes: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = grades.len();
    let used: usize = sizes.iter().sum();
    if used > n {
        return Err(TrainError::InvalidConfig(format!(
            "split sizes sum to {used} but the cohort has {n} samples"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| grades[i].0);

    // Part `sizes.len()` holds the leftovers.
    let mut quota: Vec<usize> = sizes.to_vec();
    quota.push(n - used);
    let mut assigned = vec![0usize; quota.len()];
    let mut parts = vec![Vec::new(); sizes.len()];
    for (t, &idx) in order.iter().enumerate() {
        // the part furthest behind its pro-rata target after t+1 deals
        let k = (0..quota.len())
            .filter(|&k| assigned[k] < quota[k])
            .max_by(|&a, &b| {
                let lag = |k: usize| (quota[k] * (t + 1)) as i128 - (assigned[k] * n) as i128;
                lag(a).cmp(&lag(b)).then(b.cmp(&a))
            })
            .expect("quotas sum to n");
        assigned[k] += 1;
        if k < sizes.len() {
            parts[k].push(idx);
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}
