use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{CohortError, CohortSpec, Result};
use crate::losses::Grade;
use crate::volumes::{
    distance_to_outside, linear_index, LabeledSample, Mask, Pattern, Shape3, Volume,
};

const REGION_ATTEMPTS: usize = 200;
const MAX_BLOBS: usize = 200_000;

/// One sample with a planted lesion of the requested grade and pattern.
/// Both rater grades are the noiseless interval grade; use
/// [`super::simulate_rater`] to perturb them.
pub fn generate_sample(
    spec: &CohortSpec,
    target_grade: Grade,
    pattern: Pattern,
    rng_seed: u64,
) -> Result<LabeledSample> {
    let ncat = spec.thresholds.ncat();
    if target_grade.index() >= ncat {
        return Err(CohortError::InvalidSpec(format!(
            "target grade {} outside 0..{}",
            target_grade.0,
            ncat - 1
        )));
    }
    if target_grade.0 > 0 && pattern == Pattern::None {
        return Err(CohortError::InvalidSpec("a lesion needs a pattern".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shape = spec.grid_shape;
    let region = sample_region(spec, &mut rng)?;
    let m = region.count();

    let lesion = if target_grade.0 == 0 {
        Mask::empty(shape)
    } else {
        let (lo, hi) = spec.thresholds.interval(target_grade);
        let w = hi - lo;
        let kmin = (m as f64 * (lo + 0.1 * w)).ceil() as usize;
        let kmax = (m as f64 * (lo + 0.9 * w)).floor() as usize;
        if kmin == 0 || kmin > kmax {
            return Err(CohortError::CannotPlace {
                grade: target_grade.0,
                reason: format!("region of {m} voxels admits no count in the central band"),
            });
        }
        let k = rng.gen_range(kmin..=kmax);
        plant_lesion(spec, &region, pattern, k, &mut rng)
    };

    let normal = Normal::new(0.0f64, spec.lesion_noise_sigma as f64).expect("sigma validated");
    let [bg_lo, bg_hi] = spec.background_intensity_range;
    let [ex_lo, ex_hi] = spec.exterior_intensity_range;
    let mut data = vec![0.0f32; region.data.len()];
    for (i, v) in data.iter_mut().enumerate() {
        *v = if lesion.data[i] != 0 {
            let mut e = normal.sample(&mut rng);
            while e.abs() > 3.0 * spec.lesion_noise_sigma as f64 {
                e = normal.sample(&mut rng);
            }
            spec.lesion_intensity + e as f32
        } else if region.data[i] != 0 {
            rng.gen_range(bg_lo..=bg_hi)
        } else {
            rng.gen_range(ex_lo..=ex_hi)
        };
    }

    let k = lesion.count();
    let proportion = k as f64 / m as f64;
    let grade = spec.thresholds.grade_of(proportion);
    debug_assert_eq!(grade, target_grade);
    Ok(LabeledSample {
        id: String::new(),
        volume: Volume::new(shape, spec.spacing, data)?,
        region,
        grade_rater1: grade,
        grade_rater2: grade,
        true_proportion: Some(proportion),
        lesion: Some(lesion),
        pattern: Some(if target_grade.0 == 0 {
            Pattern::None
        } else {
            pattern
        }),
    })
}

/// Randomly rotated ellipsoid centred on the grid whose rasterized volume
/// falls in `spec.region_fraction`.
fn sample_region(spec: &CohortSpec, rng: &mut ChaCha8Rng) -> Result<Mask> {
    let shape = spec.grid_shape;
    let n: usize = shape.iter().product();
    let [fmin, fmax] = spec.region_fraction;
    let center = shape.map(|s| (s as f64 - 1.0) / 2.0);
    for _ in 0..REGION_ATTEMPTS {
        let target = rng.gen_range(fmin..=fmax);
        let aspect: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.85..1.15));
        let rot = random_rotation(rng);
        // Scale so the continuous ellipsoid volume matches the target.
        let unit_vol = 4.0 / 3.0 * std::f64::consts::PI * aspect.iter().product::<f64>();
        let scale = (target * n as f64 / unit_vol).cbrt();
        let axes = aspect.map(|a| a * scale);
        let mut mask = Mask::empty(shape);
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    let p = [
                        z as f64 - center[0],
                        y as f64 - center[1],
                        x as f64 - center[2],
                    ];
                    let mut r = 0.0;
                    for (a, row) in rot.iter().enumerate() {
                        let q = row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
                        r += (q / axes[a]).powi(2);
                    }
                    if r <= 1.0 {
                        mask.data[linear_index(shape, z, y, x)] = 1;
                    }
                }
            }
        }
        let frac = mask.count() as f64 / n as f64;
        if (fmin..=fmax).contains(&frac) {
            return Ok(mask);
        }
    }
    Err(CohortError::InvalidSpec(format!(
        "no ellipsoid with region fraction in [{fmin}, {fmax}] on grid {shape:?}"
    )))
}

/// Rows of a uniformly random rotation matrix (from a normalized 4D Gaussian
/// quaternion).
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    q.iter_mut().for_each(|v| *v /= norm);
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Region voxels eligible for the pattern. Paraseptal lesions sit within
/// `margin` of the boundary, centrilobular ones beyond it. When the zone
/// holds fewer than `k` voxels it grows one voxel-distance step at a time
/// (outward for paraseptal, inward for centrilobular) until it fits.
fn pattern_zone(
    dist: &[f32],
    region: &Mask,
    pattern: Pattern,
    margin: usize,
    k: usize,
) -> Vec<usize> {
    let inside: Vec<usize> = (0..region.data.len())
        .filter(|&i| region.data[i] != 0)
        .collect();
    let max_d = inside.iter().map(|&i| dist[i]).fold(0.0f32, f32::max);
    let mut r = margin as f32;
    loop {
        let zone: Vec<usize> = inside
            .iter()
            .copied()
            .filter(|&i| match pattern {
                Pattern::Paraseptal => dist[i] <= r,
                _ => dist[i] > r,
            })
            .collect();
        let exhausted = match pattern {
            Pattern::Paraseptal => r >= max_d,
            _ => r <= 0.0,
        };
        if zone.len() >= k || exhausted {
            return zone;
        }
        r += if pattern == Pattern::Paraseptal {
            1.0
        } else {
            -1.0
        };
    }
}

/// Union of axis-aligned ellipsoidal blobs clipped to the pattern zone,
/// trimmed to exactly `k` voxels.
fn plant_lesion(
    spec: &CohortSpec,
    region: &Mask,
    pattern: Pattern,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Mask {
    let shape = region.shape;
    let dist = distance_to_outside(region);
    let zone = pattern_zone(&dist, region, pattern, spec.pattern_margin_vox, k);
    debug_assert!(zone.len() >= k);
    let mut in_zone = vec![false; region.data.len()];
    for &i in &zone {
        in_zone[i] = true;
    }
    let mut lesion = Mask::empty(shape);
    let mut filled = 0usize;
    let [rmin, rmax] = spec.blob_radius_range;
    for _ in 0..MAX_BLOBS {
        let free: Vec<usize> = zone
            .iter()
            .copied()
            .filter(|&i| lesion.data[i] == 0)
            .collect();
        let c = unravel(shape, free[rng.gen_range(0..free.len())]);
        let radii: [f64; 3] = std::array::from_fn(|_| rng.gen_range(rmin..=rmax));
        // (normalized distance², index) of voxels new to the lesion
        let mut added: Vec<(f64, usize)> = Vec::new();
        let lo = |a: usize| c[a].saturating_sub(radii[a].floor() as usize);
        let hi = |a: usize| (c[a] + radii[a].floor() as usize).min(shape[a] - 1);
        for z in lo(0)..=hi(0) {
            for y in lo(1)..=hi(1) {
                for x in lo(2)..=hi(2) {
                    let i = linear_index(shape, z, y, x);
                    if !in_zone[i] || lesion.data[i] != 0 {
                        continue;
                    }
                    let d2 = [z, y, x]
                        .iter()
                        .zip(c.iter())
                        .zip(radii.iter())
                        .map(|((&p, &q), &r)| ((p as f64 - q as f64) / r).powi(2))
                        .sum::<f64>();
                    if d2 <= 1.0 {
                        added.push((d2, i));
                    }
                }
            }
        }
        if filled + added.len() > k {
            // Keep the voxels closest to the blob centre.
            added.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            added.truncate(k - filled);
        }
        filled += added.len();
        for (_, i) in added {
            lesion.data[i] = 1;
        }
        if filled == k {
            return lesion;
        }
    }
    unreachable!("every blob adds its centre voxel, so {MAX_BLOBS} blobs always suffice")
}

fn unravel(shape: Shape3, i: usize) -> [usize; 3] {
    [
        i / (shape[1] * shape[2]),
        (i / shape[2]) % shape[1],
        i % shape[2],
    ]
}
