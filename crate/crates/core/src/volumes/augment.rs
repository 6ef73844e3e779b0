use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{linear_index, region_bbox, LabeledSample, Mask, Volume, DEFAULT_FILL_HU};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_shift_vox: usize,
    /// Intensity for voxels shifted in from beyond the grid.
    pub fill_value: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_shift_vox: 2,
            fill_value: DEFAULT_FILL_HU,
        }
    }
}

/// Random flip and translation in the axial (height × width) plane, applied
/// identically to the volume, region, and lesion.
///
/// The flip mirrors the width axis with probability 1/2. The translation is
/// drawn uniformly from `[-max_shift, max_shift]²` and then clamped so that
/// the region stays on the grid, which keeps every region and lesion voxel.
pub fn augment(sample: &LabeledSample, rng_seed: u64, cfg: &AugmentConfig) -> LabeledSample {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let flip = rng.gen_bool(0.5);
    let s = cfg.max_shift_vox as isize;
    let dy = rng.gen_range(-s..=s);
    let dx = rng.gen_range(-s..=s);

    let shape = sample.volume.shape;
    let flip_x = |x: usize| if flip { shape[2] - 1 - x } else { x };

    let (dy, dx) = match region_bbox(&sample.region) {
        Ok((lo, hi)) => {
            let (xlo, xhi) = if flip {
                (flip_x(hi[2]), flip_x(lo[2]))
            } else {
                (lo[2], hi[2])
            };
            (
                dy.clamp(-(lo[1] as isize), (shape[1] - 1 - hi[1]) as isize),
                dx.clamp(-(xlo as isize), (shape[2] - 1 - xhi) as isize),
            )
        }
        Err(_) => (0, 0),
    };

    // out[z, y, x] = in[z, y - dy, flip(x - dx)]
    let source = |z: usize, y: usize, x: usize| -> Option<usize> {
        let sy = y as isize - dy;
        let sx = x as isize - dx;
        if sy < 0 || sx < 0 || sy >= shape[1] as isize || sx >= shape[2] as isize {
            return None;
        }
        Some(linear_index(shape, z, sy as usize, flip_x(sx as usize)))
    };

    let mut volume = Volume::filled(shape, sample.volume.spacing, cfg.fill_value);
    let mut region = Mask::empty(shape);
    let mut lesion = sample.lesion.as_ref().map(|_| Mask::empty(shape));
    let mut i = 0;
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                if let Some(src) = source(z, y, x) {
                    volume.data[i] = sample.volume.data[src];
                    region.data[i] = sample.region.data[src];
                    if let (Some(out), Some(inp)) = (lesion.as_mut(), sample.lesion.as_ref()) {
                        out.data[i] = inp.data[src];
                    }
                }
                i += 1;
            }
        }
    }

    LabeledSample {
        id: sample.id.clone(),
        volume,
        region,
        grade_rater1: sample.grade_rater1,
        grade_rater2: sample.grade_rater2,
        true_proportion: sample.true_proportion,
        lesion: lesion.take(),
        pattern: sample.pattern,
    }
}
