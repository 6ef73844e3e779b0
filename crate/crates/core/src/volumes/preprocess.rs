use serde::{Deserialize, Serialize};

use super::{
    linear_index, LabeledSample, Mask, Result, Shape3, Volume, VolumeError, DEFAULT_FILL_HU,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub fill_value: f32,
    /// Symmetric margin (voxels) added around the region's bounding box.
    /// Parts of the enlarged box that fall outside the grid are padded with
    /// `fill_value`.
    pub margin: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            fill_value: DEFAULT_FILL_HU,
            margin: 0,
        }
    }
}

/// Axis-aligned box in source-grid coordinates; `origin` can be negative
/// when a margin extends past the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub origin: [isize; 3],
    pub shape: Shape3,
}

/// Inclusive bounding box `(min, max)` of the set voxels.
pub fn region_bbox(mask: &Mask) -> Result<([usize; 3], [usize; 3])> {
    let [d, h, w] = mask.shape;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask.data[linear_index(mask.shape, z, y, x)] != 0 {
                    any = true;
                    for (a, v) in [z, y, x].into_iter().enumerate() {
                        lo[a] = lo[a].min(v);
                        hi[a] = hi[a].max(v);
                    }
                }
            }
        }
    }
    if !any {
        return Err(VolumeError::EmptyRegion);
    }
    Ok((lo, hi))
}

impl CropBox {
    pub fn around_region(region: &Mask, margin: usize) -> Result<Self> {
        let (lo, hi) = region_bbox(region)?;
        let m = margin as isize;
        Ok(Self {
            origin: [lo[0] as isize - m, lo[1] as isize - m, lo[2] as isize - m],
            shape: [
                hi[0] - lo[0] + 1 + 2 * margin,
                hi[1] - lo[1] + 1 + 2 * margin,
                hi[2] - lo[2] + 1 + 2 * margin,
            ],
        })
    }

    /// Source index of target voxel `(z, y, x)`, if it lies on the source grid.
    fn source(&self, src: Shape3, z: usize, y: usize, x: usize) -> Option<usize> {
        let c = [
            self.origin[0] + z as isize,
            self.origin[1] + y as isize,
            self.origin[2] + x as isize,
        ];
        if (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < src[a]) {
            Some(linear_index(
                src,
                c[0] as usize,
                c[1] as usize,
                c[2] as usize,
            ))
        } else {
            None
        }
    }
}

pub fn crop_volume(volume: &Volume, bx: &CropBox, pad_value: f32) -> Volume {
    let mut out = Volume::filled(bx.shape, volume.spacing, pad_value);
    let mut i = 0;
    for z in 0..bx.shape[0] {
        for y in 0..bx.shape[1] {
            for x in 0..bx.shape[2] {
                if let Some(s) = bx.source(volume.shape, z, y, x) {
                    out.data[i] = volume.data[s];
                }
                i += 1;
            }
        }
    }
    out
}

pub fn crop_mask(mask: &Mask, bx: &CropBox) -> Mask {
    let mut out = Mask::empty(bx.shape);
    let mut i = 0;
    for z in 0..bx.shape[0] {
        for y in 0..bx.shape[1] {
            for x in 0..bx.shape[2] {
                if let Some(s) = bx.source(mask.shape, z, y, x) {
                    out.data[i] = mask.data[s];
                }
                i += 1;
            }
        }
    }
    out
}

/// Crops `volume` to the region's bounding box (plus margin) and overwrites
/// every voxel outside the region with `opts.fill_value`.
pub fn preprocess_region(
    volume: &Volume,
    region: &Mask,
    opts: PreprocessOptions,
) -> Result<Volume> {
    if region.shape != volume.shape {
        return Err(VolumeError::ShapeMismatch(format!(
            "region {:?} vs volume {:?}",
            region.shape, volume.shape
        )));
    }
    let bx = CropBox::around_region(region, opts.margin)?;
    let mut out = crop_volume(volume, &bx, opts.fill_value);
    let cropped_region = crop_mask(region, &bx);
    for (v, &m) in out.data.iter_mut().zip(&cropped_region.data) {
        if m == 0 {
            *v = opts.fill_value;
        }
    }
    Ok(out)
}

/// [`preprocess_region`] applied to a whole sample: the region and lesion
/// masks are cropped with the same box. Returns the box used.
pub fn preprocess_sample(
    sample: &LabeledSample,
    opts: PreprocessOptions,
) -> Result<(LabeledSample, CropBox)> {
    let volume = preprocess_region(&sample.volume, &sample.region, opts)?;
    let bx = CropBox::around_region(&sample.region, opts.margin)?;
    let out = LabeledSample {
        id: sample.id.clone(),
        volume,
        region: crop_mask(&sample.region, &bx),
        grade_rater1: sample.grade_rater1,
        grade_rater2: sample.grade_rater2,
        true_proportion: sample.true_proportion,
        lesion: sample.lesion.as_ref().map(|l| crop_mask(l, &bx)),
        pattern: sample.pattern,
    };
    Ok((out, bx))
}
