use super::{auc, check_len, MetricError, Result};
use crate::volumes::{distance_to_outside, Mask, Pattern, Volume};

pub const LAA_THRESHOLD_HU: f32 = -950.0;

/// Fraction of region voxels with intensity strictly below `threshold_hu`.
pub fn densitometry_laa950(volume: &Volume, region: &Mask, threshold_hu: f32) -> Result<f64> {
    check_len(volume.data.len(), region.data.len(), "volume vs region")?;
    let m = region.count();
    if m == 0 {
        return Err(MetricError::EmptyRegion);
    }
    let low = volume
        .data
        .iter()
        .zip(&region.data)
        .filter(|(&v, &r)| r != 0 && v < threshold_hu)
        .count();
    Ok(low as f64 / m as f64)
}

/// Foreground mass within `margin` voxels of the region boundary divided
/// by the mass further inside (denominator floored at 1e−6).
///
/// `foreground` holds per-voxel mass on the region's grid: probabilities
/// or 0/1 lesion indicators. Only region voxels contribute. Distance is the
/// Euclidean distance to the nearest voxel outside the region, so voxels
/// touching the boundary are at distance 1.
pub fn boundary_ratio(foreground: &[f64], region: &Mask, margin: f64) -> Result<f64> {
    check_len(foreground.len(), region.data.len(), "foreground vs region")?;
    if region.is_empty() {
        return Err(MetricError::EmptyRegion);
    }
    if !(margin >= 1.0) {
        return Err(MetricError::Degenerate(format!(
            "margin {margin} must be >= 1"
        )));
    }
    let dist = distance_to_outside(region);
    let (mut near, mut interior) = (0.0, 0.0);
    for ((&f, &r), &d) in foreground.iter().zip(&region.data).zip(&dist) {
        if r == 0 {
            continue;
        }
        if d as f64 <= margin {
            near += f;
        } else {
            interior += f;
        }
    }
    Ok(near / interior.max(1e-6))
}

/// Margin on a grid downsampled by `stride`, rounded and at least 1.
pub fn scaled_margin(margin_vox: f64, stride: usize) -> f64 {
    (margin_vox / stride as f64).round().max(1.0)
}

/// AUC of boundary ratios for paraseptal (positive) against centrilobular
/// samples. Samples without a lesion pattern are ignored.
pub fn pattern_auc(ratios: &[f64], patterns: &[Pattern]) -> Result<f64> {
    check_len(ratios.len(), patterns.len(), "ratios vs patterns")?;
    let (s, l): (Vec<f64>, Vec<bool>) = ratios
        .iter()
        .zip(patterns)
        .filter(|(_, p)| **p != Pattern::None)
        .map(|(&r, &p)| (r, p == Pattern::Paraseptal))
        .unzip();
    if s.is_empty() {
        return Err(MetricError::NoPositives);
    }
    auc(&s, &l)
}

/// Dice overlap; two empty masks score 1.
pub fn dice(a: &Mask, b: &Mask) -> f64 {
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return 1.0;
    }
    2.0 * a.intersection_count(b) as f64 / (na + nb) as f64
}
