use super::{Mask, Shape3};

const FAR: f64 = 1e20;

/// Euclidean distance (voxel units) from every voxel inside `mask` to the
/// centre of the nearest voxel outside it. Voxels beyond the grid count as
/// outside, so a set voxel on the grid border has distance 1. Unset voxels
/// get 0.
///
/// Separable exact transform (lower envelope of parabolas per axis).
pub fn distance_to_outside(mask: &Mask) -> Vec<f32> {
    // Pad by one voxel of background on every side.
    let [d, h, w] = mask.shape;
    let ps: Shape3 = [d + 2, h + 2, w + 2];
    let idx = |z: usize, y: usize, x: usize| (z * ps[1] + y) * ps[2] + x;
    let mut f = vec![0.0f64; ps.iter().product()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask.get(z, y, x) {
                    f[idx(z + 1, y + 1, x + 1)] = FAR;
                }
            }
        }
    }

    let mut line = Vec::new();
    let mut out = Vec::new();
    // axis 2 (width)
    for z in 0..ps[0] {
        for y in 0..ps[1] {
            line.clear();
            line.extend((0..ps[2]).map(|x| f[idx(z, y, x)]));
            transform_1d(&line, &mut out);
            for x in 0..ps[2] {
                f[idx(z, y, x)] = out[x];
            }
        }
    }
    // axis 1 (height)
    for z in 0..ps[0] {
        for x in 0..ps[2] {
            line.clear();
            line.extend((0..ps[1]).map(|y| f[idx(z, y, x)]));
            transform_1d(&line, &mut out);
            for y in 0..ps[1] {
                f[idx(z, y, x)] = out[y];
            }
        }
    }
    // axis 0 (depth)
    for y in 0..ps[1] {
        for x in 0..ps[2] {
            line.clear();
            line.extend((0..ps[0]).map(|z| f[idx(z, y, x)]));
            transform_1d(&line, &mut out);
            for z in 0..ps[0] {
                f[idx(z, y, x)] = out[z];
            }
        }
    }

    let mut dist = vec![0.0f32; mask.data.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask.get(z, y, x) {
                    dist[(z * h + y) * w + x] = f[idx(z + 1, y + 1, x + 1)].sqrt() as f32;
                }
            }
        }
    }
    dist
}

/// 1D squared distance transform of sampled function `f`.
fn transform_1d(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, 0.0);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    // first finite sample anchors the envelope
    let Some(first) = f.iter().position(|&x| x < FAR) else {
        out.fill(FAR);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in first + 1..n {
        if f[q] >= FAR {
            continue;
        }
        let mut s = inter(q, v[k]);
        // z[0] is -inf, so this stops at the root parabola at the latest
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *o = dq * dq + f[p];
    }
}
