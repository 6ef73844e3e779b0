//! 3D convolution via im2col, tiled over output-depth slabs so each column
//! tile stays cache resident.
//!
//! Layouts: input `[C, D, H, W]`, weight `[C_out, C_in, k, k, k]`,
//! bias `[C_out]`. Cubic kernels, identical stride and zero padding on every
//! axis.

use super::{NnError, Real, Result, Tensor};

/// Column-tile budget in elements.
const TILE_ELEMS: usize = 1 << 16;

/// `floor((n + 2·pad − k) / stride) + 1`, or `None` when the kernel does not fit.
pub fn conv_output_len(n: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if input.len() != 4 {
            return Err(NnError::ShapeMismatch(format!(
                "conv3d input must be [C, D, H, W], got {input:?}"
            )));
        }
        if weight.len() != 5 || weight[2] != weight[3] || weight[3] != weight[4] {
            return Err(NnError::ShapeMismatch(format!(
                "conv3d weight must be [C_out, C_in, k, k, k], got {weight:?}"
            )));
        }
        if weight[1] != input[0] {
            return Err(NnError::ShapeMismatch(format!(
                "conv3d weight expects {} input channels, input has {}",
                weight[1], input[0]
            )));
        }
        if bias != [weight[0]] {
            return Err(NnError::ShapeMismatch(format!(
                "conv3d bias must be [{}], got {bias:?}",
                weight[0]
            )));
        }
        if stride == 0 {
            return Err(NnError::InvalidArgument("stride must be >= 1".into()));
        }
        let k = weight[2];
        let mut out_dims = [0; 3];
        for axis in 0..3 {
            out_dims[axis] = conv_output_len(input[axis + 1], k, stride, pad).ok_or(
                NnError::KernelTooLarge {
                    axis,
                    kernel: k,
                    input: input[axis + 1] + 2 * pad,
                },
            )?;
        }
        Ok(Self {
            c_in: input[0],
            c_out: weight[0],
            k,
            stride,
            pad,
            in_dims: [input[1], input[2], input[3]],
            out_dims,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }

    pub fn out_positions(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn plane(&self) -> usize {
        self.out_dims[1] * self.out_dims[2]
    }

    /// Output-depth slabs `[od0, od1)` whose column tiles stay within
    /// `TILE_ELEMS` (at least one depth slice each).
    fn slabs(&self) -> impl Iterator<Item = (usize, usize)> {
        let od_n = self.out_dims[0];
        let per = (TILE_ELEMS / (self.col_rows() * self.plane()).max(1)).max(1);
        (0..od_n)
            .step_by(per)
            .map(move |a| (a, (a + per).min(od_n)))
    }

    /// Walks every (column row, output row segment) pair of the slab
    /// `[od0, od1)`, handing the callback the destination offset in the
    /// slab's column tile, the source offset of the first valid element in
    /// the input, and the valid `ow` range of the segment.
    fn for_each_segment(
        &self,
        od0: usize,
        od1: usize,
        mut f: impl FnMut(usize, usize, usize, usize),
    ) {
        let [d, h, w] = self.in_dims;
        let [_, oh_n, ow_n] = self.out_dims;
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let tile = (od1 - od0) * oh_n * ow_n;
        let mut row = 0;
        for c in 0..self.c_in {
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        // valid ow range: 0 <= ow*s + kw - p < w
                        let ow_lo = ceil_div_clamped(p - kw as isize, s);
                        let ow_hi = ceil_div_clamped(w as isize + p - kw as isize, s).min(ow_n);
                        for od in od0..od1 {
                            let id = (od * s) as isize + kd as isize - p;
                            if id < 0 || id >= d as isize {
                                continue;
                            }
                            for oh in 0..oh_n {
                                let ih = (oh * s) as isize + kh as isize - p;
                                if ih < 0 || ih >= h as isize || ow_lo >= ow_hi {
                                    continue;
                                }
                                let dst = row * tile + ((od - od0) * oh_n + oh) * ow_n;
                                let iw0 = (ow_lo * s) as isize + kw as isize - p;
                                let src =
                                    ((c * d + id as usize) * h + ih as usize) * w + iw0 as usize;
                                f(dst, src, ow_lo, ow_hi);
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Column tile `[col_rows, (od1 − od0)·plane]` of the slab, written into
    /// `cols` (resized, padding positions zero).
    fn im2col_slab<T: Real>(&self, input: &[T], od0: usize, od1: usize, cols: &mut Vec<T>) {
        cols.clear();
        cols.resize(self.col_rows() * (od1 - od0) * self.plane(), T::zero());
        let s = self.stride;
        self.for_each_segment(od0, od1, |dst, src, lo, hi| {
            if s == 1 {
                let n = hi - lo;
                cols[dst + lo..dst + hi].copy_from_slice(&input[src..src + n]);
            } else {
                for (j, ow) in (lo..hi).enumerate() {
                    cols[dst + ow] = input[src + j * s];
                }
            }
        });
    }

    fn col2im_slab<T: Real>(&self, cols: &[T], od0: usize, od1: usize, grad_input: &mut [T]) {
        let s = self.stride;
        self.for_each_segment(od0, od1, |dst, src, lo, hi| {
            if s == 1 {
                let n = hi - lo;
                for (g, &c) in grad_input[src..src + n]
                    .iter_mut()
                    .zip(&cols[dst + lo..dst + hi])
                {
                    *g += c;
                }
            } else {
                for (j, ow) in (lo..hi).enumerate() {
                    grad_input[src + j * s] += cols[dst + ow];
                }
            }
        });
    }
}

/// Number of non-negative integers `x` with `x * s < a`; equivalently the
/// smallest `x >= 0` with `x * s >= a`.
fn ceil_div_clamped(a: isize, s: usize) -> usize {
    if a <= 0 {
        0
    } else {
        (a as usize).div_ceil(s)
    }
}

/// Forward pass on raw buffers; output is `[C_out, out_dims]`.
pub(crate) fn conv3d_forward_raw<T: Real>(
    geom: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let positions = geom.out_positions();
    let plane = geom.plane();
    let kdim = geom.col_rows();
    let mut out = vec![T::zero(); geom.c_out * positions];
    for (o, chunk) in out.chunks_mut(positions).enumerate() {
        chunk.fill(bias[o]);
    }
    let mut cols = Vec::new();
    for (a, b) in geom.slabs() {
        geom.im2col_slab(input, a, b, &mut cols);
        let tile = (b - a) * plane;
        // Y[:, slab] += W · cols
        T::gemm(
            geom.c_out,
            kdim,
            tile,
            T::one(),
            weight,
            kdim as isize,
            1,
            &cols,
            tile as isize,
            1,
            T::one(),
            &mut out[a * plane..],
            positions as isize,
            1,
        );
    }
    out
}

/// Stateless forward convolution (no gradient bookkeeping).
pub fn conv3d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let geom = ConvGeom::new(&input.shape, &weight.shape, &bias.shape, stride, pad)?;
    let out = conv3d_forward_raw(&geom, &input.data, &weight.data, &bias.data);
    let [a, b, c] = geom.out_dims;
    Tensor::new(vec![geom.c_out, a, b, c], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Gradients from `grad_out`; column tiles are rebuilt from `input`.
pub(crate) fn conv3d_backward<T: Real>(
    geom: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input_grad: bool,
) -> ConvGrads<T> {
    let positions = geom.out_positions();
    let plane = geom.plane();
    let kdim = geom.col_rows();

    let bias = grad_out
        .chunks(positions)
        .map(|chunk| chunk.iter().copied().sum())
        .collect();

    let mut dw = vec![T::zero(); geom.c_out * kdim];
    let mut dx = need_input_grad
        .then(|| vec![T::zero(); geom.c_in * geom.in_dims.iter().product::<usize>()]);
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for (a, b) in geom.slabs() {
        let tile = (b - a) * plane;
        let dy = &grad_out[a * plane..];
        geom.im2col_slab(input, a, b, &mut cols);
        // dW += dY[:, slab] · colsᵀ
        T::gemm(
            geom.c_out,
            tile,
            kdim,
            T::one(),
            dy,
            positions as isize,
            1,
            &cols,
            1,
            tile as isize,
            T::one(),
            &mut dw,
            kdim as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · dY[:, slab]
            dcols.clear();
            dcols.resize(kdim * tile, T::zero());
            T::gemm(
                kdim,
                geom.c_out,
                tile,
                T::one(),
                weight,
                1,
                kdim as isize,
                dy,
                positions as isize,
                1,
                T::zero(),
                &mut dcols,
                tile as isize,
                1,
            );
            geom.col2im_slab(&dcols, a, b, dx);
        }
    }

    ConvGrads {
        input: dx,
        weight: dw,
        bias,
    }
}
