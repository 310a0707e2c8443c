//! Forward and backward compute kernels. Plain nested loops, ascending
//! index order throughout.

use super::{Scalar, TensorError};

/// Right-aligned broadcast of two shapes, numpy style.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = dim_at(a, rank, i);
        let db = dim_at(b, rank, i);
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn dim_at(shape: &[usize], rank: usize, i: usize) -> usize {
    let offset = rank - shape.len();
    if i < offset {
        1
    } else {
        shape[i - offset]
    }
}

/// Maps a flat index in `out_shape` to the flat index in `in_shape`,
/// treating size-1 dims of the input as broadcast.
pub(crate) fn broadcast_src_index(out_idx: usize, out_shape: &[usize], in_shape: &[usize]) -> usize {
    let rank = out_shape.len();
    let mut rem = out_idx;
    let mut src = 0usize;
    let mut src_stride_acc = 1usize;
    // walk dims from last to first, building the source index
    let mut src_contrib = vec![0usize; rank];
    for d in (0..rank).rev() {
        let c = rem % out_shape[d];
        rem /= out_shape[d];
        let sd = dim_at(in_shape, rank, d);
        src_contrib[d] = if sd == 1 { 0 } else { c };
    }
    for d in (0..rank).rev() {
        let sd = dim_at(in_shape, rank, d);
        src += src_contrib[d] * src_stride_acc;
        src_stride_acc *= sd;
    }
    src
}

pub(crate) fn binary_broadcast<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    for i in 0..numel {
        let ai = broadcast_src_index(i, out_shape, a_shape);
        let bi = broadcast_src_index(i, out_shape, b_shape);
        out.push(f(a[ai], b[bi]));
    }
    out
}

/// Accumulates `grad` (shaped `out_shape`) into a buffer shaped `in_shape`,
/// summing over broadcast dimensions.
pub(crate) fn reduce_to_shape<T: Scalar>(
    grad: &[T],
    out_shape: &[usize],
    in_shape: &[usize],
    weight: impl Fn(usize) -> T,
    acc: &mut [T],
) {
    for (i, &g) in grad.iter().enumerate() {
        let si = broadcast_src_index(i, out_shape, in_shape);
        acc[si] = acc[si] + g * weight(i);
    }
}

pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = T::zero();
            for p in 0..k {
                s = s + a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2dSpec {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl Conv2dSpec {
    pub fn resolve(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        if stride < 1 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("stride must be >= 1, got {stride}"),
            });
        }
        let (batch, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (c_out, kc, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if kc != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            });
        }
        Ok(Conv2dSpec {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        })
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    s: &Conv2dSpec,
) -> Vec<T> {
    let mut out = vec![T::zero(); s.batch * s.c_out * s.h_out * s.w_out];
    for n in 0..s.batch {
        for co in 0..s.c_out {
            let b = bias.map(|b| b[co]).unwrap_or_else(T::zero);
            for oy in 0..s.h_out {
                for ox in 0..s.w_out {
                    let mut acc = b;
                    for ci in 0..s.c_in {
                        for ky in 0..s.kh {
                            let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            for kx in 0..s.kw {
                                let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                let xi = ((n * s.c_in + ci) * s.h + iy as usize) * s.w + ix as usize;
                                let wi = ((co * s.c_in + ci) * s.kh + ky) * s.kw + kx;
                                acc = acc + x[xi] * w[wi];
                            }
                        }
                    }
                    out[((n * s.c_out + co) * s.h_out + oy) * s.w_out + ox] = acc;
                }
            }
        }
    }
    out
}

/// Gradients for conv2d. Any of the output slots may be `None` when the
/// corresponding input does not require a gradient.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    s: &Conv2dSpec,
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let want_x = gx.is_some();
    let want_w = gw.is_some();
    let mut gx = gx;
    let mut gw = gw;
    if let Some(gb) = gb {
        for n in 0..s.batch {
            for co in 0..s.c_out {
                for oy in 0..s.h_out {
                    for ox in 0..s.w_out {
                        let gi = ((n * s.c_out + co) * s.h_out + oy) * s.w_out + ox;
                        gb[co] = gb[co] + grad_out[gi];
                    }
                }
            }
        }
    }
    if !want_x && !want_w {
        return;
    }
    for n in 0..s.batch {
        for co in 0..s.c_out {
            for oy in 0..s.h_out {
                for ox in 0..s.w_out {
                    let g = grad_out[((n * s.c_out + co) * s.h_out + oy) * s.w_out + ox];
                    for ci in 0..s.c_in {
                        for ky in 0..s.kh {
                            let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            for kx in 0..s.kw {
                                let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                let xi = ((n * s.c_in + ci) * s.h + iy as usize) * s.w + ix as usize;
                                let wi = ((co * s.c_in + ci) * s.kh + ky) * s.kw + kx;
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx[xi] = gx[xi] + g * w[wi];
                                }
                                if let Some(gw) = gw.as_deref_mut() {
                                    gw[wi] = gw[wi] + g * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max = x[base];
            for a in 1..axis_len {
                let v = x[base + a * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for a in 0..axis_len {
                let e = (x[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                sum = sum + e;
            }
            for a in 0..axis_len {
                out[base + a * inner] = out[base + a * inner] / sum;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(
    y: &[T],
    grad_out: &[T],
    shape: &[usize],
    axis: usize,
    gx: &mut [T],
) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut dot = T::zero();
            for a in 0..axis_len {
                let k = base + a * inner;
                dot = dot + grad_out[k] * y[k];
            }
            for a in 0..axis_len {
                let k = base + a * inner;
                gx[k] = gx[k] + y[k] * (grad_out[k] - dot);
            }
        }
    }
}

/// Bilinear sample of `src` (C x H x W planes) at absolute coordinates
/// `(gx, gy)` per target pixel, border-clamped. `validity[i]` is true when
/// the sample point lies inside `[0, w-1] x [0, h-1]`.
pub(crate) fn grid_sample_forward<T: Scalar>(
    src: &[T],
    channels: usize,
    h: usize,
    w: usize,
    grid_x: &[T],
    grid_y: &[T],
) -> (Vec<T>, Vec<bool>) {
    let npix = grid_x.len();
    let mut out = vec![T::zero(); channels * npix];
    let mut valid = vec![false; npix];
    for i in 0..npix {
        let gx = grid_x[i];
        let gy = grid_y[i];
        let wl = T::from_f64((w - 1) as f64);
        let hl = T::from_f64((h - 1) as f64);
        valid[i] = gx >= T::zero() && gx <= wl && gy >= T::zero() && gy <= hl;
        let (x0, x1, wx) = clamp_pair(gx, w);
        let (y0, y1, wy) = clamp_pair(gy, h);
        let one = T::one();
        for c in 0..channels {
            let plane = c * h * w;
            let v00 = src[plane + y0 * w + x0];
            let v01 = src[plane + y0 * w + x1];
            let v10 = src[plane + y1 * w + x0];
            let v11 = src[plane + y1 * w + x1];
            let top = v00 * (one - wx) + v01 * wx;
            let bot = v10 * (one - wx) + v11 * wx;
            out[c * npix + i] = top * (one - wy) + bot * wy;
        }
    }
    (out, valid)
}

pub(crate) fn grid_sample_backward<T: Scalar>(
    grad_out: &[T],
    channels: usize,
    h: usize,
    w: usize,
    grid_x: &[T],
    grid_y: &[T],
    gsrc: &mut [T],
) {
    let npix = grid_x.len();
    let one = T::one();
    for i in 0..npix {
        let (x0, x1, wx) = clamp_pair(grid_x[i], w);
        let (y0, y1, wy) = clamp_pair(grid_y[i], h);
        for c in 0..channels {
            let g = grad_out[c * npix + i];
            let plane = c * h * w;
            gsrc[plane + y0 * w + x0] = gsrc[plane + y0 * w + x0] + g * (one - wx) * (one - wy);
            gsrc[plane + y0 * w + x1] = gsrc[plane + y0 * w + x1] + g * wx * (one - wy);
            gsrc[plane + y1 * w + x0] = gsrc[plane + y1 * w + x0] + g * (one - wx) * wy;
            gsrc[plane + y1 * w + x1] = gsrc[plane + y1 * w + x1] + g * wx * wy;
        }
    }
}

/// Lower/upper source columns and fractional weight for one coordinate.
fn clamp_pair<T: Scalar>(g: T, extent: usize) -> (usize, usize, T) {
    let floor = g.floor();
    let frac = g - floor;
    let max = (extent - 1) as isize;
    let f = floor.to_f64() as isize;
    let lo = f.clamp(0, max) as usize;
    let hi = (f + 1).clamp(0, max) as usize;
    (lo, hi, frac)
}

pub(crate) fn avg_pool2d_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    let ho = h / k;
    let wo = w / k;
    let norm = T::from_f64(1.0 / (k * k) as f64);
    let mut out = vec![T::zero(); batch * c * ho * wo];
    for n in 0..batch {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        for kx in 0..k {
                            acc = acc + x[((n * c + ch) * h + oy * k + ky) * w + ox * k + kx];
                        }
                    }
                    out[((n * c + ch) * ho + oy) * wo + ox] = acc * norm;
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest2_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * c * h * 2 * w * 2];
    for n in 0..batch {
        for ch in 0..c {
            for y in 0..h * 2 {
                for xx in 0..w * 2 {
                    out[((n * c + ch) * h * 2 + y) * w * 2 + xx] =
                        x[((n * c + ch) * h + y / 2) * w + xx / 2];
                }
            }
        }
    }
    out
}
