//! Slice-level numeric kernels used by the tape. Everything here is
//! allocation-light and free of graph bookkeeping.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // float methods are inherent only when std is linked
use num_traits::Float;

use crate::scalar::{gemm, Layout, Scalar};

/// Geometry of a 2-D cross-correlation on one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output extent with floor division, `None` when the padded input is
    /// smaller than the kernel or the stride is zero.
    pub fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        if stride == 0 || n + 2 * pad < k {
            return None;
        }
        Some((n + 2 * pad - k) / stride + 1)
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Length of the column buffer the kernels expect as scratch.
    pub fn scratch_len(&self) -> usize {
        if self.is_pointwise() {
            0
        } else {
            self.k() * self.tile_rows() * self.ow
        }
    }

    /// Output rows per im2col tile, keeping the column buffer near 1M values.
    fn tile_rows(&self) -> usize {
        let per_row = self.k() * self.ow;
        ((1 << 20) / per_row.max(1)).clamp(1, self.oh)
    }
}

/// Output columns `lo..hi` whose tap `kj` lands inside the input row.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    // ox valid iff pad <= ox*stride + kj < w + pad
    let lo = if kj >= g.pad { 0 } else { (g.pad - kj).div_ceil(g.stride) };
    let hi = if g.w + g.pad > kj { ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.ow) } else { 0 };
    (lo.min(hi), hi)
}

/// Fill `cols` (`k × rows·ow`) with the patches of output rows `oy0..oy0+rows`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, oy0: usize, rows: usize, cols: &mut [T]) {
    let n = rows * g.ow;
    let mut r = 0;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[r * n..(r + 1) * n];
                let (lo, hi) = valid_cols(g, kj);
                for (ry, oy) in (oy0..oy0 + rows).enumerate() {
                    let line = &mut dst[ry * g.ow..(ry + 1) * g.ow];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo < hi {
                        let ix0 = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (v, &s) in line[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(g.stride)) {
                                *v = s;
                            }
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// Scatter-add the columns of output rows `oy0..oy0+rows` back into `dx`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, oy0: usize, rows: usize, dx: &mut [T]) {
    let n = rows * g.ow;
    let mut r = 0;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[r * n..(r + 1) * n];
                let (lo, hi) = valid_cols(g, kj);
                for (ry, oy) in (oy0..oy0 + rows).enumerate() {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[ry * g.ow..(ry + 1) * g.ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if lo < hi {
                        let ix0 = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            for (d, &v) in dst[ix0..ix0 + hi - lo].iter_mut().zip(&line[lo..hi]) {
                                *d = *d + v;
                            }
                        } else {
                            for (d, &v) in dst[ix0..].iter_mut().step_by(g.stride).zip(&line[lo..hi]) {
                                *d = *d + v;
                            }
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// `out (cout × oh·ow) = weight · patches(x) + bias` for one image.
///
/// `cols` is scratch of at least [`ConvGeom::scratch_len`] values.
pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom, out: &mut [T], cols: &mut [T]) {
    let p = g.oh * g.ow;
    let k = g.k();
    match bias {
        Some(b) => {
            for (co, row) in out.chunks_mut(p).enumerate() {
                row.fill(b[co]);
            }
        }
        None => out.fill(T::zero()),
    }
    if g.is_pointwise() {
        gemm(g.cout, k, p, weight, Layout::N, x, Layout::N, T::one(), out);
        return;
    }
    let tile = g.tile_rows();
    let mut oy0 = 0;
    while oy0 < g.oh {
        let rows = tile.min(g.oh - oy0);
        let n = rows * g.ow;
        im2col(x, g, oy0, rows, &mut cols[..k * n]);
        // SAFETY: out is cout × p; the tile writes columns oy0*ow .. oy0*ow+n of each row.
        unsafe {
            T::gemm_raw(
                g.cout,
                k,
                n,
                T::one(),
                weight.as_ptr(),
                k as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                T::one(),
                out.as_mut_ptr().add(oy0 * g.ow),
                p as isize,
                1,
            );
        }
        oy0 += rows;
    }
}

/// Accumulates gradients of one image into `dx`, `dw`, `db` (each optional).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    cols: &mut [T],
) {
    let p = g.oh * g.ow;
    let k = g.k();
    if let Some(db) = db {
        for (co, row) in dout.chunks(p).enumerate() {
            db[co] = db[co] + row.iter().copied().sum::<T>();
        }
    }
    if g.is_pointwise() {
        if let Some(dw) = dw {
            gemm(g.cout, p, k, dout, Layout::N, x, Layout::T, T::one(), dw);
        }
        if let Some(dx) = dx {
            gemm(k, g.cout, p, weight, Layout::T, dout, Layout::N, T::one(), dx);
        }
        return;
    }
    let tile = g.tile_rows();
    let mut dw = dw;
    let mut dx = dx;
    let mut oy0 = 0;
    while oy0 < g.oh {
        let rows = tile.min(g.oh - oy0);
        let n = rows * g.ow;
        let dout_tile = dout.as_ptr().wrapping_add(oy0 * g.ow);
        if let Some(dw) = dw.as_deref_mut() {
            im2col(x, g, oy0, rows, &mut cols[..k * n]);
            // SAFETY: dout tile is cout rows of n columns with row stride p; cols is k × n.
            unsafe {
                T::gemm_raw(
                    g.cout,
                    n,
                    k,
                    T::one(),
                    dout_tile,
                    p as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    n as isize,
                    T::one(),
                    dw.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            // SAFETY: weight is cout × k read transposed; result k × n into cols.
            unsafe {
                T::gemm_raw(
                    k,
                    g.cout,
                    n,
                    T::one(),
                    weight.as_ptr(),
                    1,
                    k as isize,
                    dout_tile,
                    p as isize,
                    1,
                    T::zero(),
                    cols.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            col2im(&cols[..k * n], g, oy0, rows, dx);
        }
        oy0 += rows;
    }
}

/// Source index pairs and weights for one axis of a bilinear resize
/// (half-pixel centers, edge clamped).
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Per-channel mean and population variance over batch and spatial axes,
/// accumulated in `f64`.
pub fn channel_moments<T: Scalar>(x: &[T], b: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (b * hw) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for bi in 0..b {
        for (ci, acc) in mean.iter_mut().enumerate() {
            let off = (bi * c + ci) * hw;
            *acc += x[off..off + hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            let mu = mean[ci];
            var[ci] += x[off..off + hw]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    (mean, var)
}
