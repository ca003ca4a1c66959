//! 2D convolution (zero padding, square kernels) lowered to patch matrices and GEMM.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output extent along one axis, `None` when the kernel does not fit.
    pub fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = n + 2 * pad;
        if padded < k {
            None
        } else {
            Some((padded - k) / stride + 1)
        }
    }

    /// Range of output columns `ox` whose input column `ox*stride + kx - pad`
    /// lies inside `[0, n)`.
    #[inline]
    fn valid(&self, kk: usize, n: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        // ox*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // ox*s + off <= n-1
        let hi_num = n as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.max(0) as usize;
        let hi = (hi + 1).min(out as isize).max(0) as usize;
        (lo, hi.max(lo))
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Visits every in-bounds output row segment of every kernel tap as
    /// `(patch row, input channel, input row, first input col, first output
    /// index, length)`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        for ci in 0..self.c_in {
            for ky in 0..self.k {
                let (oy0, oy1) = self.valid(ky, self.h, self.oh);
                for kx in 0..self.k {
                    let (ox0, ox1) = self.valid(kx, self.w, self.ow);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let row = (ci * self.k + ky) * self.k + kx;
                    for oy in oy0..oy1 {
                        let iy = oy * self.stride + ky - self.pad;
                        let ix0 = ox0 * self.stride + kx - self.pad;
                        f(row, ci, iy, ix0, oy * self.ow + ox0, ox1 - ox0);
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (kk, n) = (g.c_in * g.k * g.k, g.oh * g.ow);
    let mut out = vec![T::zero(); g.c_out * n];
    if let Some(b) = b {
        for (co, plane) in out.chunks_mut(n).enumerate() {
            plane.iter_mut().for_each(|v| *v = b[co]);
        }
    }
    let col = columns(g, x);
    let col = col.as_deref().unwrap_or(x);
    T::gemm(
        g.c_out,
        kk,
        n,
        (w, kk as isize, 1),
        (col, n as isize, 1),
        T::one(),
        &mut out,
    );
    out
}

/// Gradient with respect to the input.
pub(crate) fn backward_input<T: Real>(g: &ConvGeom, gout: &[T], w: &[T]) -> Vec<T> {
    let (kk, n) = (g.c_in * g.k * g.k, g.oh * g.ow);
    let mut gcol = vec![T::zero(); kk * n];
    T::gemm(
        kk,
        g.c_out,
        n,
        (w, 1, kk as isize),
        (gout, n as isize, 1),
        T::zero(),
        &mut gcol,
    );
    if g.is_pointwise() {
        return gcol;
    }
    let mut gin = vec![T::zero(); g.c_in * g.h * g.w];
    g.for_each_tap(|row, ci, iy, ix0, ox0, len| {
        let src = &gcol[row * n..];
        let dst = &mut gin[(ci * g.h + iy) * g.w..];
        for j in 0..len {
            dst[ix0 + j * g.stride] += src[ox0 + j];
        }
    });
    gin
}

/// Gradient with respect to the kernel.
pub(crate) fn backward_kernel<T: Real>(g: &ConvGeom, gout: &[T], x: &[T]) -> Vec<T> {
    let (kk, n) = (g.c_in * g.k * g.k, g.oh * g.ow);
    let mut gw = vec![T::zero(); g.c_out * kk];
    let col = columns(g, x);
    let col = col.as_deref().unwrap_or(x);
    T::gemm(
        g.c_out,
        n,
        kk,
        (gout, n as isize, 1),
        (col, 1, n as isize),
        T::zero(),
        &mut gw,
    );
    gw
}

pub(crate) fn backward_bias<T: Real>(g: &ConvGeom, gout: &[T]) -> Vec<T> {
    let plane_out = g.oh * g.ow;
    (0..g.c_out)
        .map(|co| {
            gout[co * plane_out..(co + 1) * plane_out]
                .iter()
                .copied()
                .sum()
        })
        .collect()
}

/// Patch matrix `[c_in*k*k, oh*ow]`; `None` when the input already is one.
fn columns<T: Real>(g: &ConvGeom, x: &[T]) -> Option<Vec<T>> {
    if g.is_pointwise() {
        return None;
    }
    let n = g.oh * g.ow;
    let mut col = vec![T::zero(); g.c_in * g.k * g.k * n];
    g.for_each_tap(|row, ci, iy, ix0, ox0, len| {
        let src = &x[(ci * g.h + iy) * g.w..];
        let dst = &mut col[row * n..];
        for j in 0..len {
            dst[ox0 + j] = src[ix0 + j * g.stride];
        }
    });
    Some(col)
}
