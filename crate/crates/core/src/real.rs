//! Floating-point precision abstraction.
//!
//! Every numeric routine in the engine is generic over [`Real`], which is
//! implemented for `f32` (training default) and `f64` (oracle suites).

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst};

/// Storage precision tag, matching the FMAP dtype byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

pub trait Real:
    Float
    + FloatConst
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const PRECISION: Precision;

    fn c(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = a * b + beta * c` for an `m x k` by `k x n` product. Strides are
    /// in elements, so transposed views need no copy.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: &mut [Self],
    );
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    }
}

macro_rules! gemm_impl {
    ($f:ident) => {
        fn gemm(
            m: usize,
            k: usize,
            n: usize,
            a: (&[Self], isize, isize),
            b: (&[Self], isize, isize),
            beta: Self,
            c: &mut [Self],
        ) {
            assert!(a.1 >= 0 && a.2 >= 0 && b.1 >= 0 && b.2 >= 0);
            assert!(a.0.len() >= span(m, k, a.1, a.2), "gemm: lhs too short");
            assert!(b.0.len() >= span(k, n, b.1, b.2), "gemm: rhs too short");
            assert!(c.len() >= m * n, "gemm: output too short");
            if m == 0 || n == 0 {
                return;
            }
            // SAFETY: the asserts above bound every index the kernel touches.
            unsafe {
                matrixmultiply::$f(
                    m,
                    k,
                    n,
                    1.0,
                    a.0.as_ptr(),
                    a.1,
                    a.2,
                    b.0.as_ptr(),
                    b.1,
                    b.2,
                    beta,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    };
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    #[inline(always)]
    fn c(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn f64(self) -> f64 {
        self as f64
    }

    gemm_impl!(sgemm);
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    #[inline(always)]
    fn c(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn f64(self) -> f64 {
        self
    }

    gemm_impl!(dgemm);
}
