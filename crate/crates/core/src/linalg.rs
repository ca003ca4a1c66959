//! Small dense linear algebra for channel-mixing matrices.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

/// Determinants with magnitude at or below this are treated as singular.
pub const SINGULAR_GUARD: f64 = 1e-12;

/// LU factorization with partial pivoting of a row-major `n x n` matrix.
pub struct Lu<T> {
    n: usize,
    lu: Vec<T>,
    perm: Vec<usize>,
    sign: T,
}

impl<T: Real> Lu<T> {
    pub fn new(n: usize, a: &[T]) -> Self {
        assert_eq!(a.len(), n * n, "LU input must be square");
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = T::one();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for r in k + 1..n {
                let v = lu[r * n + k].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            if pivot == T::zero() {
                continue;
            }
            for r in k + 1..n {
                let f = lu[r * n + k] / pivot;
                lu[r * n + k] = f;
                for c in k + 1..n {
                    let v = lu[k * n + c];
                    lu[r * n + c] -= f * v;
                }
            }
        }
        Lu { n, lu, perm, sign }
    }

    pub fn det(&self) -> T {
        (0..self.n).fold(self.sign, |d, i| d * self.lu[i * self.n + i])
    }

    pub fn log_abs_det(&self) -> T {
        (0..self.n)
            .map(|i| self.lu[i * self.n + i].abs().ln())
            .sum()
    }

    pub fn check_nonsingular(&self) -> Result<()> {
        let det = self.det().f64();
        if !(det.abs() > SINGULAR_GUARD) {
            return Err(Error::Singular { det: det.abs() });
        }
        Ok(())
    }

    /// Solve `A x = b` in place.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let n = self.n;
        let mut x: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                let l = self.lu[i * n + j];
                let xj = x[j];
                x[i] -= l * xj;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let u = self.lu[i * n + j];
                let xj = x[j];
                x[i] -= u * xj;
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }

    pub fn inverse(&self) -> Vec<T> {
        let n = self.n;
        let mut inv = alloc::vec![T::zero(); n * n];
        let mut e = alloc::vec![T::zero(); n];
        for c in 0..n {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[c] = T::one();
            let col = self.solve(&e);
            for r in 0..n {
                inv[r * n + c] = col[r];
            }
        }
        inv
    }
}

pub fn transpose<T: Copy>(n: usize, a: &[T]) -> Vec<T> {
    let mut t = a.to_vec();
    for r in 0..n {
        for c in 0..n {
            t[c * n + r] = a[r * n + c];
        }
    }
    t
}

/// Row-major `[m x k] * [k x p]`.
pub fn matmul<T: Real>(m: usize, k: usize, p: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut out = alloc::vec![T::zero(); m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for j in 0..k {
            let aij = a[i * k + j];
            if aij == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[j * p..(j + 1) * p]) {
                *o += aij * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a = [4.0, 3.0, 1.0, 6.0, 3.0, 2.0, 1.0, 5.0, 7.0];
        let lu = Lu::<f64>::new(3, &a);
        let inv = lu.inverse();
        let prod = matmul(3, 3, 3, &a, &inv);
        for r in 0..3 {
            for c in 0..3 {
                let e = if r == c { 1.0 } else { 0.0 };
                assert!((prod[r * 3 + c] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn determinant_with_pivoting() {
        // zero leading pivot forces a row swap
        let a = [0.0, 2.0, 3.0, 1.0];
        let lu = Lu::<f64>::new(2, &a);
        assert!((lu.det() - (-6.0)).abs() < 1e-14);
        assert!((lu.log_abs_det() - 6f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let a = [1.0, 2.0, 2.0, 4.0];
        let lu = Lu::<f64>::new(2, &a);
        assert!(matches!(
            lu.check_nonsingular(),
            Err(Error::Singular { .. })
        ));
    }
}
