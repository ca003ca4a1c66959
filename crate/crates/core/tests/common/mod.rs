#![allow(dead_code)]

use flowlens_core::{Real, Rng, Tensor};

/// Central finite differences of a scalar function over every coordinate.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let fp = f(&p);
            p[i] = orig - h;
            let fm = f(&p);
            p[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Jacobian of `f: R^n -> R^m`, row-major `[m x n]`.
pub fn jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> (usize, Vec<f64>) {
    let n = x.len();
    let m = f(x).len();
    let mut jac = vec![0.0; m * n];
    let mut p = x.to_vec();
    for j in 0..n {
        let orig = p[j];
        p[j] = orig + h;
        let fp = f(&p);
        p[j] = orig - h;
        let fm = f(&p);
        p[j] = orig;
        for i in 0..m {
            jac[i * n + j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    (m, jac)
}

/// `log |det|` by Gaussian elimination with partial pivoting, written
/// independently of the crate's LU.
pub fn log_abs_det(n: usize, a: &[f64]) -> f64 {
    let mut m = a.to_vec();
    let mut acc = 0.0;
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| m[i * n + k].abs().partial_cmp(&m[j * n + k].abs()).unwrap())
            .unwrap();
        if p != k {
            for c in 0..n {
                m.swap(k * n + c, p * n + c);
            }
        }
        let piv = m[k * n + k];
        acc += piv.abs().ln();
        for r in k + 1..n {
            let f = m[r * n + k] / piv;
            for c in k..n {
                m[r * n + c] -= f * m[k * n + c];
            }
        }
    }
    acc
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-12 {
        (a - b).abs()
    } else {
        (a - b).abs() / denom
    }
}

pub fn random<T: Real>(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
    rng.normal_tensor(shape)
}

pub fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.f64()).collect()
}

/// Move every parameter away from its initial value. Scales are multiplied
/// by `exp(amp * n)` so they stay positive; everything else gets additive
/// noise.
pub fn perturb<T: Real>(store: &mut flowlens_core::ParamStore<T>, rng: &mut Rng, amp: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let scale = store.name(id).ends_with(".scale");
        let v = store.get(id).map(|v| {
            let n = rng.normal();
            if scale {
                T::c(v.f64() * (amp * n).exp())
            } else {
                T::c(v.f64() + amp * n)
            }
        });
        store.set(id, v).unwrap();
    }
}

pub fn condition<T: Real>(rng: &mut Rng, n: usize) -> flowlens_core::Condition<T> {
    let s = [1, n, n];
    flowlens_core::Condition::new(
        rng.uniform_tensor(&s, 0.0, 1.0),
        rng.uniform_tensor(&s, 0.0, 1.0),
        rng.uniform_tensor(&s, 0.0, 1.0),
    )
    .unwrap()
}
