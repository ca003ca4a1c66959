//! Centered, unitary 2D Fourier transforms and k-space resampling.
//!
//! Spectra use a centered layout: index `k` of an axis of length `n` holds
//! frequency `k - n/2`, so the zero frequency sits at `(H/2, W/2)`. Both
//! directions are scaled by `1/sqrt(HW)`, which makes the transform
//! unitary.
//!
//! Truncation keeps the band strictly inside `(-n/2, n/2)`; the Nyquist row
//! and column of the small grid are dropped because a real `n x n` image
//! cannot carry them without breaking conjugate symmetry of the zero-filled
//! reconstruction.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use num_traits::Float;

/// Complex spectrum in centered layout. `re` and `im` have shape `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid<T> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

impl<T: Real> ComplexGrid<T> {
    pub fn zeros(h: usize, w: usize) -> Self {
        ComplexGrid {
            re: Tensor::zeros(&[h, w]),
            im: Tensor::zeros(&[h, w]),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.re.shape()[0], self.re.shape()[1])
    }

    /// `sum |X|^2`.
    pub fn energy(&self) -> T {
        self.re
            .data()
            .iter()
            .zip(self.im.data())
            .map(|(&r, &i)| r * r + i * i)
            .sum()
    }

    pub fn scaled(&self, c: T) -> Self {
        ComplexGrid {
            re: self.re.map(|v| v * c),
            im: self.im.map(|v| v * c),
        }
    }

    /// Real part reshaped to a single-channel image `[1, H, W]`.
    pub fn real_image(&self) -> Tensor<T> {
        let (h, w) = self.dims();
        self.re
            .clone()
            .reshape(&[1, h, w])
            .expect("same element count")
    }

    pub fn max_abs_imag(&self) -> T {
        self.im.max_abs()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.re
            .max_abs_diff(&other.re)
            .max(self.im.max_abs_diff(&other.im))
    }
}

/// Row-major centered DFT matrix `[rows x cols]` for an axis of length
/// `len`, restricted to the `rows` central frequencies.
///
/// `F[k, m] = exp(-2 pi i (k - rows/2) m / len) / sqrt(len)`.
fn dft_matrix<T: Real>(rows: usize, len: usize) -> (Tensor<T>, Tensor<T>) {
    let norm = 1.0 / Float::sqrt(len as f64);
    let half = (rows / 2) as i64;
    let mut re = Vec::with_capacity(rows * len);
    let mut im = Vec::with_capacity(rows * len);
    for k in 0..rows as i64 {
        let f = k - half;
        for m in 0..len as i64 {
            let phase = (f * m).rem_euclid(len as i64) as f64;
            let angle = -2.0 * core::f64::consts::PI * phase / len as f64;
            re.push(T::c(num_traits::Float::cos(angle) * norm));
            im.push(T::c(num_traits::Float::sin(angle) * norm));
        }
    }
    (
        Tensor::new(&[rows, len], re).expect("dft matrix"),
        Tensor::new(&[rows, len], im).expect("dft matrix"),
    )
}

fn image_dims<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize)> {
    let (h, w) = match *x.shape() {
        [h, w] | [1, h, w] => (h, w),
        _ => {
            return Err(Error::InvalidShape {
                op,
                shape: x.shape().to_vec(),
                reason: "expected [H, W] or [1, H, W]",
            })
        }
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "dimensions must be even",
        });
    }
    Ok((h, w))
}

/// `Y = A X Bᵀ` for complex `A: [p, r]`, `X: [r, c]`, `B: [q, c]`.
fn complex_sandwich<T: Real>(
    (ar, ai): (&Tensor<T>, &Tensor<T>),
    (xr, xi): (&[T], &[T]),
    (br, bi): (&Tensor<T>, &Tensor<T>),
) -> (Vec<T>, Vec<T>) {
    let (p, r) = (ar.shape()[0], ar.shape()[1]);
    let (q, c) = (br.shape()[0], br.shape()[1]);
    // T = X Bᵀ : [r, q]
    let mut tr = vec![T::zero(); r * q];
    let mut ti = vec![T::zero(); r * q];
    for i in 0..r {
        for j in 0..q {
            let (mut sr, mut si) = (T::zero(), T::zero());
            for k in 0..c {
                let (x_r, x_i) = (xr[i * c + k], xi[i * c + k]);
                let (b_r, b_i) = (br.data()[j * c + k], bi.data()[j * c + k]);
                sr += x_r * b_r - x_i * b_i;
                si += x_r * b_i + x_i * b_r;
            }
            tr[i * q + j] = sr;
            ti[i * q + j] = si;
        }
    }
    let mut yr = vec![T::zero(); p * q];
    let mut yi = vec![T::zero(); p * q];
    for i in 0..p {
        for k in 0..r {
            let (a_r, a_i) = (ar.data()[i * r + k], ai.data()[i * r + k]);
            for j in 0..q {
                let (t_r, t_i) = (tr[k * q + j], ti[k * q + j]);
                yr[i * q + j] += a_r * t_r - a_i * t_i;
                yi[i * q + j] += a_r * t_i + a_i * t_r;
            }
        }
    }
    (yr, yi)
}

fn conj_transpose<T: Real>(re: &Tensor<T>, im: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (r, c) = (re.shape()[0], re.shape()[1]);
    let tr = Tensor::from_fn(&[c, r], |i| re.data()[(i % r) * c + i / r]);
    let ti = Tensor::from_fn(&[c, r], |i| -im.data()[(i % r) * c + i / r]);
    (tr, ti)
}

/// Unitary centered forward transform of a real image.
pub fn dft2<T: Real>(x: &Tensor<T>) -> Result<ComplexGrid<T>> {
    let (h, w) = image_dims("dft2", x)?;
    let zeros = vec![T::zero(); h * w];
    transform(x.data(), &zeros, h, w, false)
}

/// Unitary centered forward transform of a complex grid.
pub fn dft2_complex<T: Real>(g: &ComplexGrid<T>) -> Result<ComplexGrid<T>> {
    let (h, w) = g.dims();
    transform(g.re.data(), g.im.data(), h, w, false)
}

/// Unitary centered inverse transform.
pub fn idft2<T: Real>(g: &ComplexGrid<T>) -> Result<ComplexGrid<T>> {
    let (h, w) = g.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "idft2",
            shape: vec![h, w],
            reason: "dimensions must be even",
        });
    }
    transform(g.re.data(), g.im.data(), h, w, true)
}

fn transform<T: Real>(
    re: &[T],
    im: &[T],
    h: usize,
    w: usize,
    inverse: bool,
) -> Result<ComplexGrid<T>> {
    let (hr, hi) = dft_matrix::<T>(h, h);
    let (wr, wi) = dft_matrix::<T>(w, w);
    let (yr, yi) = if inverse {
        // x = Fᴴ X conj(F) = Fᴴ X (Fᴴ)ᵀ
        let (ahr, ahi) = conj_transpose(&hr, &hi);
        let (awr, awi) = conj_transpose(&wr, &wi);
        complex_sandwich((&ahr, &ahi), (re, im), (&awr, &awi))
    } else {
        complex_sandwich((&hr, &hi), (re, im), (&wr, &wi))
    };
    Ok(ComplexGrid {
        re: Tensor::new(&[h, w], yr)?,
        im: Tensor::new(&[h, w], yi)?,
    })
}

fn check_sizes(op: &'static str, small: usize, large: usize) -> Result<()> {
    if !small.is_multiple_of(2) || !large.is_multiple_of(2) || small == 0 {
        return Err(Error::arg(op, "grid sizes must be even and positive"));
    }
    if small > large {
        return Err(Error::arg(op, "target grid is larger than the source"));
    }
    Ok(())
}

/// The raw centered `n x n` block of an `N x N` spectrum.
pub fn center_block<T: Real>(g: &ComplexGrid<T>, n: usize) -> Result<ComplexGrid<T>> {
    let (big, w) = g.dims();
    if big != w {
        return Err(Error::arg("center_block", "spectrum must be square"));
    }
    check_sizes("center_block", n, big)?;
    let off = big / 2 - n / 2;
    let pick =
        |t: &Tensor<T>| Tensor::from_fn(&[n, n], |i| t.data()[(i / n + off) * big + i % n + off]);
    Ok(ComplexGrid {
        re: pick(&g.re),
        im: pick(&g.im),
    })
}

/// Project onto spectra of real images: `X <- (X + conj(X(-f))) / 2` with
/// wraparound on the centered grid.
pub fn hermitian_symmetrize<T: Real>(g: &ComplexGrid<T>) -> ComplexGrid<T> {
    let (h, w) = g.dims();
    let half = T::c(0.5);
    let partner = |i: usize| {
        let (y, x) = (i / w, i % w);
        ((h - y) % h) * w + (w - x) % w
    };
    ComplexGrid {
        re: Tensor::from_fn(&[h, w], |i| {
            (g.re.data()[i] + g.re.data()[partner(i)]) * half
        }),
        im: Tensor::from_fn(&[h, w], |i| {
            (g.im.data()[i] - g.im.data()[partner(i)]) * half
        }),
    }
}

/// Keep the centered `n x n` band, symmetrize it and drop its Nyquist
/// row and column, so the inverse transform is real.
pub fn truncate_center<T: Real>(g: &ComplexGrid<T>, n: usize) -> Result<ComplexGrid<T>> {
    let mut out = hermitian_symmetrize(&center_block(g, n)?);
    for t in [&mut out.re, &mut out.im] {
        let d = t.data_mut();
        for k in 0..n {
            d[k] = T::zero();
            d[k * n] = T::zero();
        }
    }
    Ok(out)
}

/// Embed an `n x n` spectrum at the center of an `N x N` zero grid.
pub fn zerofill_embed<T: Real>(g: &ComplexGrid<T>, big: usize) -> Result<ComplexGrid<T>> {
    let (n, w) = g.dims();
    if n != w {
        return Err(Error::arg("zerofill_embed", "spectrum must be square"));
    }
    check_sizes("zerofill_embed", n, big)?;
    let off = big / 2 - n / 2;
    let place = |t: &Tensor<T>| {
        let mut out = Tensor::zeros(&[big, big]);
        for y in 0..n {
            for x in 0..n {
                out.data_mut()[(y + off) * big + x + off] = t.data()[y * n + x];
            }
        }
        out
    };
    Ok(ComplexGrid {
        re: place(&g.re),
        im: place(&g.im),
    })
}

/// Down-sampling after the Fourier transform: the raw centered block of
/// `dft2(x)`, computed directly with truncated DFT matrices.
pub fn f_u<T: Real>(x: &Tensor<T>, n: usize) -> Result<ComplexGrid<T>> {
    let (big, w) = image_dims("f_u", x)?;
    if big != w {
        return Err(Error::arg("f_u", "image must be square"));
    }
    check_sizes("f_u", n, big)?;
    let (ar, ai) = dft_matrix::<T>(n, big);
    let zeros = vec![T::zero(); big * big];
    let (yr, yi) = complex_sandwich((&ar, &ai), (x.data(), &zeros), (&ar, &ai));
    Ok(ComplexGrid {
        re: Tensor::new(&[n, n], yr)?,
        im: Tensor::new(&[n, n], yi)?,
    })
}

/// Fraction of spectral energy outside the central `n x n` band.
pub fn high_frequency_ratio<T: Real>(x: &Tensor<T>, n: usize) -> Result<T> {
    let spec = dft2(x)?;
    let total = spec.energy();
    if total == T::zero() {
        return Ok(T::zero());
    }
    let band = center_block(&spec, n)?.energy();
    Ok(((total - band) / total).max(T::zero()))
}

/// Truncated DFT matrices shared between differentiable evaluations.
#[derive(Clone)]
pub struct KSpaceOperator<T> {
    size: usize,
    band: usize,
    re: Arc<Tensor<T>>,
    im: Arc<Tensor<T>>,
}

impl<T: Real> KSpaceOperator<T> {
    /// Operator mapping `size x size` images to their `band x band` block.
    pub fn new(size: usize, band: usize) -> Result<Self> {
        check_sizes("kspace operator", band, size)?;
        let (re, im) = dft_matrix::<T>(band, size);
        Ok(KSpaceOperator {
            size,
            band,
            re: Arc::new(re),
            im: Arc::new(im),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn band(&self) -> usize {
        self.band
    }

    /// Differentiable `f_u(x)` for `x: [1, size, size]`; returns `(re, im)`
    /// each of shape `[band, band]`.
    pub fn apply(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
        let (a_r, a_i) = (self.re.clone(), self.im.clone());
        let rr = tape.sandwich(x, a_r.clone(), a_r.clone())?;
        let ii = tape.sandwich(x, a_i.clone(), a_i.clone())?;
        let ri = tape.sandwich(x, a_r.clone(), a_i.clone())?;
        let ir = tape.sandwich(x, a_i, a_r)?;
        let re = tape.sub(rr, ii)?;
        let im = tape.add(ri, ir)?;
        Ok((re, im))
    }
}

/// Low-resolution map from a high-resolution one: centered truncation with
/// the `n/N` resolution rescaling that preserves intensities.
pub fn degrade<T: Real>(image: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let (big, _) = image_dims("degrade", image)?;
    let spec = truncate_center(&dft2(image)?, n)?;
    let small = idft2(&spec.scaled(T::c(n as f64 / big as f64)))?;
    Ok(small.real_image())
}

/// Zero-filled reconstruction of a low-resolution map on the `N x N` grid.
pub fn zero_fill_upsample<T: Real>(low: &Tensor<T>, big: usize) -> Result<Tensor<T>> {
    let (n, _) = image_dims("zero_fill_upsample", low)?;
    let spec = zerofill_embed(&dft2(low)?, big)?;
    let up = idft2(&spec.scaled(T::c(big as f64 / n as f64)))?;
    Ok(up.real_image())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_image(seed: u64, n: usize) -> Tensor<f64> {
        Rng::seed(seed).normal_tensor(&[1, n, n])
    }

    fn random_grid(seed: u64, n: usize) -> ComplexGrid<f64> {
        let mut r = Rng::seed(seed);
        ComplexGrid {
            re: r.normal_tensor(&[n, n]),
            im: r.normal_tensor(&[n, n]),
        }
    }

    #[test]
    fn constant_image_has_dc_only() {
        let c = 0.7;
        let x = Tensor::<f64>::full(&[4, 4], c);
        let s = dft2(&x).unwrap();
        for i in 0..16 {
            let expect = if i == 2 * 4 + 2 { 4.0 * c } else { 0.0 };
            assert!((s.re.data()[i] - expect).abs() < 1e-12);
            assert!(s.im.data()[i].abs() < 1e-12);
        }
    }

    #[test]
    fn parseval_and_round_trip() {
        let x = random_image(1, 8);
        let s = dft2(&x).unwrap();
        let ex: f64 = x.data().iter().map(|v| v * v).sum();
        assert!((s.energy() - ex).abs() / ex < 1e-10);
        let back = idft2(&s).unwrap();
        assert!(back.real_image().max_abs_diff(&x) < 1e-12);
        assert!(back.max_abs_imag() < 1e-12);
    }

    #[test]
    fn impulse_has_flat_magnitude() {
        let mut x = Tensor::<f64>::zeros(&[8, 8]);
        x.data_mut()[19] = 1.0;
        let s = dft2(&x).unwrap();
        for i in 0..64 {
            let m = (s.re.data()[i].powi(2) + s.im.data()[i].powi(2)).sqrt();
            assert!((m - 1.0 / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_dimensions_rejected() {
        assert!(dft2(&Tensor::<f64>::zeros(&[3, 4])).is_err());
        assert!(truncate_center(&random_grid(1, 8), 10).is_err());
        assert!(zerofill_embed(&random_grid(1, 8), 4).is_err());
    }

    #[test]
    fn dft_is_linear() {
        let (x, y) = (random_image(2, 8), random_image(3, 8));
        let (a, b) = (0.3, -1.7);
        let comb = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = dft2(&comb).unwrap();
        let (sx, sy) = (dft2(&x).unwrap(), dft2(&y).unwrap());
        let rhs = ComplexGrid {
            re: sx.re.zip_map(&sy.re, |p, q| a * p + b * q).unwrap(),
            im: sx.im.zip_map(&sy.im, |p, q| a * p + b * q).unwrap(),
        };
        assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn truncation_keeps_dc() {
        let x = Tensor::<f64>::full(&[16, 16], 0.4);
        let t = truncate_center(&dft2(&x).unwrap(), 4).unwrap();
        // raw DC of the 16-grid is 16c; the block keeps it untouched
        assert!((t.re.data()[2 * 4 + 2] - 16.0 * 0.4).abs() < 1e-12);
        let l = degrade(&x.clone().reshape(&[1, 16, 16]).unwrap(), 4).unwrap();
        assert!(l.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn truncation_is_idempotent_through_embedding() {
        let g = random_grid(4, 16);
        let once = truncate_center(&g, 8).unwrap();
        let twice = truncate_center(&zerofill_embed(&once, 16).unwrap(), 8).unwrap();
        assert!(once.max_abs_diff(&twice) < 1e-12);
    }

    #[test]
    fn truncated_spectrum_inverts_to_real() {
        let g = random_grid(5, 16);
        let t = truncate_center(&g, 8).unwrap();
        assert!(idft2(&t).unwrap().max_abs_imag() < 1e-10);
    }

    #[test]
    fn embed_then_truncate_is_identity_on_band() {
        let t = truncate_center(&random_grid(6, 16), 8).unwrap();
        let e = zerofill_embed(&t, 32).unwrap();
        assert!((e.energy() - t.energy()).abs() < 1e-12);
        let back = truncate_center(&e, 8).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-12);
        let raw = center_block(&e, 8).unwrap();
        assert!(raw.max_abs_diff(&t) < 1e-15);
        let z = zerofill_embed(&ComplexGrid::<f64>::zeros(4, 4), 8).unwrap();
        assert_eq!(z.energy(), 0.0);
    }

    #[test]
    fn embed_truncate_is_a_projection() {
        let g = random_grid(7, 16);
        let p1 = zerofill_embed(&truncate_center(&g, 8).unwrap(), 16).unwrap();
        let p2 = zerofill_embed(&truncate_center(&p1, 8).unwrap(), 16).unwrap();
        assert!(p1.max_abs_diff(&p2) < 1e-12);
    }

    #[test]
    fn f_u_of_zero_fill_matches_low_res_spectrum() {
        let low = degrade(&random_image(8, 16), 4).unwrap();
        let up = zero_fill_upsample(&low, 16).unwrap();
        let fu = f_u(&up, 4).unwrap();
        let target = dft2(&low).unwrap().scaled(16.0 / 4.0);
        assert!(fu.max_abs_diff(&target) < 1e-10);
        let zero = f_u(&Tensor::<f64>::zeros(&[1, 8, 8]), 4).unwrap();
        assert_eq!(zero.energy(), 0.0);
        let x = random_image(9, 8);
        assert!(f_u(&x, 8).unwrap().max_abs_diff(&dft2(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn operator_matches_plain_f_u() {
        let x = random_image(10, 16);
        let op = KSpaceOperator::<f64>::new(16, 4).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let (re, im) = op.apply(&mut tape, v).unwrap();
        let plain = f_u(&x, 4).unwrap();
        assert!(tape.value(re).max_abs_diff(&plain.re) < 1e-12);
        assert!(tape.value(im).max_abs_diff(&plain.im) < 1e-12);
    }

    #[test]
    fn high_frequency_ratio_of_band_limited_image_is_zero() {
        let low = degrade(&random_image(11, 16), 4).unwrap();
        let up = zero_fill_upsample(&low, 16).unwrap();
        assert!(high_frequency_ratio(&up, 4).unwrap() < 1e-12);
        let x = random_image(12, 16);
        let r = high_frequency_ratio(&x, 4).unwrap();
        assert!(r > 0.5 && r < 1.0);
    }
}
