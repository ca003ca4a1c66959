//! Training objective terms and image-quality metrics.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::{Tape, Var};
use crate::condition::Condition;
use crate::error::{Error, Result};
use crate::kspace::{dft2, KSpaceOperator};
use crate::model::EnhancerModel;
use crate::params::Binding;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const WINDOW_SIZE: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Standard five-level MS-SSIM exponents.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Floor applied to per-level similarity terms before exponentiation.
const SIMILARITY_FLOOR: f64 = 1e-6;
/// Smoothing of the complex modulus in the data-consistency loss; keeps the
/// gradient finite where the residual vanishes.
pub const DC_SMOOTHING: f64 = 1e-8;
/// PSNR reported when the images agree to within `MSE < 1e-10`.
pub const PSNR_CAP: f64 = 100.0;

fn same_shape<T: Real>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            left: tape.shape(a).to_vec(),
            right: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Mean absolute difference.
pub fn pixel_l1<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "pixel_l1", a, b)?;
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean_all(d)
}

/// Normalized `11 x 11` Gaussian window as a `[1,1,11,11]` kernel.
pub fn gaussian_window<T: Real>() -> Tensor<T> {
    let half = (WINDOW_SIZE / 2) as f64;
    let g: Vec<f64> = (0..WINDOW_SIZE)
        .map(|i| {
            let d = i as f64 - half;
            Float::exp(-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA))
        })
        .collect();
    let s: f64 = g.iter().sum();
    Tensor::from_fn(&[1, 1, WINDOW_SIZE, WINDOW_SIZE], |i| {
        T::c(g[i / WINDOW_SIZE] * g[i % WINDOW_SIZE] / (s * s))
    })
}

/// Luminance and contrast-structure maps over valid window positions.
fn similarity_maps<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<(Var, Var)> {
    let w = tape.constant(gaussian_window());
    let blur = |tape: &mut Tape<T>, x: Var| tape.conv2d(x, w, None, 1, 0);
    let mu_a = blur(tape, a)?;
    let mu_b = blur(tape, b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = blur(tape, aa)?;
    let e_bb = blur(tape, bb)?;
    let e_ab = blur(tape, ab)?;
    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let (c1, c2) = (T::c(SSIM_C1), T::c(SSIM_C2));
    let num = tape.scale(cov, T::c(2.0))?;
    let num = tape.offset(num, c2)?;
    let den = tape.add(var_a, var_b)?;
    let den = tape.offset(den, c2)?;
    let cs = tape.div(num, den)?;

    let lnum = tape.scale(mu_ab, T::c(2.0))?;
    let lnum = tape.offset(lnum, c1)?;
    let lden = tape.add(mu_aa, mu_bb)?;
    let lden = tape.offset(lden, c1)?;
    let lum = tape.div(lnum, lden)?;
    Ok((lum, cs))
}

/// Largest level count the image supports: `min_dim >= 11 * 2^(levels-1)`,
/// capped at five.
pub fn auto_levels(min_dim: usize) -> usize {
    (1..=MS_SSIM_WEIGHTS.len())
        .take_while(|&l| min_dim >= WINDOW_SIZE << (l - 1))
        .last()
        .unwrap_or(0)
}

/// The first `levels` standard exponents renormalized to sum to one.
pub fn level_weights(levels: usize) -> Vec<f64> {
    let w = &MS_SSIM_WEIGHTS[..levels.min(MS_SSIM_WEIGHTS.len())];
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Multi-scale structural similarity of two `[1,H,W]` images with values in
/// `[0,1]`. `levels = None` picks [`auto_levels`].
pub fn ms_ssim<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, levels: Option<usize>) -> Result<Var> {
    same_shape(tape, "ms_ssim", a, b)?;
    let (_, h, w) = tape.value(a).chw()?;
    let min_dim = h.min(w);
    let levels = levels.unwrap_or_else(|| auto_levels(min_dim));
    if levels == 0 || levels > MS_SSIM_WEIGHTS.len() || min_dim < WINDOW_SIZE << (levels - 1) {
        return Err(Error::arg(
            "ms_ssim",
            format!("{h}x{w} image is too small for {levels} levels"),
        ));
    }
    let weights = level_weights(levels);
    let (floor, ceil) = (T::c(SIMILARITY_FLOOR), T::c(1e30));
    let (mut x, mut y) = (a, b);
    let mut acc: Option<Var> = None;
    for (j, &wj) in weights.iter().enumerate() {
        let (lum, cs) = similarity_maps(tape, x, y)?;
        let term = if j + 1 < levels {
            tape.mean_all(cs)?
        } else {
            let s = tape.mul(lum, cs)?;
            tape.mean_all(s)?
        };
        let term = tape.clamp(term, floor, ceil)?;
        let term = tape.powf(term, T::c(wj))?;
        acc = Some(match acc {
            None => term,
            Some(p) => tape.mul(p, term)?,
        });
        if j + 1 < levels {
            x = tape.avg_pool2(x)?;
            y = tape.avg_pool2(y)?;
        }
    }
    Ok(acc.expect("at least one level"))
}

/// Single-scale SSIM with the MS-SSIM window and constants.
pub fn ssim_graph<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, "ssim", a, b)?;
    let (_, h, w) = tape.value(a).chw()?;
    if h.min(w) < WINDOW_SIZE {
        return Err(Error::arg(
            "ssim",
            format!("{h}x{w} image is smaller than the window"),
        ));
    }
    let (lum, cs) = similarity_maps(tape, a, b)?;
    let s = tape.mul(lum, cs)?;
    tape.mean_all(s)
}

#[derive(Debug, Clone, Copy)]
pub struct GuideTerms {
    pub pixel_l1: Var,
    /// `1 - ms_ssim`.
    pub structural: Var,
    pub total: Var,
}

/// `(1 - alpha) * pixel_l1 + alpha * (1 - ms_ssim)`.
pub fn guide_loss<T: Real>(
    tape: &mut Tape<T>,
    target: Var,
    enhanced: Var,
    alpha: f64,
) -> Result<GuideTerms> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::arg(
            "guide loss",
            format!("alpha must lie in [0, 1], got {alpha}"),
        ));
    }
    let l1 = pixel_l1(tape, target, enhanced)?;
    let ms = ms_ssim(tape, target, enhanced, None)?;
    let neg = tape.neg(ms)?;
    let structural = tape.offset(neg, T::one())?;
    let a = tape.scale(l1, T::c(1.0 - alpha))?;
    let b = tape.scale(structural, T::c(alpha))?;
    let total = tape.add(a, b)?;
    Ok(GuideTerms {
        pixel_l1: l1,
        structural,
        total,
    })
}

/// Centered spectrum of the measured low-resolution map, ready for
/// [`dc_loss`].
#[derive(Debug, Clone)]
pub struct Measurement<T> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

impl<T: Real> Measurement<T> {
    pub fn from_low(low: &Tensor<T>) -> Result<Self> {
        let g = dft2(low)?;
        Ok(Measurement { re: g.re, im: g.im })
    }

    pub fn band(&self) -> usize {
        self.re.shape()[0]
    }
}

/// Mean over the `n x n` band of `|F(L) - (n/N) F_u(H)|`, with the modulus
/// smoothed by [`DC_SMOOTHING`].
pub fn dc_loss<T: Real>(
    tape: &mut Tape<T>,
    op: &KSpaceOperator<T>,
    measured: &Measurement<T>,
    enhanced: Var,
) -> Result<Var> {
    if measured.band() != op.band() {
        return Err(Error::ShapeMismatch {
            op: "dc_loss",
            left: measured.re.shape().to_vec(),
            right: alloc::vec![op.band(), op.band()],
        });
    }
    let (re, im) = op.apply(tape, enhanced)?;
    let ratio = T::c(op.band() as f64 / op.size() as f64);
    let re = tape.scale(re, ratio)?;
    let im = tape.scale(im, ratio)?;
    let mr = tape.constant(measured.re.clone());
    let mi = tape.constant(measured.im.clone());
    let dr = tape.sub(mr, re)?;
    let di = tape.sub(mi, im)?;
    let dr = tape.square(dr)?;
    let di = tape.square(di)?;
    let m2 = tape.add(dr, di)?;
    let eps = T::c(DC_SMOOTHING);
    let m2 = tape.offset(m2, eps * eps)?;
    let m = tape.sqrt(m2)?;
    let m = tape.offset(m, -eps)?;
    tape.mean_all(m)
}

// ---- total objective --------------------------------------------------

/// Objective weights after ablation switches are applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub guide: f64,
    pub dc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.84,
            guide: 10.0,
            dc: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::arg(
                "loss weights",
                format!("alpha must lie in [0, 1], got {}", self.alpha),
            ));
        }
        if !(self.guide >= 0.0 && self.dc >= 0.0) {
            return Err(Error::arg("loss weights", "weights must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    /// Negative log-likelihood in nats per pixel.
    pub nll: f64,
    pub guide: f64,
    pub pixel_l1: f64,
    pub structural: f64,
    pub dc: f64,
    /// `nll + guide_weight * guide + dc_weight * dc`.
    pub total: f64,
    pub weights: LossWeights,
    /// Temperature used for the data-consistency pass.
    pub dc_temperature: f64,
}

impl LossReport {
    pub fn recompute_total(&self) -> f64 {
        self.nll + self.weights.guide * self.guide + self.weights.dc * self.dc
    }
}

/// One training example as seen by the objective.
#[derive(Debug, Clone)]
pub struct ObjectiveInput<'a, T> {
    /// Ground-truth map, already dequantized by the caller.
    pub target: &'a Tensor<T>,
    pub measured: &'a Measurement<T>,
    pub cond: &'a Condition<T>,
}

/// Graph of the full objective. `dc_noise` are the standard-normal draws
/// for the data-consistency pass at temperature `dc_temperature`. Terms with
/// zero weight are still evaluated for reporting but stay out of the loss.
#[allow(clippy::too_many_arguments)]
pub fn objective_graph<T: Real>(
    model: &EnhancerModel<T>,
    tape: &mut Tape<T>,
    bind: &Binding,
    op: &KSpaceOperator<T>,
    input: &ObjectiveInput<'_, T>,
    weights: LossWeights,
    dc_temperature: f64,
    dc_noise: &[Tensor<T>],
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let enc = model.encode(tape, bind, input.cond)?;
    let x = tape.constant(input.target.clone());
    let (z, logdet, _) = model.forward_graph(tape, bind, x, &enc)?;
    let lp = model.log_prob_graph(tape, &z, &enc)?;
    let ll = tape.add(lp, logdet)?;
    let pixels = (model.config().size * model.config().size) as f64;
    let nll = tape.scale(ll, T::c(-1.0 / pixels))?;

    let mode = model.sample_graph(tape, &enc, 0.0, &[])?;
    let (sharp, _) = model.inverse_graph(tape, bind, &mode, &enc)?;
    let guide = guide_loss(tape, x, sharp, weights.alpha)?;

    let zt = model.sample_graph(tape, &enc, dc_temperature, dc_noise)?;
    let (sampled, _) = model.inverse_graph(tape, bind, &zt, &enc)?;
    let dc = dc_loss(tape, op, input.measured, sampled)?;

    let mut total = nll;
    if weights.guide > 0.0 {
        let g = tape.scale(guide.total, T::c(weights.guide))?;
        total = tape.add(total, g)?;
    }
    if weights.dc > 0.0 {
        let d = tape.scale(dc, T::c(weights.dc))?;
        total = tape.add(total, d)?;
    }
    let val = |v: Var| tape.value(v).item().f64();
    let mut report = LossReport {
        nll: val(nll),
        guide: val(guide.total),
        pixel_l1: val(guide.pixel_l1),
        structural: val(guide.structural),
        dc: val(dc),
        total: 0.0,
        weights,
        dc_temperature,
    };
    report.total = report.recompute_total();
    Ok((total, report))
}

/// Evaluate the objective with frozen parameters, drawing the
/// data-consistency temperature `U(0,1)` and its noise from `rng`.
pub fn total_loss<T: Real>(
    model: &EnhancerModel<T>,
    input: &ObjectiveInput<'_, T>,
    weights: LossWeights,
    rng: &mut Rng,
) -> Result<LossReport> {
    let op = KSpaceOperator::new(model.config().size, input.measured.band())?;
    let tau = rng.uniform();
    let noise = model.draw_noise(rng);
    let mut tape = Tape::new();
    let bind = model.params().bind(&mut tape, false);
    let (_, report) = objective_graph(model, &mut tape, &bind, &op, input, weights, tau, &noise)?;
    Ok(report)
}

// ---- value-level metrics ----------------------------------------------

fn pair<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> (Tape<T>, Var, Var) {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    (tape, av, bv)
}

pub fn pixel_l1_value<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (mut tape, av, bv) = pair(a, b);
    let v = pixel_l1(&mut tape, av, bv)?;
    Ok(tape.value(v).item().f64())
}

pub fn ms_ssim_value<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (mut tape, av, bv) = pair(a, b);
    let v = ms_ssim(&mut tape, av, bv, None)?;
    Ok(tape.value(v).item().f64())
}

pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (mut tape, av, bv) = pair(a, b);
    let v = ssim_graph(&mut tape, av, bv)?;
    Ok(tape.value(v).item().f64())
}

/// Peak signal-to-noise ratio in dB for peak 1, capped at [`PSNR_CAP`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.f64() - y.f64();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * Float::log10(1.0 / mse)).min(PSNR_CAP))
}

/// Data-consistency loss of `enhanced` against the low-resolution map `low`.
pub fn dc_loss_value<T: Real>(low: &Tensor<T>, enhanced: &Tensor<T>) -> Result<f64> {
    let measured = Measurement::from_low(low)?;
    let size = enhanced.shape().last().copied().unwrap_or(0);
    let op = KSpaceOperator::new(size, measured.band())?;
    let mut tape = Tape::new();
    let e = tape.constant(enhanced.clone());
    let v = dc_loss(&mut tape, &op, &measured, e)?;
    Ok(tape.value(v).item().f64())
}
