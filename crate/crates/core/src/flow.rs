//! Invertible flow steps. Every step maps `[C,H,W]` activations and reports
//! an exact log-determinant in both directions.

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{matmul, Lu};
use crate::nn::{join, ScaleShiftNet};
use crate::params::{Binding, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;
use num_traits::Float;

/// Offset added to raw scales before the sigmoid.
pub const SCALE_BIAS: f64 = 2.0;
/// Lower bound of every affine scale.
#[cfg(not(feature = "mutation-no-scale-floor"))]
pub const SCALE_FLOOR: f64 = 0.05;
/// Deliberate fault for checking that the selftest notices a missing floor.
#[cfg(feature = "mutation-no-scale-floor")]
pub const SCALE_FLOOR: f64 = 0.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    ActNorm,
    InvConv1x1,
    AffineInjector,
    CondAffineCoupling,
    Squeeze,
    Split,
    Transition,
}

impl StepKind {
    pub fn name(self) -> &'static str {
        match self {
            StepKind::ActNorm => "actnorm",
            StepKind::InvConv1x1 => "invconv1x1",
            StepKind::AffineInjector => "affine_injector",
            StepKind::CondAffineCoupling => "cond_affine_coupling",
            StepKind::Squeeze => "squeeze",
            StepKind::Split => "split",
            StepKind::Transition => "transition",
        }
    }
}

/// `sigmoid(raw + 2) + 0.05`, strictly positive.
pub fn bounded_scale<T: Real>(tape: &mut Tape<T>, raw: Var) -> Result<Var> {
    let r = tape.offset(raw, T::c(SCALE_BIAS))?;
    let s = tape.sigmoid(r)?;
    tape.offset(s, T::c(SCALE_FLOOR))
}

pub fn bounded_scale_value(raw: f64) -> f64 {
    1.0 / (1.0 + Float::exp(-(raw + SCALE_BIAS))) + SCALE_FLOOR
}

fn zero<T: Real>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

fn spatial<T: Real>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::InvalidShape {
            op,
            shape: s.to_vec(),
            reason: "expected [C,H,W]",
        }),
    }
}

/// Per-channel `y = s * (x + b)`.
#[derive(Debug, Clone)]
pub struct ActNorm {
    pub bias: ParamId,
    pub scale: ParamId,
    pub channels: usize,
}

impl ActNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        ActNorm {
            bias: store.add(join(name, "bias"), Tensor::zeros(&[channels])),
            scale: store.add(join(name, "scale"), Tensor::full(&[channels], T::one())),
            channels,
        }
    }

    fn check_scale<T: Real>(&self, tape: &Tape<T>, bind: &Binding) -> Result<()> {
        let s = tape.value(bind.var(self.scale));
        match s.data().iter().position(|v| *v == T::zero()) {
            Some(channel) => Err(Error::ZeroScale { channel }),
            None => Ok(()),
        }
    }

    fn logdet<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, hw: usize) -> Result<Var> {
        let a = tape.abs(bind.var(self.scale))?;
        let l = tape.log(a)?;
        let l = tape.sum_all(l)?;
        tape.scale(l, T::c(hw as f64))
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        x: Var,
    ) -> Result<(Var, Var)> {
        let (_, h, w) = spatial(tape, x, "actnorm")?;
        self.check_scale(tape, bind)?;
        let y = tape.add(x, bind.var(self.bias))?;
        let y = tape.mul(y, bind.var(self.scale))?;
        Ok((y, self.logdet(tape, bind, h * w)?))
    }

    pub fn inverse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        y: Var,
    ) -> Result<(Var, Var)> {
        let (_, h, w) = spatial(tape, y, "actnorm inverse")?;
        self.check_scale(tape, bind)?;
        let x = tape.div(y, bind.var(self.scale))?;
        let x = tape.sub(x, bind.var(self.bias))?;
        let ld = self.logdet(tape, bind, h * w)?;
        Ok((x, tape.neg(ld)?))
    }

    /// Data-dependent values giving zero mean and unit std per channel over
    /// all samples and pixels of `batch`.
    pub fn init_values<T: Real>(&self, batch: &[&Tensor<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
        let c = self.channels;
        let mut sum = alloc::vec![0.0f64; c];
        let mut sq = alloc::vec![0.0f64; c];
        let mut count = 0usize;
        for x in batch {
            let (xc, h, w) = x.chw()?;
            if xc != c {
                return Err(Error::ShapeMismatch {
                    op: "actnorm init",
                    left: x.shape().to_vec(),
                    right: alloc::vec![c],
                });
            }
            for (ch, plane) in x.data().chunks(h * w).enumerate() {
                for v in plane {
                    sum[ch] += v.f64();
                }
            }
            count += h * w;
        }
        if count == 0 {
            return Err(Error::arg("actnorm init", "empty batch"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        for x in batch {
            let (_, h, w) = x.chw()?;
            for (ch, plane) in x.data().chunks(h * w).enumerate() {
                for v in plane {
                    let d = v.f64() - mean[ch];
                    sq[ch] += d * d;
                }
            }
        }
        let bias = Tensor::from_fn(&[c], |i| T::c(-mean[i]));
        let scale = Tensor::from_fn(&[c], |i| {
            let std = Float::sqrt(sq[i] / count as f64);
            T::c(1.0 / std.max(1e-6))
        });
        Ok((bias, scale))
    }
}

/// Invertible 1x1 convolution with a learned `[C,C]` channel-mixing matrix.
#[derive(Debug, Clone)]
pub struct InvConv1x1 {
    pub weight: ParamId,
    pub channels: usize,
}

impl InvConv1x1 {
    /// Starts from a Haar-random orthogonal matrix.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut Rng,
    ) -> Self {
        let q = random_orthogonal(channels, rng);
        let w = Tensor::from_fn(&[channels, channels], |i| T::c(q[i]));
        InvConv1x1 {
            weight: store.add(join(name, "weight"), w),
            channels,
        }
    }

    fn logdet<T: Real>(&self, tape: &mut Tape<T>, w: Var, hw: usize) -> Result<Var> {
        let l = tape.log_abs_det(w)?;
        tape.scale(l, T::c(hw as f64))
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        x: Var,
    ) -> Result<(Var, Var)> {
        let (_, h, w) = spatial(tape, x, "invconv1x1")?;
        let m = bind.var(self.weight);
        let ld = self.logdet(tape, m, h * w)?;
        Ok((tape.channel_mix(x, m)?, ld))
    }

    pub fn inverse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        y: Var,
    ) -> Result<(Var, Var)> {
        let (_, h, w) = spatial(tape, y, "invconv1x1 inverse")?;
        let inv = tape.mat_inverse(bind.var(self.weight))?;
        let ld = self.logdet(tape, inv, h * w)?;
        Ok((tape.channel_mix(y, inv)?, ld))
    }
}

/// Row-major `n x n` orthogonal matrix from QR of a Gaussian matrix with the
/// sign convention `diag(R) > 0`.
pub fn random_orthogonal(n: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let a: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        // Modified Gram-Schmidt over columns.
        let mut q = a.clone();
        let mut ok = true;
        for j in 0..n {
            for k in 0..j {
                let dot: f64 = (0..n).map(|i| q[i * n + j] * q[i * n + k]).sum();
                for i in 0..n {
                    q[i * n + j] -= dot * q[i * n + k];
                }
            }
            let norm = Float::sqrt((0..n).map(|i| q[i * n + j] * q[i * n + j]).sum::<f64>());
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for i in 0..n {
                q[i * n + j] /= norm;
            }
        }
        if ok {
            debug_assert!({
                let qt = crate::linalg::transpose(n, &q);
                let p = matmul(n, n, n, &qt, &q);
                (0..n).all(|i| (p[i * n + i] - 1.0).abs() < 1e-8)
            });
            if Lu::new(n, &q).check_nonsingular().is_ok() {
                return q;
            }
        }
    }
}

/// `y = scale(u) * x + shift(u)` over every element, with scale and shift
/// predicted from conditioning features only.
#[derive(Debug, Clone)]
pub struct AffineInjector {
    pub net: ScaleShiftNet,
    pub channels: usize,
}

impl AffineInjector {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cond_channels: usize,
        width: usize,
        rng: &mut Rng,
    ) -> Self {
        AffineInjector {
            net: ScaleShiftNet::new(
                store,
                &join(name, "net"),
                cond_channels,
                width,
                channels,
                rng,
            ),
            channels,
        }
    }

    fn params<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        u: Var,
    ) -> Result<(Var, Var, Var)> {
        let (raw, t) = self.net.forward(tape, bind, u)?;
        let s = bounded_scale(tape, raw)?;
        let ls = tape.log(s)?;
        let ld = tape.sum_all(ls)?;
        Ok((s, t, ld))
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        x: Var,
        u: Var,
    ) -> Result<(Var, Var)> {
        let (s, t, ld) = self.params(tape, bind, u)?;
        let y = tape.mul(x, s)?;
        Ok((tape.add(y, t)?, ld))
    }

    pub fn inverse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        y: Var,
        u: Var,
    ) -> Result<(Var, Var)> {
        let (s, t, ld) = self.params(tape, bind, u)?;
        let x = tape.sub(y, t)?;
        Ok((tape.div(x, s)?, tape.neg(ld)?))
    }
}

/// Channel-split affine coupling conditioned on the passive half and on `u`.
#[derive(Debug, Clone)]
pub struct CondAffineCoupling {
    pub net: ScaleShiftNet,
    pub channels: usize,
    pub passive: usize,
}

impl CondAffineCoupling {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cond_channels: usize,
        width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if channels < 2 {
            return Err(Error::Architecture(alloc::format!(
                "coupling needs at least 2 channels, got {channels}"
            )));
        }
        let passive = channels.div_ceil(2);
        let active = channels - passive;
        Ok(CondAffineCoupling {
            net: ScaleShiftNet::new(
                store,
                &join(name, "net"),
                passive + cond_channels,
                width,
                active,
                rng,
            ),
            channels,
            passive,
        })
    }

    fn params<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        xa: Var,
        u: Var,
    ) -> Result<(Var, Var, Var)> {
        let input = tape.concat_channels(&[xa, u])?;
        let (raw, t) = self.net.forward(tape, bind, input)?;
        let s = bounded_scale(tape, raw)?;
        let ls = tape.log(s)?;
        let ld = tape.sum_all(ls)?;
        Ok((s, t, ld))
    }

    fn halves<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
        let (c, _, _) = spatial(tape, x, "coupling")?;
        if c != self.channels {
            return Err(Error::ShapeMismatch {
                op: "coupling",
                left: tape.shape(x).to_vec(),
                right: alloc::vec![self.channels],
            });
        }
        let a = tape.slice_channels(x, 0, self.passive)?;
        let b = tape.slice_channels(x, self.passive, c - self.passive)?;
        Ok((a, b))
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        x: Var,
        u: Var,
    ) -> Result<(Var, Var)> {
        let (xa, xb) = self.halves(tape, x)?;
        let (s, t, ld) = self.params(tape, bind, xa, u)?;
        let yb = tape.mul(xb, s)?;
        let yb = tape.add(yb, t)?;
        Ok((tape.concat_channels(&[xa, yb])?, ld))
    }

    pub fn inverse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        y: Var,
        u: Var,
    ) -> Result<(Var, Var)> {
        let (ya, yb) = self.halves(tape, y)?;
        let (s, t, ld) = self.params(tape, bind, ya, u)?;
        let xb = tape.sub(yb, t)?;
        let xb = tape.div(xb, s)?;
        Ok((tape.concat_channels(&[ya, xb])?, tape.neg(ld)?))
    }
}

/// Actnorm followed by an invertible 1x1 convolution.
#[derive(Debug, Clone)]
pub struct Transition {
    pub actnorm: ActNorm,
    pub invconv: InvConv1x1,
}

impl Transition {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut Rng,
    ) -> Self {
        Transition {
            actnorm: ActNorm::new(store, &join(name, "actnorm"), channels),
            invconv: InvConv1x1::new(store, &join(name, "invconv"), channels, rng),
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        x: Var,
    ) -> Result<(Var, Var)> {
        let (y, a) = self.actnorm.forward(tape, bind, x)?;
        let (y, b) = self.invconv.forward(tape, bind, y)?;
        Ok((y, tape.add(a, b)?))
    }

    pub fn inverse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        y: Var,
    ) -> Result<(Var, Var)> {
        let (x, b) = self.invconv.inverse(tape, bind, y)?;
        let (x, a) = self.actnorm.inverse(tape, bind, x)?;
        Ok((x, tape.add(a, b)?))
    }
}

/// Gather indices of the space-to-depth map `[C,H,W] -> [4C,H/2,W/2]`.
/// Output channel `4c + q` holds quadrant `q` (top-left, top-right,
/// bottom-left, bottom-right) of input channel `c`.
pub fn squeeze_index(c: usize, h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for q in 0..4 {
            let (dy, dx) = (q / 2, q % 2);
            for i in 0..oh {
                for j in 0..ow {
                    idx.push(ch * h * w + (2 * i + dy) * w + 2 * j + dx);
                }
            }
        }
    }
    idx
}

/// Inverse permutation of [`squeeze_index`], expressed on the squeezed layout.
pub fn unsqueeze_index(c: usize, h: usize, w: usize) -> Vec<usize> {
    let fwd = squeeze_index(c, h, w);
    let mut inv = alloc::vec![0; fwd.len()];
    for (out, &src) in fwd.iter().enumerate() {
        inv[src] = out;
    }
    inv
}

pub fn squeeze<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (c, h, w) = spatial(tape, x, "squeeze")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "squeeze",
            shape: alloc::vec![c, h, w],
            reason: "spatial dims must be even",
        });
    }
    tape.gather(x, &[4 * c, h / 2, w / 2], Arc::new(squeeze_index(c, h, w)))
}

pub fn unsqueeze<T: Real>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
    let (c4, h2, w2) = spatial(tape, y, "unsqueeze")?;
    if c4 % 4 != 0 {
        return Err(Error::InvalidShape {
            op: "unsqueeze",
            shape: alloc::vec![c4, h2, w2],
            reason: "channel count must be a multiple of 4",
        });
    }
    let (c, h, w) = (c4 / 4, h2 * 2, w2 * 2);
    tape.gather(y, &[c, h, w], Arc::new(unsqueeze_index(c, h, w)))
}

/// First half of the channels continues, second half leaves as a latent.
pub fn split<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
    let (c, h, w) = spatial(tape, x, "split")?;
    if c % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "split",
            shape: alloc::vec![c, h, w],
            reason: "channel count must be even",
        });
    }
    Ok((
        tape.slice_channels(x, 0, c / 2)?,
        tape.slice_channels(x, c / 2, c / 2)?,
    ))
}

pub fn merge<T: Real>(tape: &mut Tape<T>, kept: Var, latent: Var) -> Result<Var> {
    if tape.shape(kept) != tape.shape(latent) {
        return Err(Error::ShapeMismatch {
            op: "merge",
            left: tape.shape(kept).to_vec(),
            right: tape.shape(latent).to_vec(),
        });
    }
    tape.concat_channels(&[kept, latent])
}

/// One parameterized step of a flow, with `u` the conditioning features at
/// the step's resolution.
#[derive(Debug, Clone)]
pub enum FlowStep {
    ActNorm(ActNorm),
    InvConv1x1(InvConv1x1),
    AffineInjector(AffineInjector),
    CondAffineCoupling(CondAffineCoupling),
    Squeeze,
    Transition(Transition),
}

impl FlowStep {
    pub fn kind(&self) -> StepKind {
        match self {
            FlowStep::ActNorm(_) => StepKind::ActNorm,
            FlowStep::InvConv1x1(_) => StepKind::InvConv1x1,
            FlowStep::AffineInjector(_) => StepKind::AffineInjector,
            FlowStep::CondAffineCoupling(_) => StepKind::CondAffineCoupling,
            FlowStep::Squeeze => StepKind::Squeeze,
            FlowStep::Transition(_) => StepKind::Transition,
        }
    }

    fn need_u(u: Option<Var>) -> Result<Var> {
        u.ok_or_else(|| Error::arg("flow step", "conditioning features required"))
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        x: Var,
        u: Option<Var>,
    ) -> Result<(Var, Var)> {
        match self {
            FlowStep::ActNorm(s) => s.forward(tape, bind, x),
            FlowStep::InvConv1x1(s) => s.forward(tape, bind, x),
            FlowStep::AffineInjector(s) => s.forward(tape, bind, x, Self::need_u(u)?),
            FlowStep::CondAffineCoupling(s) => s.forward(tape, bind, x, Self::need_u(u)?),
            FlowStep::Squeeze => {
                let y = squeeze(tape, x)?;
                Ok((y, zero(tape)))
            }
            FlowStep::Transition(s) => s.forward(tape, bind, x),
        }
    }

    pub fn inverse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        y: Var,
        u: Option<Var>,
    ) -> Result<(Var, Var)> {
        match self {
            FlowStep::ActNorm(s) => s.inverse(tape, bind, y),
            FlowStep::InvConv1x1(s) => s.inverse(tape, bind, y),
            FlowStep::AffineInjector(s) => s.inverse(tape, bind, y, Self::need_u(u)?),
            FlowStep::CondAffineCoupling(s) => s.inverse(tape, bind, y, Self::need_u(u)?),
            FlowStep::Squeeze => {
                let x = unsqueeze(tape, y)?;
                Ok((x, zero(tape)))
            }
            FlowStep::Transition(s) => s.inverse(tape, bind, y),
        }
    }
}
