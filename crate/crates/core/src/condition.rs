//! Condition encoder and the learnable Gaussian base distribution.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Conv, Init};
use crate::params::{Binding, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Clamp range of predicted log standard deviations.
pub const LOG_SIGMA_LIMIT: f64 = 7.0;
/// Largest accepted sampling temperature.
pub const MAX_TEMPERATURE: f64 = 1.5;

/// The conditioning triplet: super-resolved map plus the two MRI contrasts,
/// each `[1,N,N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition<T> {
    pub sr: Tensor<T>,
    pub t1: Tensor<T>,
    pub flair: Tensor<T>,
}

impl<T: Real> Condition<T> {
    pub fn new(sr: Tensor<T>, t1: Tensor<T>, flair: Tensor<T>) -> Result<Self> {
        let c = Condition { sr, t1, flair };
        c.check()?;
        Ok(c)
    }

    pub fn size(&self) -> usize {
        self.sr.shape().last().copied().unwrap_or(0)
    }

    fn check(&self) -> Result<()> {
        let s = self.sr.shape();
        if s.len() != 3 || s[0] != 1 || s[1] != s[2] {
            return Err(Error::InvalidShape {
                op: "condition",
                shape: s.to_vec(),
                reason: "expected a square [1,N,N] map",
            });
        }
        for other in [&self.t1, &self.flair] {
            if other.shape() != s {
                return Err(Error::ShapeMismatch {
                    op: "condition",
                    left: s.to_vec(),
                    right: other.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Condition<U> {
        Condition {
            sr: self.sr.cast(),
            t1: self.t1.cast(),
            flair: self.flair.cast(),
        }
    }
}

/// Mean and clamped log standard deviation of every latent level.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseDistribution<T> {
    pub levels: Vec<GaussianLevel<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLevel<T> {
    pub mean: Tensor<T>,
    pub log_sigma: Tensor<T>,
}

impl<T: Real> GaussianLevel<T> {
    pub fn standard(shape: &[usize]) -> Self {
        GaussianLevel {
            mean: Tensor::zeros(shape),
            log_sigma: Tensor::zeros(shape),
        }
    }

    pub fn sigma(&self) -> Tensor<T> {
        self.log_sigma.map(Float::exp)
    }
}

impl<T: Real> BaseDistribution<T> {
    pub fn standard(shapes: &[Vec<usize>]) -> Self {
        BaseDistribution {
            levels: shapes.iter().map(|s| GaussianLevel::standard(s)).collect(),
        }
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels
            .iter()
            .map(|l| l.mean.shape().to_vec())
            .collect()
    }

    fn check(&self, z: &[Tensor<T>]) -> Result<()> {
        if z.len() != self.levels.len() {
            return Err(Error::arg(
                "base distribution",
                format!(
                    "expected {} latent levels, got {}",
                    self.levels.len(),
                    z.len()
                ),
            ));
        }
        for (zi, l) in z.iter().zip(&self.levels) {
            if zi.shape() != l.mean.shape() {
                return Err(Error::ShapeMismatch {
                    op: "base distribution",
                    left: zi.shape().to_vec(),
                    right: l.mean.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// `log N(z; mean, sigma)` summed over every element of every level.
    pub fn log_prob(&self, z: &[Tensor<T>]) -> Result<T> {
        self.check(z)?;
        let mut tape = Tape::new();
        let mut terms = Vec::new();
        for (zi, l) in z.iter().zip(&self.levels) {
            let zv = tape.constant(zi.clone());
            let m = tape.constant(l.mean.clone());
            let ls = tape.constant(l.log_sigma.clone());
            terms.push(gaussian_log_prob(&mut tape, zv, Some((m, ls)))?);
        }
        let total = sum_vars(&mut tape, &terms)?;
        Ok(tape.value(total).item())
    }

    /// `z = mean + tau * sigma * eps`, `eps ~ N(0, I)` drawn level by level.
    /// `tau = 0` returns the means without touching `rng`.
    pub fn sample(&self, tau: f64, rng: &mut Rng) -> Result<Vec<Tensor<T>>> {
        check_temperature(tau)?;
        Ok(self
            .levels
            .iter()
            .map(|l| {
                if tau == 0.0 {
                    return l.mean.clone();
                }
                let mut z = l.mean.clone();
                for (zi, ls) in z.data_mut().iter_mut().zip(l.log_sigma.data()) {
                    let eps = rng.normal();
                    *zi += T::c(tau * ls.f64().exp() * eps);
                }
                z
            })
            .collect())
    }
}

pub fn check_temperature(tau: f64) -> Result<()> {
    if !(0.0..=MAX_TEMPERATURE).contains(&tau) {
        return Err(Error::arg(
            "temperature",
            format!("tau must lie in [0, {MAX_TEMPERATURE}], got {tau}"),
        ));
    }
    Ok(())
}

pub(crate) fn sum_vars<T: Real>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let mut it = vars.iter().copied();
    let mut acc = match it.next() {
        Some(v) => v,
        None => return Ok(tape.constant(Tensor::scalar(T::zero()))),
    };
    for v in it {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// `-1/2 sum [((z - mean)/sigma)^2 + log(2 pi sigma^2)]`. `None` means the
/// standard normal. `log_sigma` must already be clamped.
pub fn gaussian_log_prob<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    params: Option<(Var, Var)>,
) -> Result<Var> {
    let count = tape.value(z).len() as f64;
    let norm = -0.5 * count * (2.0 * core::f64::consts::PI).ln();
    let quad = match params {
        None => {
            let sq = tape.square(z)?;
            tape.sum_all(sq)?
        }
        Some((mean, log_sigma)) => {
            let d = tape.sub(z, mean)?;
            let nls = tape.neg(log_sigma)?;
            let inv = tape.exp(nls)?;
            let r = tape.mul(d, inv)?;
            let sq = tape.square(r)?;
            let q = tape.sum_all(sq)?;
            let ls = tape.sum_all(log_sigma)?;
            let ls2 = tape.scale(ls, T::c(2.0))?;
            tape.add(q, ls2)?
        }
    };
    let half = tape.scale(quad, T::c(-0.5))?;
    tape.offset(half, T::c(norm))
}

/// Identity-skip residual block `x + conv(relu(conv(x)))`.
#[derive(Debug, Clone)]
struct ResBlock {
    first: Conv,
    second: Conv,
}

impl ResBlock {
    fn forward<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, bind, x)?;
        let h = tape.relu(h)?;
        let h = self.second.forward(tape, bind, h)?;
        tape.add(x, h)
    }
}

#[derive(Debug, Clone)]
struct BaseHead {
    level: usize,
    channels: usize,
    blocks: Vec<ResBlock>,
    out: Conv,
}

/// Architecture of the encoder: which flow levels consume features and which
/// levels carry latents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLayout {
    pub size: usize,
    pub input_channels: usize,
    pub width: usize,
    pub feature_channels: usize,
    /// Levels (0 = full resolution, `s` = `N / 2^s`) that need features.
    pub feature_levels: Vec<usize>,
    /// `(level, channels)` of every latent with a learned base.
    pub latent_levels: Vec<(usize, usize)>,
    pub residual_blocks: usize,
}

/// Shared convolutional trunk with per-level feature heads and base heads.
#[derive(Debug, Clone)]
pub struct ConditionEncoder {
    layout: EncoderLayout,
    stem: [Conv; 2],
    down: Vec<Conv>,
    heads: Vec<(usize, Conv)>,
    base: Vec<BaseHead>,
}

/// Encoder outputs on a tape.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Indexed by level; `None` for levels without a feature head.
    pub features: Vec<Option<Var>>,
    /// `(mean, clamped log_sigma)` per latent, or `None` for the fixed
    /// standard base.
    pub base: Option<Vec<(Var, Var)>>,
}

impl Encoded {
    pub fn feature(&self, level: usize) -> Option<Var> {
        self.features.get(level).copied().flatten()
    }
}

impl ConditionEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, layout: EncoderLayout, rng: &mut Rng) -> Self {
        let w = layout.width;
        let stem = [
            Conv::new(
                store,
                "cond.stem0",
                layout.input_channels,
                w,
                3,
                1,
                Init::Uniform,
                rng,
            ),
            Conv::new(store, "cond.stem1", w, w, 3, 1, Init::Uniform, rng),
        ];
        let deepest = layout
            .feature_levels
            .iter()
            .copied()
            .chain(layout.latent_levels.iter().map(|l| l.0))
            .max()
            .unwrap_or(0);
        let down = (1..=deepest)
            .map(|s| {
                Conv::new(
                    store,
                    &format!("cond.down{s}"),
                    w,
                    w,
                    3,
                    2,
                    Init::Uniform,
                    rng,
                )
            })
            .collect();
        let heads = layout
            .feature_levels
            .iter()
            .map(|&s| {
                let c = Conv::new(
                    store,
                    &format!("cond.head{s}"),
                    w,
                    layout.feature_channels,
                    3,
                    1,
                    Init::Uniform,
                    rng,
                );
                (s, c)
            })
            .collect();
        let base = layout
            .latent_levels
            .iter()
            .enumerate()
            .map(|(i, &(level, channels))| {
                let name = format!("base.level{i}");
                let blocks = (0..layout.residual_blocks)
                    .map(|b| ResBlock {
                        first: Conv::new(
                            store,
                            &join(&name, &format!("res{b}.a")),
                            w,
                            w,
                            3,
                            1,
                            Init::Uniform,
                            rng,
                        ),
                        second: Conv::new(
                            store,
                            &join(&name, &format!("res{b}.b")),
                            w,
                            w,
                            3,
                            1,
                            Init::Uniform,
                            rng,
                        ),
                    })
                    .collect();
                let out = Conv::new(
                    store,
                    &join(&name, "out"),
                    w,
                    2 * channels,
                    3,
                    1,
                    Init::Zero,
                    rng,
                );
                BaseHead {
                    level,
                    channels,
                    blocks,
                    out,
                }
            })
            .collect();
        ConditionEncoder {
            layout,
            stem,
            down,
            heads,
            base,
        }
    }

    pub fn layout(&self) -> &EncoderLayout {
        &self.layout
    }

    pub fn learned_base(&self) -> bool {
        !self.base.is_empty()
    }

    /// Place the encoder input for `cond` on the tape.
    pub fn input<T: Real>(&self, tape: &mut Tape<T>, cond: &Condition<T>) -> Result<Var> {
        cond.check()?;
        if cond.size() != self.layout.size {
            return Err(Error::ShapeMismatch {
                op: "condition encoder",
                left: cond.sr.shape().to_vec(),
                right: alloc::vec![1, self.layout.size, self.layout.size],
            });
        }
        let sr = tape.constant(cond.sr.clone());
        if self.layout.input_channels == 1 {
            return Ok(sr);
        }
        let t1 = tape.constant(cond.t1.clone());
        let flair = tape.constant(cond.flair.clone());
        tape.concat_channels(&[sr, t1, flair])
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        input: Var,
    ) -> Result<Encoded> {
        let mut f = self.stem[0].forward(tape, bind, input)?;
        f = tape.relu(f)?;
        f = self.stem[1].forward(tape, bind, f)?;
        f = tape.relu(f)?;
        let mut trunk = alloc::vec![f];
        for conv in &self.down {
            let g = conv.forward(tape, bind, f)?;
            f = tape.relu(g)?;
            trunk.push(f);
        }
        let levels = self
            .layout
            .feature_levels
            .iter()
            .copied()
            .max()
            .map_or(0, |m| m + 1);
        let mut features = alloc::vec![None; levels];
        for (level, conv) in &self.heads {
            features[*level] = Some(conv.forward(tape, bind, trunk[*level])?);
        }
        let base = if self.base.is_empty() {
            None
        } else {
            let mut out = Vec::with_capacity(self.base.len());
            let lim = T::c(LOG_SIGMA_LIMIT);
            for head in &self.base {
                let mut h = trunk[head.level];
                for block in &head.blocks {
                    h = block.forward(tape, bind, h)?;
                }
                let o = head.out.forward(tape, bind, h)?;
                let mean = tape.slice_channels(o, 0, head.channels)?;
                let raw = tape.slice_channels(o, head.channels, head.channels)?;
                let log_sigma = tape.clamp(raw, -lim, lim)?;
                out.push((mean, log_sigma));
            }
            Some(out)
        };
        Ok(Encoded { features, base })
    }
}
