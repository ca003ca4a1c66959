//! Convolution layers and scale/shift networks used inside flow steps and
//! the condition encoder.

use alloc::format;
use alloc::string::String;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{Binding, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform,
    Zero,
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = 1.0 / num_traits::Float::sqrt(fan_in);
        let shape = [c_out, c_in, k, k];
        let (w, b) = match init {
            Init::Uniform => (
                rng.uniform_tensor(&shape, -bound, bound),
                rng.uniform_tensor(&[c_out], -bound, bound),
            ),
            Init::Zero => (Tensor::zeros(&shape), Tensor::zeros(&[c_out])),
        };
        Conv {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            c_in,
            c_out,
            k,
            stride,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        tape.conv2d(
            x,
            bind.var(self.weight),
            Some(bind.var(self.bias)),
            self.stride,
            (self.k - 1) / 2,
        )
    }
}

/// Two same-padding 3x3 convolutions with a ReLU between them. The second
/// convolution starts at zero, so the produced `(raw_scale, shift)` pair is
/// zero at initialization.
#[derive(Debug, Clone)]
pub struct ScaleShiftNet {
    pub hidden: Conv,
    pub out: Conv,
    pub channels: usize,
}

impl ScaleShiftNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        width: usize,
        channels: usize,
        rng: &mut Rng,
    ) -> Self {
        let hidden = Conv::new(
            store,
            &join(name, "hidden"),
            c_in,
            width,
            3,
            1,
            Init::Uniform,
            rng,
        );
        let out = Conv::new(
            store,
            &join(name, "out"),
            width,
            2 * channels,
            3,
            1,
            Init::Zero,
            rng,
        );
        ScaleShiftNet {
            hidden,
            out,
            channels,
        }
    }

    /// Returns `(raw_scale, shift)`, each with `channels` channels.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        input: Var,
    ) -> Result<(Var, Var)> {
        let h = self.hidden.forward(tape, bind, input)?;
        let h = tape.relu(h)?;
        let o = self.out.forward(tape, bind, h)?;
        let raw = tape.slice_channels(o, 0, self.channels)?;
        let shift = tape.slice_channels(o, self.channels, self.channels)?;
        Ok((raw, shift))
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}
