//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation executed through it together with the
//! produced value. Calling [`Tape::backward`] on a scalar node walks the
//! recorded operations in reverse and returns a [`Gradients`] map holding
//! the gradient of every leaf that was registered with `requires_grad`.
//!
//! Operations are coarse-grained (a whole convolution is one node), so a
//! training step for one sample records a few thousand nodes at most.
//!
//! ```
//! use flowlens_core::autodiff::Tape;
//! use flowlens_core::Tensor;
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.variable(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let sq = tape.square(x).unwrap();
//! let loss = tape.sum_all(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```
//!
//! A tape and its tensors belong to one thread. Independent tapes can run
//! on different threads without sharing anything.

mod conv;

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{self, Lu};
use crate::real::Real;
use crate::tensor::Tensor;

use conv::ConvGeom;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(u32);

impl Var {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Elementwise operations exposed through [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Neg,
    Abs,
    Square,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy)]
enum Unary<T> {
    Exp,
    Log,
    Neg,
    Abs,
    Square,
    Sqrt,
    Sigmoid,
    Relu,
    Scale(T),
    Offset(T),
    Powf(T),
    Clamp(T, T),
}

impl<T> Unary<T> {
    fn name(&self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Neg => "neg",
            Unary::Abs => "abs",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Scale(_) => "scale",
            Unary::Offset(_) => "offset",
            Unary::Powf(_) => "powf",
            Unary::Clamp(..) => "clamp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }
}

/// How the right operand of a binary op maps onto the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `[C]` vector over `[C, H, W]`, `plane = H * W`.
    Channel {
        plane: usize,
    },
    /// Single-element right operand.
    Scalar,
}

impl Bcast {
    #[inline(always)]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Channel { plane } => i / plane,
            Bcast::Scalar => 0,
        }
    }

    fn reduce<T: Real>(self, g: Vec<T>, b_len: usize) -> Vec<T> {
        match self {
            Bcast::Same => g,
            _ => {
                let mut out = vec![T::zero(); b_len];
                for (i, v) in g.into_iter().enumerate() {
                    out[self.index(i)] += v;
                }
                out
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Unary {
        x: Var,
        kind: Unary<T>,
    },
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
        bcast: Bcast,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Reduce {
        x: Var,
        kind: ReduceOp,
        /// Output slot of every input element (`Sum`/`Mean`) or the selected
        /// input element of every output slot (`Max`).
        map: Vec<usize>,
        count: usize,
    },
    SliceChannels {
        x: Var,
        offset: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    Reshape {
        x: Var,
    },
    ChannelMix {
        x: Var,
        w: Var,
    },
    LogAbsDet {
        w: Var,
        inv_t: Vec<T>,
    },
    MatInverse {
        w: Var,
    },
    Sandwich {
        x: Var,
        a: Arc<Tensor<T>>,
        b: Arc<Tensor<T>>,
    },
    AvgPool2 {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph in topological (execution) order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    match t.first_non_finite() {
        Some(index) => Err(Error::NonFinite { op, index }),
        None => Ok(()),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = Var(self.nodes.len() as u32);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(value, op, requires_grad))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.index()].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    /// Overwrite the value of a leaf node. Used by data-dependent
    /// initialization before any consumer of the leaf is recorded.
    pub fn set_leaf_value(&mut self, v: Var, value: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[v.index()];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::arg("set_leaf_value", "node is not a leaf"));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_leaf_value",
                left: node.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        node.value = value;
        Ok(())
    }

    // ---- elementwise -------------------------------------------------

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let binary = |kind| {
            b.ok_or_else(|| Error::arg("elementwise", "binary operation needs two operands"))
                .map(|b| (kind, b))
        };
        match op {
            ElementwiseOp::Add => binary(Binary::Add).and_then(|(k, b)| self.binary(k, a, b)),
            ElementwiseOp::Sub => binary(Binary::Sub).and_then(|(k, b)| self.binary(k, a, b)),
            ElementwiseOp::Mul => binary(Binary::Mul).and_then(|(k, b)| self.binary(k, a, b)),
            ElementwiseOp::Div => binary(Binary::Div).and_then(|(k, b)| self.binary(k, a, b)),
            ElementwiseOp::Exp => self.unary(a, Unary::Exp),
            ElementwiseOp::Log => self.unary(a, Unary::Log),
            ElementwiseOp::Neg => self.unary(a, Unary::Neg),
            ElementwiseOp::Abs => self.unary(a, Unary::Abs),
            ElementwiseOp::Square => self.unary(a, Unary::Square),
            ElementwiseOp::Sigmoid => self.unary(a, Unary::Sigmoid),
        }
    }

    fn unary(&mut self, x: Var, kind: Unary<T>) -> Result<Var> {
        let name = kind.name();
        let xv = self.value(x);
        match kind {
            Unary::Log => {
                if let Some(index) = xv.data().iter().position(|&v| !(v > T::zero())) {
                    return Err(Error::Domain { op: name, index });
                }
            }
            Unary::Sqrt | Unary::Powf(_) => {
                if let Some(index) = xv.data().iter().position(|&v| v < T::zero()) {
                    return Err(Error::Domain { op: name, index });
                }
            }
            _ => {}
        }
        let out = xv.map(|v| match kind {
            Unary::Exp => v.exp(),
            Unary::Log => v.ln(),
            Unary::Neg => -v,
            Unary::Abs => v.abs(),
            Unary::Square => v * v,
            Unary::Sqrt => v.sqrt(),
            Unary::Sigmoid => T::one() / (T::one() + (-v).exp()),
            Unary::Relu => v.max(T::zero()),
            Unary::Scale(c) => v * c,
            Unary::Offset(c) => v + c,
            Unary::Powf(p) => v.powf(p),
            Unary::Clamp(lo, hi) => v.max(lo).min(hi),
        });
        let rg = self.requires_grad(x);
        self.push_checked(name, out, Op::Unary { x, kind }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }
    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Neg)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }
    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, Unary::Scale(c))
    }
    pub fn offset(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, Unary::Offset(c))
    }
    /// `x^p` for `x >= 0`.
    pub fn powf(&mut self, x: Var, p: T) -> Result<Var> {
        self.unary(x, Unary::Powf(p))
    }
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = kind.name();
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bcast = if sa == sb {
            Bcast::Same
        } else if sb.iter().product::<usize>() == 1 {
            Bcast::Scalar
        } else if sa.len() == 3 && sb.len() == 1 && sb[0] == sa[0] {
            Bcast::Channel {
                plane: sa[1] * sa[2],
            }
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        };
        let (av, bv) = (self.value(a), self.value(b));
        if kind == Binary::Div {
            if let Some(index) = bv.data().iter().position(|&v| v == T::zero()) {
                return Err(Error::Domain { op: name, index });
            }
        }
        let bd = bv.data();
        let mut out = av.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let r = bd[bcast.index(i)];
            *o = match kind {
                Binary::Add => *o + r,
                Binary::Sub => *o - r,
                Binary::Mul => *o * r,
                Binary::Div => *o / r,
            };
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked(name, out, Op::Binary { a, b, kind, bcast }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    // ---- convolution -------------------------------------------------

    /// Zero-padded 2D convolution of `x: [C_in, H, W]` with
    /// `w: [C_out, C_in, k, k]` and optional bias `[C_out]`.
    ///
    /// The output extent is `(H + 2 pad - k) / stride + 1` rounded down.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (c_in, h, wd) = self.value(x).chw()?;
        let ws = self.shape(w).to_vec();
        let bad = |reason| Error::InvalidShape {
            op: "conv2d",
            shape: ws.clone(),
            reason,
        };
        if ws.len() != 4 || ws[1] != c_in || ws[2] != ws[3] {
            return Err(bad("kernel must be [C_out, C_in, k, k]"));
        }
        if ws[2].is_multiple_of(2) {
            return Err(bad("kernel size must be odd"));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::arg("conv2d", "stride must be 1 or 2"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    left: vec![ws[0]],
                    right: self.shape(b).to_vec(),
                });
            }
        }
        let k = ws[2];
        let (oh, ow) = match (
            ConvGeom::out_extent(h, k, stride, pad),
            ConvGeom::out_extent(wd, k, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::InvalidShape {
                    op: "conv2d",
                    shape: vec![c_in, h, wd],
                    reason: "kernel larger than padded input",
                })
            }
        };
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out: ws[0],
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let out = conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(&[geom.c_out, oh, ow], out)?;
        let rg = self.requires_grad(x)
            || self.requires_grad(w)
            || b.is_some_and(|b| self.requires_grad(b));
        self.push_checked("conv2d", out, Op::Conv2d { x, w, b, geom }, rg)
    }

    // ---- reductions --------------------------------------------------

    /// Reduce over `axes` (all axes when empty). The reduced axes are
    /// removed; reducing everything yields shape `[1]`.
    pub fn reduce(&mut self, kind: ReduceOp, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let name = match kind {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::Max => "max",
        };
        let all: Vec<usize> = (0..shape.len()).collect();
        let axes = if axes.is_empty() { &all[..] } else { axes };
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::arg(name, "axis out of range"));
        }
        let keep: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
        let mut out_shape: Vec<usize> = keep.iter().map(|&a| shape[a]).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out_len: usize = out_shape.iter().product();
        let in_len: usize = shape.iter().product();
        let count = in_len / out_len;
        if count == 0 {
            return Err(Error::arg(name, "empty reduction"));
        }
        // out slot of each input element
        let mut slot = vec![0usize; in_len];
        let mut idx = vec![0usize; shape.len()];
        for s in slot.iter_mut() {
            let mut o = 0;
            for &a in &keep {
                o = o * shape[a] + idx[a];
            }
            *s = o;
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let xd = self.value(x).data();
        let (out, map) = match kind {
            ReduceOp::Sum | ReduceOp::Mean => {
                let mut out = vec![T::zero(); out_len];
                for (i, &s) in slot.iter().enumerate() {
                    out[s] += xd[i];
                }
                if kind == ReduceOp::Mean {
                    let c = T::c(count as f64);
                    out.iter_mut().for_each(|v| *v /= c);
                }
                (out, slot)
            }
            ReduceOp::Max => {
                let mut arg: Vec<Option<usize>> = vec![None; out_len];
                for (i, &s) in slot.iter().enumerate() {
                    match arg[s] {
                        Some(j) if xd[j] >= xd[i] => {}
                        _ => arg[s] = Some(i),
                    }
                }
                let arg: Vec<usize> = arg.into_iter().map(|a| a.unwrap_or(0)).collect();
                (arg.iter().map(|&i| xd[i]).collect(), arg)
            }
        };
        let out = Tensor::new(&out_shape, out)?;
        let rg = self.requires_grad(x);
        self.push_checked(
            name,
            out,
            Op::Reduce {
                x,
                kind,
                map,
                count,
            },
            rg,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, &[])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, &[])
    }

    // ---- structural ----------------------------------------------------

    /// Channels `[offset, offset + len)` of a `[C, ...]` tensor.
    pub fn slice_channels(&mut self, x: Var, offset: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if len == 0 || offset + len > shape[0] {
            return Err(Error::InvalidShape {
                op: "slice_channels",
                shape,
                reason: "channel range out of bounds",
            });
        }
        let plane: usize = shape[1..].iter().product();
        let data = self.value(x).data()[offset * plane..(offset + len) * plane].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::SliceChannels { x, offset }, rg))
    }

    /// Concatenate along the leading (channel) axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::arg("concat", "no inputs"))?,
            )
            .to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: first.clone(),
                    right: s.to_vec(),
                });
            }
            channels += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = channels;
        let out = Tensor::new(&shape, data)?;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// `y[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, shape: &[usize], index: Arc<Vec<usize>>) -> Result<Var> {
        let xd = self.value(x).data();
        if let Some(bad) = index.iter().position(|&i| i >= xd.len()) {
            return Err(Error::Domain {
                op: "gather",
                index: bad,
            });
        }
        let out = Tensor::new(shape, index.iter().map(|&i| xd[i]).collect())?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Gather { x, index }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    /// Multiply every pixel's channel vector by `w: [C, C]`.
    pub fn channel_mix(&mut self, x: Var, w: Var) -> Result<Var> {
        let (c, h, wd) = self.value(x).chw()?;
        if self.shape(w) != [c, c] {
            return Err(Error::ShapeMismatch {
                op: "channel_mix",
                left: vec![c, c],
                right: self.shape(w).to_vec(),
            });
        }
        let p = h * wd;
        let out = linalg::matmul(c, c, p, self.value(w).data(), self.value(x).data());
        let out = Tensor::new(&[c, h, wd], out)?;
        let rg = self.requires_grad(x) || self.requires_grad(w);
        self.push_checked("channel_mix", out, Op::ChannelMix { x, w }, rg)
    }

    fn square_dim(&self, op: &'static str, w: Var) -> Result<usize> {
        match *self.shape(w) {
            [r, c] if r == c => Ok(r),
            _ => Err(Error::InvalidShape {
                op,
                shape: self.shape(w).to_vec(),
                reason: "expected a square matrix",
            }),
        }
    }

    /// `log |det w|` of a square matrix, shape `[1]`.
    pub fn log_abs_det(&mut self, w: Var) -> Result<Var> {
        let n = self.square_dim("log_abs_det", w)?;
        let lu = Lu::new(n, self.value(w).data());
        lu.check_nonsingular()?;
        let inv_t = linalg::transpose(n, &lu.inverse());
        let out = Tensor::scalar(lu.log_abs_det());
        let rg = self.requires_grad(w);
        self.push_checked("log_abs_det", out, Op::LogAbsDet { w, inv_t }, rg)
    }

    pub fn mat_inverse(&mut self, w: Var) -> Result<Var> {
        let n = self.square_dim("mat_inverse", w)?;
        let lu = Lu::new(n, self.value(w).data());
        lu.check_nonsingular()?;
        let out = Tensor::new(&[n, n], lu.inverse())?;
        let rg = self.requires_grad(w);
        self.push_checked("mat_inverse", out, Op::MatInverse { w }, rg)
    }

    /// `a · x · bᵀ` for a 2D `x: [R, C]` (a leading unit axis is allowed)
    /// and constant matrices `a: [P, R]`, `b: [Q, C]`.
    pub fn sandwich(&mut self, x: Var, a: Arc<Tensor<T>>, b: Arc<Tensor<T>>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (r, c) = match *xs.as_slice() {
            [r, c] | [1, r, c] => (r, c),
            _ => {
                return Err(Error::InvalidShape {
                    op: "sandwich",
                    shape: xs,
                    reason: "expected [R, C] or [1, R, C]",
                })
            }
        };
        let (p, q) = (a.shape()[0], b.shape()[0]);
        if a.shape() != [p, r] || b.shape() != [q, c] {
            return Err(Error::ShapeMismatch {
                op: "sandwich",
                left: xs,
                right: vec![p, r, q, c],
            });
        }
        let out = sandwich_apply(&a, self.value(x).data(), &b, r, c);
        let out = Tensor::new(&[p, q], out)?;
        let rg = self.requires_grad(x);
        self.push_checked("sandwich", out, Op::Sandwich { x, a, b }, rg)
    }

    /// 2x2 mean pooling of `[C, H, W]` with even `H`, `W`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                op: "avg_pool2",
                shape: vec![c, h, w],
                reason: "spatial dims must be even",
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let quarter = T::c(0.25);
        let out = Tensor::from_fn(&[c, oh, ow], |i| {
            let (ch, rem) = (i / (oh * ow), i % (oh * ow));
            let (y, xx) = (rem / ow, rem % ow);
            let base = ch * h * w + 2 * y * w + 2 * xx;
            (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]) * quarter
        });
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::AvgPool2 { x }, rg))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_node = &self.nodes[loss.index()];
        if loss_node.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        if !loss_node.requires_grad {
            return Err(Error::DisconnectedLoss);
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.index()] = Some(vec![T::one()]);
        let mut out: Vec<Option<Tensor<T>>> = Vec::new();
        out.resize_with(self.nodes.len(), || None);

        for i in (0..=loss.index()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, &mut grads, &mut out[i])?;
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaf_slot: &mut Option<Tensor<T>>,
    ) -> Result<()> {
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.index()].requires_grad {
                return;
            }
            match &mut grads[v.index()] {
                Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {
                *leaf_slot = Some(Tensor::new(node.value.shape(), g)?);
            }
            Op::Unary { x, kind } => {
                let xd = self.value(*x).data();
                let yd = node.value.data();
                let gx: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let (xv, yv) = (xd[i], yd[i]);
                        match *kind {
                            Unary::Exp => gi * yv,
                            Unary::Log => gi / xv,
                            Unary::Neg => -gi,
                            Unary::Abs => {
                                if xv > T::zero() {
                                    gi
                                } else if xv < T::zero() {
                                    -gi
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Square => gi * (xv + xv),
                            Unary::Sqrt => {
                                if yv > T::zero() {
                                    gi / (yv + yv)
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Sigmoid => gi * yv * (T::one() - yv),
                            Unary::Relu => {
                                if xv > T::zero() {
                                    gi
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Scale(c) => gi * c,
                            Unary::Offset(_) => gi,
                            Unary::Powf(p) => {
                                if xv > T::zero() {
                                    gi * p * xv.powf(p - T::one())
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Clamp(lo, hi) => {
                                if xv >= lo && xv <= hi {
                                    gi
                                } else {
                                    T::zero()
                                }
                            }
                        }
                    })
                    .collect();
                send(*x, gx);
            }
            Op::Binary { a, b, kind, bcast } => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let b_len = bd.len();
                let need_a = self.nodes[a.index()].requires_grad;
                let need_b = self.nodes[b.index()].requires_grad;
                match kind {
                    Binary::Add | Binary::Sub => {
                        if need_b {
                            let mut gb = bcast.reduce(g.clone(), b_len);
                            if *kind == Binary::Sub {
                                gb.iter_mut().for_each(|v| *v = -*v);
                            }
                            send(*b, gb);
                        }
                        if need_a {
                            send(*a, g);
                        }
                    }
                    Binary::Mul => {
                        if need_b {
                            let gb: Vec<T> = g.iter().zip(ad).map(|(&gi, &av)| gi * av).collect();
                            send(*b, bcast.reduce(gb, b_len));
                        }
                        if need_a {
                            let ga = g
                                .iter()
                                .enumerate()
                                .map(|(i, &gi)| gi * bd[bcast.index(i)])
                                .collect();
                            send(*a, ga);
                        }
                    }
                    Binary::Div => {
                        if need_b {
                            let gb: Vec<T> = g
                                .iter()
                                .enumerate()
                                .map(|(i, &gi)| {
                                    let bv = bd[bcast.index(i)];
                                    -gi * ad[i] / (bv * bv)
                                })
                                .collect();
                            send(*b, bcast.reduce(gb, b_len));
                        }
                        if need_a {
                            let ga = g
                                .iter()
                                .enumerate()
                                .map(|(i, &gi)| gi / bd[bcast.index(i)])
                                .collect();
                            send(*a, ga);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                if let Some(b) = b {
                    if self.nodes[b.index()].requires_grad {
                        send(*b, conv::backward_bias(geom, &g));
                    }
                }
                if self.nodes[w.index()].requires_grad {
                    send(*w, conv::backward_kernel(geom, &g, self.value(*x).data()));
                }
                if self.nodes[x.index()].requires_grad {
                    send(*x, conv::backward_input(geom, &g, self.value(*w).data()));
                }
            }
            Op::Reduce {
                x,
                kind,
                map,
                count,
            } => {
                let in_len = self.value(*x).len();
                let gx = match kind {
                    ReduceOp::Sum => map.iter().map(|&s| g[s]).collect(),
                    ReduceOp::Mean => {
                        let c = T::c(*count as f64);
                        map.iter().map(|&s| g[s] / c).collect()
                    }
                    ReduceOp::Max => {
                        let mut gx = vec![T::zero(); in_len];
                        for (o, &i) in map.iter().enumerate() {
                            gx[i] += g[o];
                        }
                        gx
                    }
                };
                send(*x, gx);
            }
            Op::SliceChannels { x, offset } => {
                let xs = self.value(*x);
                let plane: usize = xs.shape()[1..].iter().product();
                let mut gx = vec![T::zero(); xs.len()];
                gx[offset * plane..offset * plane + g.len()].copy_from_slice(&g);
                send(*x, gx);
            }
            Op::Concat { parts } => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    send(p, g[at..at + n].to_vec());
                    at += n;
                }
            }
            Op::Gather { x, index } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (o, &i) in index.iter().enumerate() {
                    gx[i] += g[o];
                }
                send(*x, gx);
            }
            Op::Reshape { x } => send(*x, g),
            Op::ChannelMix { x, w } => {
                let (c, h, wd) = self.value(*x).chw()?;
                let p = h * wd;
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                if self.nodes[w.index()].requires_grad {
                    let mut gw = vec![T::zero(); c * c];
                    for o in 0..c {
                        let go = &g[o * p..(o + 1) * p];
                        for i in 0..c {
                            let xi = &xv[i * p..(i + 1) * p];
                            gw[o * c + i] =
                                go.iter().zip(xi).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        }
                    }
                    send(*w, gw);
                }
                if self.nodes[x.index()].requires_grad {
                    let wt = linalg::transpose(c, wv);
                    send(*x, linalg::matmul(c, c, p, &wt, &g));
                }
            }
            Op::LogAbsDet { w, inv_t } => {
                let g0 = g[0];
                send(*w, inv_t.iter().map(|&v| v * g0).collect());
            }
            Op::MatInverse { w } => {
                let n = node.value.shape()[0];
                let yt = linalg::transpose(n, node.value.data());
                let tmp = linalg::matmul(n, n, n, &yt, &g);
                let gw = linalg::matmul(n, n, n, &tmp, &yt);
                send(*w, gw.into_iter().map(|v| -v).collect());
            }
            Op::Sandwich { x, a, b } => {
                let (p, q) = (a.shape()[0], b.shape()[0]);
                let (r, c) = (a.shape()[1], b.shape()[1]);
                // gx = aᵀ g b
                let mut at = vec![T::zero(); r * p];
                for i in 0..p {
                    for j in 0..r {
                        at[j * p + i] = a.data()[i * r + j];
                    }
                }
                let tmp = linalg::matmul(r, p, q, &at, &g);
                send(*x, linalg::matmul(r, q, c, &tmp, b.data()));
            }
            Op::AvgPool2 { x } => {
                let (c, h, w) = self.value(*x).chw()?;
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![T::zero(); c * h * w];
                let quarter = T::c(0.25);
                for (i, &gi) in g.iter().enumerate() {
                    let (ch, rem) = (i / (oh * ow), i % (oh * ow));
                    let (y, xx) = (rem / ow, rem % ow);
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    let v = gi * quarter;
                    gx[base] += v;
                    gx[base + 1] += v;
                    gx[base + w] += v;
                    gx[base + w + 1] += v;
                }
                send(*x, gx);
            }
        }
        Ok(())
    }
}

/// `a x bᵀ` with `a: [P, R]`, `x: [R, C]`, `b: [Q, C]`.
fn sandwich_apply<T: Real>(a: &Tensor<T>, x: &[T], b: &Tensor<T>, r: usize, c: usize) -> Vec<T> {
    let (p, q) = (a.shape()[0], b.shape()[0]);
    let mut bt = vec![T::zero(); c * q];
    for i in 0..q {
        for j in 0..c {
            bt[j * q + i] = b.data()[i * c + j];
        }
    }
    let xb = linalg::matmul(r, c, q, x, &bt);
    linalg::matmul(p, r, q, a.data(), &xb)
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.index()).and_then(|g| g.take())
    }
}
