//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! addressed through copyable [`Var`] handles; parameters enter the tape via
//! [`Tape::param`] and receive their gradients when [`Tape::backward`] runs.
//! Node ids grow monotonically, so reverse insertion order is a reverse
//! topological order and every node is visited once.
//!
//! A tape is single-use: after `backward` its recorded values are dropped
//! and any further `backward` call fails with [`Error::TapeConsumed`].

mod gradcheck;
pub(crate) mod kernels;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::resample::{self, Resampler};
use crate::scalar::{sum_compensated, Scalar};
use crate::tensor::{Shape, Tensor};
use kernels::ConvGeom;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param { store: u64, id: ParamId },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom, cout: usize },
    Gather { x: usize, map: Arc<Vec<usize>> },
    Resample { x: usize, ry: Arc<Resampler>, rx: Arc<Resampler> },
    Add(usize, usize),
    Sub(usize, usize),
    MulBroadcast { x: usize, s: usize, per_channel: bool },
    Relu(usize),
    Sigmoid(usize),
    Scale(usize, T),
    Concat(usize, usize),
    GlobalAvgPool(usize),
    ChannelMean(usize),
    ChannelMax { x: usize, argmax: Vec<u32> },
    MeanAbs(usize),
    Mean(usize),
    WeightedSum { x: usize, r: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub mod fault {
    //! Deliberate backward-rule corruption used as a negative control for
    //! the gradient-check suite. Scoped to the calling thread.
    use std::cell::Cell;

    thread_local! {
        static CORRUPT_RELU: Cell<bool> = const { Cell::new(false) };
    }

    /// Runs `f` with the relu backward rule scaled by one half.
    pub fn with_corrupted_relu_backward<R>(f: impl FnOnce() -> R) -> R {
        CORRUPT_RELU.with(|c| c.set(true));
        struct Reset;
        impl Drop for Reset {
            fn drop(&mut self) {
                CORRUPT_RELU.with(|c| c.set(false));
            }
        }
        let _reset = Reset;
        f()
    }

    pub(crate) fn relu_corrupted() -> bool {
        CORRUPT_RELU.with(|c| c.get())
    }
}

/// Gradients of leaf variables produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    tape: u64,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with [`Tape::leaf`]; `None` when the loss
    /// does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.leaves.get(&v.id)
    }
}

pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    recording: bool,
    consumed: bool,
    pins: Option<Pins>,
}

/// Branch taken by one non-smooth op (relu mask, max argmax, abs sign).
#[derive(Clone, Debug, PartialEq)]
enum Branch {
    Mask(Vec<bool>),
    Argmax(Vec<u32>),
    Sign(Vec<i8>),
}

/// Branches of every non-smooth op of one forward pass, in execution order.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct ActivationPattern(Vec<Branch>);

enum Pins {
    Record(ActivationPattern),
    Replay { pattern: Arc<ActivationPattern>, cursor: usize },
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, "shape", a, b));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            recording: true,
            consumed: false,
            pins: None,
        }
    }

    /// Remembers the branch of every non-smooth op from now on.
    pub(crate) fn record_pattern(&mut self) {
        self.pins = Some(Pins::Record(ActivationPattern::default()));
    }

    pub(crate) fn take_pattern(&mut self) -> ActivationPattern {
        match self.pins.take() {
            Some(Pins::Record(p)) => p,
            _ => ActivationPattern::default(),
        }
    }

    /// Forces non-smooth ops to take the branches of `pattern`, so the
    /// tape evaluates the smooth piece the pattern was recorded on.
    pub(crate) fn replay_pattern(&mut self, pattern: Arc<ActivationPattern>) {
        self.pins = Some(Pins::Replay { pattern, cursor: 0 });
    }

    /// Records `fresh` or returns the pinned branch at the cursor.
    fn branch(&mut self, op: &'static str, fresh: Branch) -> Result<Branch> {
        match &mut self.pins {
            None => Ok(fresh),
            Some(Pins::Record(p)) => {
                p.0.push(fresh.clone());
                Ok(fresh)
            }
            Some(Pins::Replay { pattern, cursor }) => {
                let b = pattern.0.get(*cursor).cloned();
                *cursor += 1;
                b.ok_or_else(|| Error::invalid(op, "pinned activation pattern is shorter than the graph"))
            }
        }
    }

    /// A tape that evaluates values only; nothing on it requires gradients.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        assert!(!self.consumed, "tape already consumed");
        v.id
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(!self.consumed);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.recording,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Brings a parameter onto the tape. Frozen stores yield constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.value(id).clone();
        let rg = !store.is_frozen();
        self.push(
            value,
            Op::Param {
                store: store.store_id(),
                id,
            },
            rg,
        )
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x), self.idx(w), self.idx(b));
        let xs = self.nodes[xi].value.shape();
        let ws = self.nodes[wi].value.shape();
        let bs = self.nodes[bi].value.shape();
        let (cout, cin, k) = (ws.n, ws.c, ws.h);
        if ws.h != ws.w || k % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel must be square and odd, got {ws}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        if xs.c != cin {
            return Err(Error::shape("conv2d", "input channels", cin, xs.c));
        }
        if bs.numel() != cout {
            return Err(Error::shape("conv2d", "bias length", cout, bs.numel()));
        }
        if xs.h + 2 * padding < k || xs.w + 2 * padding < k {
            return Err(Error::shape("conv2d", "spatial size", format!(">= {k} after padding"), xs));
        }
        let geom = ConvGeom {
            cin,
            h: xs.h,
            w: xs.w,
            k,
            stride,
            pad: padding,
            oh: (xs.h + 2 * padding - k) / stride + 1,
            ow: (xs.w + 2 * padding - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.nodes[xi].value.data(),
            xs.n,
            &geom,
            self.nodes[wi].value.data(),
            self.nodes[bi].value.data(),
            cout,
        );
        let t = Tensor::from_vec(Shape::new(xs.n, cout, geom.oh, geom.ow), out)?;
        let rg = self.needs(&[xi, wi, bi]);
        Ok(self.push(t, Op::Conv2d { x: xi, w: wi, b: bi, geom, cout }, rg))
    }

    fn gather(&mut self, xi: usize, shape: Shape, map: Vec<usize>) -> Result<Var> {
        let t = Tensor::from_vec(shape, kernels::gather(self.nodes[xi].value.data(), &map))?;
        let rg = self.needs(&[xi]);
        Ok(self.push(t, Op::Gather { x: xi, map: Arc::new(map) }, rg))
    }

    /// `(n, c·r², h, w) → (n, c, h·r, w·r)`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let xi = self.idx(x);
        let s = self.nodes[xi].value.shape();
        if r == 0 || s.c % (r * r) != 0 {
            return Err(Error::shape("pixel_shuffle", "channels", format!("multiple of {}", r * r), s.c));
        }
        let out = Shape::new(s.n, s.c / (r * r), s.h * r, s.w * r);
        self.gather(xi, out, kernels::shuffle_map(s, r))
    }

    /// `(n, c, h, w) → (n, c·r², h/r, w/r)`; exact inverse of [`Tape::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let xi = self.idx(x);
        let s = self.nodes[xi].value.shape();
        if r == 0 || s.h % r != 0 {
            return Err(Error::shape("pixel_unshuffle", "height", format!("multiple of {r}"), s.h));
        }
        if s.w % r != 0 {
            return Err(Error::shape("pixel_unshuffle", "width", format!("multiple of {r}"), s.w));
        }
        let out = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
        self.gather(xi, out, kernels::unshuffle_map(s, r))
    }

    /// Nearest-neighbour resize: `out[i, j] = x[⌊i·h/oh⌋, ⌊j·w/ow⌋]`.
    pub fn nearest_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xi = self.idx(x);
        let s = self.nodes[xi].value.shape();
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("nearest_resize", "output size must be at least 1×1"));
        }
        if s.h == 0 || s.w == 0 {
            return Err(Error::EmptyTensor { op: "nearest_resize" });
        }
        if (s.h, s.w) == (out_h, out_w) {
            return Ok(x);
        }
        let out = Shape::new(s.n, s.c, out_h, out_w);
        self.gather(xi, out, kernels::nearest_map(s, out_h, out_w))
    }

    /// Linear Catmull-Rom resize (see [`crate::resample`]); values are not clamped.
    pub fn bicubic_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xi = self.idx(x);
        let s = self.nodes[xi].value.shape();
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bicubic_resize", "output size must be at least 1×1"));
        }
        if s.h == 0 || s.w == 0 {
            return Err(Error::EmptyTensor { op: "bicubic_resize" });
        }
        let ry = Arc::new(Resampler::cubic(s.h, out_h));
        let rx = Arc::new(Resampler::cubic(s.w, out_w));
        let data = resample::apply(self.nodes[xi].value.data(), s, &ry, &rx);
        let t = Tensor::from_vec(Shape::new(s.n, s.c, out_h, out_w), data)?;
        let rg = self.needs(&[xi]);
        Ok(self.push(t, Op::Resample { x: xi, ry, rx }, rg))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Tensor<T>)> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        same_shape(op, av.shape(), bv.shape())?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ai, bi, Tensor::from_vec(av.shape(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, t) = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.needs(&[ai, bi]);
        Ok(self.push(t, Op::Add(ai, bi), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, t) = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.needs(&[ai, bi]);
        Ok(self.push(t, Op::Sub(ai, bi), rg))
    }

    /// `x ⊙ s` where `s` is `(n,c,1,1)` (per-channel) or `(n,1,h,w)` (per-pixel).
    pub fn mul_broadcast(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xi, si) = (self.idx(x), self.idx(s));
        let xs = self.nodes[xi].value.shape();
        let ss = self.nodes[si].value.shape();
        let per_channel = ss == Shape::new(xs.n, xs.c, 1, 1);
        let per_pixel = ss == Shape::new(xs.n, 1, xs.h, xs.w);
        if !per_channel && !per_pixel {
            return Err(Error::shape(
                "mul_broadcast",
                "gate shape",
                format!("{} or {}", Shape::new(xs.n, xs.c, 1, 1), Shape::new(xs.n, 1, xs.h, xs.w)),
                ss,
            ));
        }
        let xd = self.nodes[xi].value.data();
        let sd = self.nodes[si].value.data();
        let plane = xs.plane();
        let mut out = Vec::with_capacity(xs.numel());
        for n in 0..xs.n {
            for c in 0..xs.c {
                let xp = &xd[(n * xs.c + c) * plane..(n * xs.c + c + 1) * plane];
                if per_channel {
                    let g = sd[n * xs.c + c];
                    out.extend(xp.iter().map(|&v| v * g));
                } else {
                    let sp = &sd[n * plane..(n + 1) * plane];
                    out.extend(xp.iter().zip(sp).map(|(&v, &g)| v * g));
                }
            }
        }
        let t = Tensor::from_vec(xs, out)?;
        let rg = self.needs(&[xi, si]);
        Ok(self.push(t, Op::MulBroadcast { x: xi, s: si, per_channel }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let t = if self.pins.is_none() {
            self.nodes[xi].value.map(|v| if v > T::zero() { v } else { T::zero() })
        } else {
            let d = self.nodes[xi].value.data();
            let (fresh, len) = (Branch::Mask(d.iter().map(|&v| v > T::zero()).collect()), d.len());
            let mask = match self.branch("relu", fresh)? {
                Branch::Mask(m) if m.len() == len => m,
                _ => return Err(Error::invalid("relu", "pinned branch does not match")),
            };
            let d = self.nodes[xi].value.data();
            let out = d.iter().zip(&mask).map(|(&v, &on)| if on { v } else { T::zero() }).collect();
            Tensor::from_vec(self.nodes[xi].value.shape(), out)?
        };
        let rg = self.needs(&[xi]);
        Ok(self.push(t, Op::Relu(xi), rg))
    }

    /// Logistic function, kept strictly inside (0, 1).
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let hi = T::one() - T::epsilon() / T::of(2.0);
        let lo = T::min_positive_value();
        let t = self.nodes[xi].value.map(|v| {
            let y = if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            };
            y.max(lo).min(hi)
        });
        let rg = self.needs(&[xi]);
        Ok(self.push(t, Op::Sigmoid(xi), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let xi = self.idx(x);
        let k = T::of(k);
        let t = self.nodes[xi].value.map(|v| v * k);
        let rg = self.needs(&[xi]);
        Ok(self.push(t, Op::Scale(xi, k), rg))
    }

    /// Concatenates along channels, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::shape("concat_channels", "n/h/w", sa, sb));
        }
        let (pa, pb) = (sa.c * sa.plane(), sb.c * sb.plane());
        let mut out = Vec::with_capacity(sa.numel() + sb.numel());
        for n in 0..sa.n {
            out.extend_from_slice(&av.data()[n * pa..(n + 1) * pa]);
            out.extend_from_slice(&bv.data()[n * pb..(n + 1) * pb]);
        }
        let t = Tensor::from_vec(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w), out)?;
        let rg = self.needs(&[ai, bi]);
        Ok(self.push(t, Op::Concat(ai, bi), rg))
    }

    fn nonempty(&self, op: &'static str, xi: usize) -> Result<Shape> {
        let s = self.nodes[xi].value.shape();
        if s.numel() == 0 {
            return Err(Error::EmptyTensor { op });
        }
        Ok(s)
    }

    /// Spatial mean per channel: `(n,c,h,w) → (n,c,1,1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let s = self.nonempty("global_avg_pool", xi)?;
        let inv = T::one() / T::of(s.plane() as f64);
        let out = self.nodes[xi]
            .value
            .data()
            .chunks(s.plane())
            .map(|p| sum_compensated(p.iter().copied()) * inv)
            .collect();
        let t = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), out)?;
        let rg = self.needs(&[xi]);
        Ok(self.push(t, Op::GlobalAvgPool(xi), rg))
    }

    /// Mean over channels: `(n,c,h,w) → (n,1,h,w)`.
    pub fn channel_mean_map(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let s = self.nonempty("channel_mean_map", xi)?;
        let inv = T::one() / T::of(s.c as f64);
        let d = self.nodes[xi].value.data();
        let plane = s.plane();
        let mut out = vec![T::zero(); s.n * plane];
        for n in 0..s.n {
            let o = &mut out[n * plane..(n + 1) * plane];
            for c in 0..s.c {
                let p = &d[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
                o.iter_mut().zip(p).for_each(|(a, &v)| *a = *a + v);
            }
            o.iter_mut().for_each(|a| *a = *a * inv);
        }
        let t = Tensor::from_vec(Shape::new(s.n, 1, s.h, s.w), out)?;
        let rg = self.needs(&[xi]);
        Ok(self.push(t, Op::ChannelMean(xi), rg))
    }

    /// Max over channels: `(n,c,h,w) → (n,1,h,w)`; ties resolve to the first channel.
    pub fn channel_max_map(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let s = self.nonempty("channel_max_map", xi)?;
        let d = self.nodes[xi].value.data();
        let plane = s.plane();
        let mut out = vec![T::zero(); s.n * plane];
        let mut argmax = vec![0u32; s.n * plane];
        for n in 0..s.n {
            for i in 0..plane {
                let mut best = d[(n * s.c) * plane + i];
                let mut at = 0;
                for c in 1..s.c {
                    let v = d[(n * s.c + c) * plane + i];
                    if v > best {
                        best = v;
                        at = c;
                    }
                }
                out[n * plane + i] = best;
                argmax[n * plane + i] = at as u32;
            }
        }
        if self.pins.is_some() {
            let fresh = Branch::Argmax(argmax.clone());
            argmax = match self.branch("channel_max_map", fresh)? {
                Branch::Argmax(a) if a.len() == argmax.len() => a,
                _ => return Err(Error::invalid("channel_max_map", "pinned branch does not match")),
            };
            let d = self.nodes[xi].value.data();
            for n in 0..s.n {
                for i in 0..plane {
                    out[n * plane + i] = d[(n * s.c + argmax[n * plane + i] as usize) * plane + i];
                }
            }
        }
        let t = Tensor::from_vec(Shape::new(s.n, 1, s.h, s.w), out)?;
        let rg = self.needs(&[xi]);
        Ok(self.push(t, Op::ChannelMax { x: xi, argmax }, rg))
    }

    /// `Σ|xᵢ| / count` as a (1,1,1,1) tensor.
    pub fn mean_abs(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let s = self.nonempty("mean_abs", xi)?;
        let sum = if self.pins.is_none() {
            sum_compensated(self.nodes[xi].value.data().iter().map(|v| v.abs()))
        } else {
            let d = self.nodes[xi].value.data();
            let (fresh, len) = (Branch::Sign(d.iter().map(|&v| sign_of(v)).collect()), d.len());
            let signs = match self.branch("mean_abs", fresh)? {
                Branch::Sign(g) if g.len() == len => g,
                _ => return Err(Error::invalid("mean_abs", "pinned branch does not match")),
            };
            let d = self.nodes[xi].value.data();
            sum_compensated(d.iter().zip(&signs).map(|(&v, &g)| v * T::of(g as f64)))
        };
        let t = Tensor::scalar(sum / T::of(s.numel() as f64));
        let rg = self.needs(&[xi]);
        Ok(self.push(t, Op::MeanAbs(xi), rg))
    }

    /// Arithmetic mean of all elements as a (1,1,1,1) tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let s = self.nonempty("mean", xi)?;
        let sum = sum_compensated(self.nodes[xi].value.data().iter().copied());
        let t = Tensor::scalar(sum / T::of(s.numel() as f64));
        let rg = self.needs(&[xi]);
        Ok(self.push(t, Op::Mean(xi), rg))
    }

    /// `Σ xᵢ·rᵢ` against a constant tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, r: &Tensor<T>) -> Result<Var> {
        let xi = self.idx(x);
        same_shape("weighted_sum", r.shape(), self.nodes[xi].value.shape())?;
        let sum = sum_compensated(self.nodes[xi].value.data().iter().zip(r.data()).map(|(&v, &w)| v * w));
        let rg = self.needs(&[xi]);
        Ok(self.push(Tensor::scalar(sum), Op::WeightedSum { x: xi, r: r.clone() }, rg))
    }

    /// Propagates `∂loss/∂·` to every reachable leaf and accumulates parameter
    /// gradients into `store`. Consumes the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if loss.tape != self.id || loss.id >= self.nodes.len() {
            return Err(Error::invalid("backward", "loss belongs to a different tape"));
        }
        let ls = self.nodes[loss.id].value.shape();
        if !ls.is_scalar() {
            return Err(Error::NotScalar(ls.to_string()));
        }
        for node in &self.nodes[..=loss.id] {
            if let Op::Param { store: sid, id } = node.op {
                if node.requires_grad && sid != store.store_id() {
                    return Err(Error::ForeignParameter(format!(
                        "parameter #{} comes from a store other than the one given",
                        id.index()
                    )));
                }
            }
        }
        self.consumed = true;
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        let mut leaves = HashMap::new();

        for i in (0..=loss.id).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    leaves.insert(i, Tensor::from_vec(node.value.shape(), g)?);
                }
                Op::Param { id, .. } => {
                    let p = store.get_mut(*id);
                    let dst = p.grad.data_mut();
                    dst.iter_mut().zip(&g).for_each(|(d, &v)| *d = *d + v);
                }
                op => backprop(&nodes, op, &node.value, &g, &mut grads),
            }
        }
        Ok(Gradients { tape: self.id, leaves })
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, f: impl FnOnce(&mut [T])) {
    if !nodes[i].requires_grad {
        return;
    }
    let buf = grads[i].get_or_insert_with(|| vec![T::zero(); nodes[i].value.len()]);
    f(buf);
}

fn backprop<T: Scalar>(nodes: &[Node<T>], op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    match *op {
        Op::Leaf | Op::Param { .. } => unreachable!("leaves handled by caller"),
        Op::Conv2d { x, w, b, geom, cout } => {
            let xs = nodes[x].value.shape();
            let r = kernels::conv2d_backward(
                nodes[x].value.data(),
                xs.n,
                &geom,
                nodes[w].value.data(),
                cout,
                g,
                nodes[x].requires_grad,
                nodes[w].requires_grad,
                nodes[b].requires_grad,
            );
            for (idx, d) in [(x, r.dx), (w, r.dw), (b, r.db)] {
                if let Some(d) = d {
                    accumulate(nodes, grads, idx, |buf| buf.iter_mut().zip(&d).for_each(|(a, &v)| *a = *a + v));
                }
            }
        }
        Op::Gather { x, ref map } => accumulate(nodes, grads, x, |buf| kernels::scatter_add(g, map, buf)),
        Op::Resample { x, ref ry, ref rx } => {
            let d = resample::apply_transpose(g, nodes[x].value.shape(), ry, rx);
            accumulate(nodes, grads, x, |buf| buf.iter_mut().zip(&d).for_each(|(a, &v)| *a = *a + v));
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, a, |buf| buf.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v));
            accumulate(nodes, grads, b, |buf| buf.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, a, |buf| buf.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v));
            accumulate(nodes, grads, b, |buf| buf.iter_mut().zip(g).for_each(|(d, &v)| *d = *d - v));
        }
        Op::MulBroadcast { x, s, per_channel } => {
            let xs = nodes[x].value.shape();
            let plane = xs.plane();
            let xd = nodes[x].value.data();
            let sd = nodes[s].value.data();
            let gate = |n: usize, c: usize, i: usize| {
                if per_channel {
                    n * xs.c + c
                } else {
                    n * plane + i
                }
            };
            accumulate(nodes, grads, x, |buf| {
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        for i in 0..plane {
                            let k = (n * xs.c + c) * plane + i;
                            buf[k] = buf[k] + g[k] * sd[gate(n, c, i)];
                        }
                    }
                }
            });
            accumulate(nodes, grads, s, |buf| {
                for n in 0..xs.n {
                    for c in 0..xs.c {
                        for i in 0..plane {
                            let k = (n * xs.c + c) * plane + i;
                            let j = gate(n, c, i);
                            buf[j] = buf[j] + g[k] * xd[k];
                        }
                    }
                }
            });
        }
        Op::Relu(x) => {
            let factor = if fault::relu_corrupted() { T::of(0.5) } else { T::one() };
            accumulate(nodes, grads, x, |buf| {
                for ((d, &v), &y) in buf.iter_mut().zip(g).zip(out.data()) {
                    if y > T::zero() {
                        *d = *d + v * factor;
                    }
                }
            });
        }
        Op::Sigmoid(x) => accumulate(nodes, grads, x, |buf| {
            for ((d, &v), &y) in buf.iter_mut().zip(g).zip(out.data()) {
                *d = *d + v * y * (T::one() - y);
            }
        }),
        Op::Scale(x, k) => accumulate(nodes, grads, x, |buf| buf.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * k)),
        Op::Concat(a, b) => {
            let (sa, sb) = (nodes[a].value.shape(), nodes[b].value.shape());
            let (pa, pb) = (sa.c * sa.plane(), sb.c * sb.plane());
            accumulate(nodes, grads, a, |buf| {
                for n in 0..sa.n {
                    let src = &g[n * (pa + pb)..n * (pa + pb) + pa];
                    buf[n * pa..(n + 1) * pa].iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                }
            });
            accumulate(nodes, grads, b, |buf| {
                for n in 0..sb.n {
                    let src = &g[n * (pa + pb) + pa..(n + 1) * (pa + pb)];
                    buf[n * pb..(n + 1) * pb].iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                }
            });
        }
        Op::GlobalAvgPool(x) => {
            let s = nodes[x].value.shape();
            let inv = T::one() / T::of(s.plane() as f64);
            accumulate(nodes, grads, x, |buf| {
                for (k, chunk) in buf.chunks_mut(s.plane()).enumerate() {
                    let gv = g[k] * inv;
                    chunk.iter_mut().for_each(|d| *d = *d + gv);
                }
            });
        }
        Op::ChannelMean(x) => {
            let s = nodes[x].value.shape();
            let inv = T::one() / T::of(s.c as f64);
            let plane = s.plane();
            accumulate(nodes, grads, x, |buf| {
                for n in 0..s.n {
                    for c in 0..s.c {
                        let dst = &mut buf[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
                        let src = &g[n * plane..(n + 1) * plane];
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v * inv);
                    }
                }
            });
        }
        Op::ChannelMax { x, ref argmax } => {
            let s = nodes[x].value.shape();
            let plane = s.plane();
            accumulate(nodes, grads, x, |buf| {
                for n in 0..s.n {
                    for i in 0..plane {
                        let c = argmax[n * plane + i] as usize;
                        let k = (n * s.c + c) * plane + i;
                        buf[k] = buf[k] + g[n * plane + i];
                    }
                }
            });
        }
        Op::MeanAbs(x) => {
            let inv = g[0] / T::of(nodes[x].value.len() as f64);
            accumulate(nodes, grads, x, |buf| {
                for (d, &v) in buf.iter_mut().zip(nodes[x].value.data()) {
                    // sign(0) = 0
                    if v > T::zero() {
                        *d = *d + inv;
                    } else if v < T::zero() {
                        *d = *d - inv;
                    }
                }
            });
        }
        Op::Mean(x) => {
            let inv = g[0] / T::of(nodes[x].value.len() as f64);
            accumulate(nodes, grads, x, |buf| buf.iter_mut().for_each(|d| *d = *d + inv));
        }
        Op::WeightedSum { x, ref r } => {
            let gv = g[0];
            accumulate(nodes, grads, x, |buf| buf.iter_mut().zip(r.data()).for_each(|(d, &w)| *d = *d + gv * w));
        }
    }
}

#[cfg(test)]
mod tests;

/// `sign` with `sign(0) = 0`, matching the `mean_abs` backward rule.
fn sign_of<T: Scalar>(v: T) -> i8 {
    if v > T::zero() {
        1
    } else if v < T::zero() {
        -1
    } else {
        0
    }
}
