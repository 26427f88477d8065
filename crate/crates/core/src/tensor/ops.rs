//! Differentiable tensor operations recorded on the tape.
//!
//! Every op comes with a hand-written adjoint; the contract is only
//! "passes the finite-difference check", enforced by the gradient
//! suite. All ops are deterministic: parallelism is only over
//! independent output planes, each computed in a fixed sequential
//! order.

use rayon::prelude::*;

use super::graph::{Sink, TapeOp, Values, Var};
use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Padding behaviour of [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Out-of-range taps contribute zero.
    Zero,
    /// Out-of-range taps mirror across the edge pixel (reflect-101).
    Reflect,
}

/// Activation kinds accepted by [`activation`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

fn assert_same_graph<T: Scalar>(a: &Var<T>, b: &Var<T>) {
    assert!(
        a.graph().same_graph(b.graph()),
        "vars belong to different graphs"
    );
}

fn assert_same_shape(a: &[usize], b: &[usize], what: &str) {
    assert_eq!(a, b, "{what}: operand shapes differ");
}

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

struct AddOp {
    a: usize,
    b: usize,
}

impl<T: Scalar> TapeOp<T> for AddOp {
    fn backward(&self, vals: &Values<'_, T>, _out: usize, g: &Tensor<T>, sink: &mut Sink<'_, T>) {
        let shape = vals.get(self.a).shape().to_vec();
        sink.accum(self.a, g);
        if let Some(slot) = sink.slot(self.b, &shape) {
            for (s, gv) in slot.iter_mut().zip(g.data()) {
                *s += *gv;
            }
        }
    }
}

pub fn add<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    assert_same_graph(a, b);
    let (va, vb) = (a.value(), b.value());
    assert_same_shape(va.shape(), vb.shape(), "add");
    let out = Tensor::from_fn(va.shape(), |i| va.data()[i] + vb.data()[i]);
    a.graph().push(
        out,
        Box::new(AddOp {
            a: a.idx(),
            b: b.idx(),
        }),
        &[a.idx(), b.idx()],
    )
}

struct SubOp {
    a: usize,
    b: usize,
}

impl<T: Scalar> TapeOp<T> for SubOp {
    fn backward(&self, vals: &Values<'_, T>, _out: usize, g: &Tensor<T>, sink: &mut Sink<'_, T>) {
        sink.accum(self.a, g);
        let shape = vals.get(self.b).shape().to_vec();
        if let Some(slot) = sink.slot(self.b, &shape) {
            for (s, gv) in slot.iter_mut().zip(g.data()) {
                *s += -*gv;
            }
        }
    }
}

pub fn sub<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    assert_same_graph(a, b);
    let (va, vb) = (a.value(), b.value());
    assert_same_shape(va.shape(), vb.shape(), "sub");
    let out = Tensor::from_fn(va.shape(), |i| va.data()[i] - vb.data()[i]);
    a.graph().push(
        out,
        Box::new(SubOp {
            a: a.idx(),
            b: b.idx(),
        }),
        &[a.idx(), b.idx()],
    )
}

struct MulOp {
    a: usize,
    b: usize,
}

impl<T: Scalar> TapeOp<T> for MulOp {
    fn backward(&self, vals: &Values<'_, T>, _out: usize, g: &Tensor<T>, sink: &mut Sink<'_, T>) {
        let (va, vb) = (vals.get(self.a), vals.get(self.b));
        if let Some(slot) = sink.slot(self.a, va.shape()) {
            for ((s, gv), bv) in slot.iter_mut().zip(g.data()).zip(vb.data()) {
                *s += *gv * *bv;
            }
        }
        if let Some(slot) = sink.slot(self.b, vb.shape()) {
            for ((s, gv), av) in slot.iter_mut().zip(g.data()).zip(va.data()) {
                *s += *gv * *av;
            }
        }
    }
}

pub fn mul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    assert_same_graph(a, b);
    let (va, vb) = (a.value(), b.value());
    assert_same_shape(va.shape(), vb.shape(), "mul");
    let out = Tensor::from_fn(va.shape(), |i| va.data()[i] * vb.data()[i]);
    a.graph().push(
        out,
        Box::new(MulOp {
            a: a.idx(),
            b: b.idx(),
        }),
        &[a.idx(), b.idx()],
    )
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

/// Backward closure for ops whose input gradient is `g * factor(x, y)`,
/// where `x` is the input value and `y` the op output.
struct UnaryOp<T> {
    x: usize,
    factor: fn(T, T, &UnaryParams<T>) -> T,
    params: UnaryParams<T>,
}

#[derive(Clone, Copy)]
struct UnaryParams<T> {
    c0: T,
    c1: T,
}

impl<T: Scalar> TapeOp<T> for UnaryOp<T> {
    fn backward(&self, vals: &Values<'_, T>, out: usize, g: &Tensor<T>, sink: &mut Sink<'_, T>) {
        let x = vals.get(self.x);
        let y = vals.get(out);
        if let Some(slot) = sink.slot(self.x, x.shape()) {
            for i in 0..slot.len() {
                slot[i] += g.data()[i] * (self.factor)(x.data()[i], y.data()[i], &self.params);
            }
        }
    }
}

fn unary<T: Scalar>(
    x: &Var<T>,
    fwd: impl Fn(T) -> T,
    factor: fn(T, T, &UnaryParams<T>) -> T,
    params: UnaryParams<T>,
) -> Var<T> {
    let vx = x.value();
    let out = Tensor::from_fn(vx.shape(), |i| fwd(vx.data()[i]));
    x.graph().push(
        out,
        Box::new(UnaryOp {
            x: x.idx(),
            factor,
            params,
        }),
        &[x.idx()],
    )
}

/// Multiplies every element by a constant.
pub fn scale<T: Scalar>(x: &Var<T>, c: f64) -> Var<T> {
    let c = T::from_f64(c);
    unary(
        x,
        |v| v * c,
        |_, _, p| p.c0,
        UnaryParams { c0: c, c1: T::ZERO },
    )
}

/// Adds a constant to every element.
pub fn add_scalar<T: Scalar>(x: &Var<T>, c: f64) -> Var<T> {
    let c = T::from_f64(c);
    unary(
        x,
        |v| v + c,
        |_, _, _| T::ONE,
        UnaryParams {
            c0: T::ZERO,
            c1: T::ZERO,
        },
    )
}

pub fn relu<T: Scalar>(x: &Var<T>) -> Var<T> {
    unary(
        x,
        |v| v.maxv(T::ZERO),
        |xv, _, _| if xv > T::ZERO { T::ONE } else { T::ZERO },
        UnaryParams {
            c0: T::ZERO,
            c1: T::ZERO,
        },
    )
}

pub fn leaky_relu<T: Scalar>(x: &Var<T>, alpha: f64) -> Var<T> {
    let a = T::from_f64(alpha);
    unary(
        x,
        |v| if v > T::ZERO { v } else { a * v },
        |xv, _, p| if xv > T::ZERO { T::ONE } else { p.c0 },
        UnaryParams { c0: a, c1: T::ZERO },
    )
}

pub fn sigmoid<T: Scalar>(x: &Var<T>) -> Var<T> {
    unary(
        x,
        |v| T::ONE / (T::ONE + (-v).exp()),
        |_, yv, _| yv * (T::ONE - yv),
        UnaryParams {
            c0: T::ZERO,
            c1: T::ZERO,
        },
    )
}

/// Elementwise square root; inputs must be strictly positive.
pub fn sqrt<T: Scalar>(x: &Var<T>) -> Var<T> {
    let half = T::from_f64(0.5);
    unary(
        x,
        |v| v.sqrt(),
        |_, yv, p| p.c0 / yv,
        UnaryParams {
            c0: half,
            c1: T::ZERO,
        },
    )
}

/// Elementwise reciprocal; inputs must be nonzero.
pub fn recip<T: Scalar>(x: &Var<T>) -> Var<T> {
    unary(
        x,
        |v| T::ONE / v,
        |_, yv, _| -(yv * yv),
        UnaryParams {
            c0: T::ZERO,
            c1: T::ZERO,
        },
    )
}

/// Clamps to `[lo, hi]`; the gradient is passed through strictly inside
/// the interval and zero outside.
pub fn clamp<T: Scalar>(x: &Var<T>, lo: f64, hi: f64) -> Var<T> {
    let (l, h) = (T::from_f64(lo), T::from_f64(hi));
    unary(
        x,
        |v| v.maxv(l).minv(h),
        |xv, _, p| {
            if xv > p.c0 && xv < p.c1 {
                T::ONE
            } else {
                T::ZERO
            }
        },
        UnaryParams { c0: l, c1: h },
    )
}

/// Dispatches on [`Activation`].
pub fn activation<T: Scalar>(x: &Var<T>, kind: Activation) -> Var<T> {
    match kind {
        Activation::Relu => relu(x),
        Activation::LeakyRelu(a) => leaky_relu(x, a),
        Activation::Sigmoid => sigmoid(x),
    }
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

struct SumAllOp {
    x: usize,
    scale: f64,
}

impl<T: Scalar> TapeOp<T> for SumAllOp {
    fn backward(&self, vals: &Values<'_, T>, _out: usize, g: &Tensor<T>, sink: &mut Sink<'_, T>) {
        let shape = vals.get(self.x).shape().to_vec();
        let gv = g.data()[0] * T::from_f64(self.scale);
        if let Some(slot) = sink.slot(self.x, &shape) {
            for s in slot.iter_mut() {
                *s += gv;
            }
        }
    }
}

/// Sum of all elements, as a `[1]`-shaped node.
pub fn sum_all<T: Scalar>(x: &Var<T>) -> Var<T> {
    let vx = x.value();
    let mut acc = T::ZERO;
    for &v in vx.data() {
        acc += v;
    }
    x.graph().push(
        Tensor::scalar(acc),
        Box::new(SumAllOp {
            x: x.idx(),
            scale: 1.0,
        }),
        &[x.idx()],
    )
}

/// Mean of all elements, as a `[1]`-shaped node.
pub fn mean_all<T: Scalar>(x: &Var<T>) -> Var<T> {
    let vx = x.value();
    let n = vx.len();
    let mut acc = T::ZERO;
    for &v in vx.data() {
        acc += v;
    }
    let mean = acc / T::from_f64(n as f64);
    x.graph().push(
        Tensor::scalar(mean),
        Box::new(SumAllOp {
            x: x.idx(),
            scale: 1.0 / n as f64,
        }),
        &[x.idx()],
    )
}

struct SpatialMeanOp {
    x: usize,
}

impl<T: Scalar> TapeOp<T> for SpatialMeanOp {
    fn backward(&self, vals: &Values<'_, T>, _out: usize, g: &Tensor<T>, sink: &mut Sink<'_, T>) {
        let x = vals.get(self.x);
        let (c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let inv = T::from_f64(1.0 / (h * w) as f64);
        if let Some(slot) = sink.slot(self.x, x.shape()) {
            for c in 0..c_n {
                let gv = g.data()[c] * inv;
                for s in slot[c * h * w..(c + 1) * h * w].iter_mut() {
                    *s += gv;
                }
            }
        }
    }
}

/// Global average pool: `[C, H, W] -> [C, 1, 1]`.
pub fn spatial_mean<T: Scalar>(x: &Var<T>) -> Var<T> {
    let vx = x.value();
    assert_eq!(vx.shape().len(), 3, "spatial_mean expects a rank-3 tensor");
    let (c_n, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let out = Tensor::from_fn(&[c_n, 1, 1], |c| {
        let mut acc = T::ZERO;
        for &v in &vx.data()[c * h * w..(c + 1) * h * w] {
            acc += v;
        }
        acc * inv
    });
    x.graph()
        .push(out, Box::new(SpatialMeanOp { x: x.idx() }), &[x.idx()])
}

// ---------------------------------------------------------------------------
// channel concat / slice / broadcast
// ---------------------------------------------------------------------------

struct ConcatOp {
    parts: Vec<(usize, usize)>, // (node idx, channel count)
    plane: usize,
}

impl<T: Scalar> TapeOp<T> for ConcatOp {
    fn backward(&self, _vals: &Values<'_, T>, _out: usize, g: &Tensor<T>, sink: &mut Sink<'_, T>) {
        let mut offset = 0;
        for &(idx, ch) in &self.parts {
            let n = ch * self.plane;
            let h = g.shape()[1];
            let w = g.shape()[2];
            if let Some(slot) = sink.slot(idx, &[ch, h, w]) {
                for (s, gv) in slot.iter_mut().zip(&g.data()[offset..offset + n]) {
                    *s += *gv;
                }
            }
            offset += n;
        }
    }
}

/// Stacks rank-3 tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Var<T>]) -> Var<T> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let first = parts[0].value();
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let mut data = Vec::new();
    let mut meta = Vec::new();
    let mut parents = Vec::new();
    for p in parts {
        assert_same_graph(parts[0], p);
        let v = p.value();
        assert_eq!(&v.shape()[1..], &[h, w], "concat: spatial shapes differ");
        meta.push((p.idx(), v.shape()[0]));
        parents.push(p.idx());
        data.extend_from_slice(v.data());
    }
    let total_c: usize = meta.iter().map(|&(_, c)| c).sum();
    let out = Tensor::new(&[total_c, h, w], data).expect("concat shape");
    parts[0].graph().push(
        out,
        Box::new(ConcatOp {
            parts: meta,
            plane: h * w,
        }),
        &parents,
    )
}

struct SliceChanOp {
    x: usize,
    from: usize,
}

impl<T: Scalar> TapeOp<T> for SliceChanOp {
    fn backward(&self, vals: &Values<'_, T>, _out: usize, g: &Tensor<T>, sink: &mut Sink<'_, T>) {
        let x = vals.get(self.x);
        let plane = x.shape()[1] * x.shape()[2];
        if let Some(slot) = sink.slot(self.x, x.shape()) {
            let start = self.from * plane;
            for (s, gv) in slot[start..start + g.len()].iter_mut().zip(g.data()) {
                *s += *gv;
            }
        }
    }
}

/// Extracts channels `[from, to)` of a rank-3 tensor.
pub fn slice_channels<T: Scalar>(x: &Var<T>, from: usize, to: usize) -> Var<T> {
    let vx = x.value();
    let (c_n, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
    assert!(from < to && to <= c_n, "slice_channels range out of bounds");
    let plane = h * w;
    let out = Tensor::new(
        &[to - from, h, w],
        vx.data()[from * plane..to * plane].to_vec(),
    )
    .expect("slice shape");
    x.graph().push(
        out,
        Box::new(SliceChanOp { x: x.idx(), from }),
        &[x.idx()],
    )
}

struct MulBcastChanOp {
    x: usize,
    m: usize,
}

impl<T: Scalar> TapeOp<T> for MulBcastChanOp {
    fn backward(&self, vals: &Values<'_, T>, _out: usize, g: &Tensor<T>, sink: &mut Sink<'_, T>) {
        let x = vals.get(self.x);
        let m = vals.get(self.m);
        let (c_n, plane) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
        if let Some(slot) = sink.slot(self.x, x.shape()) {
            for c in 0..c_n {
                for i in 0..plane {
                    slot[c * plane + i] += g.data()[c * plane + i] * m.data()[i];
                }
            }
        }
        if let Some(slot) = sink.slot(self.m, m.shape()) {
            for c in 0..c_n {
                for i in 0..plane {
                    slot[i] += g.data()[c * plane + i] * x.data()[c * plane + i];
                }
            }
        }
    }
}

/// `[C, H, W] * [1, H, W]`, broadcasting the map over channels.
pub fn mul_bcast_chan<T: Scalar>(x: &Var<T>, m: &Var<T>) -> Var<T> {
    assert_same_graph(x, m);
    let vx = x.value();
    let vm = m.value();
    assert_eq!(vm.shape()[0], 1, "broadcast map must have one channel");
    assert_eq!(&vx.shape()[1..], &vm.shape()[1..], "spatial shapes differ");
    let plane = vx.shape()[1] * vx.shape()[2];
    let out = Tensor::from_fn(vx.shape(), |i| vx.data()[i] * vm.data()[i % plane]);
    x.graph().push(
        out,
        Box::new(MulBcastChanOp {
            x: x.idx(),
            m: m.idx(),
        }),
        &[x.idx(), m.idx()],
    )
}

struct MulBcastVecOp {
    x: usize,
    v: usize,
}

impl<T: Scalar> TapeOp<T> for MulBcastVecOp {
    fn backward(&self, vals: &Values<'_, T>, _out: usize, g: &Tensor<T>, sink: &mut Sink<'_, T>) {
        let x = vals.get(self.x);
        let v = vals.get(self.v);
        let (c_n, plane) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
        if let Some(slot) = sink.slot(self.x, x.shape()) {
            for c in 0..c_n {
                let vc = v.data()[c];
                for i in 0..plane {
                    slot[c * plane + i] += g.data()[c * plane + i] * vc;
                }
            }
        }
        if let Some(slot) = sink.slot(self.v, v.shape()) {
            for c in 0..c_n {
                let mut acc = T::ZERO;
                for i in 0..plane {
                    acc += g.data()[c * plane + i] * x.data()[c * plane + i];
                }
                slot[c] += acc;
            }
        }
    }
}

/// `[C, H, W] * [C, 1, 1]`, broadcasting the vector over space.
pub fn mul_bcast_vec<T: Scalar>(x: &Var<T>, v: &Var<T>) -> Var<T> {
    assert_same_graph(x, v);
    let vx = x.value();
    let vv = v.value();
    assert_eq!(vv.shape(), &[vx.shape()[0], 1, 1], "vector shape mismatch");
    let plane = vx.shape()[1] * vx.shape()[2];
    let out = Tensor::from_fn(vx.shape(), |i| vx.data()[i] * vv.data()[i / plane]);
    x.graph().push(
        out,
        Box::new(MulBcastVecOp {
            x: x.idx(),
            v: v.idx(),
        }),
        &[x.idx(), v.idx()],
    )
}

struct AddBcastVecOp {
    x: usize,
    v: usize,
}

impl<T: Scalar> TapeOp<T> for AddBcastVecOp {
    fn backward(&self, vals: &Values<'_, T>, _out: usize, g: &Tensor<T>, sink: &mut Sink<'_, T>) {
        let x = vals.get(self.x);
        let v = vals.get(self.v);
        let (c_n, plane) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
        sink.accum(self.x, g);
        if let Some(slot) = sink.slot(self.v, v.shape()) {
            for c in 0..c_n {
                let mut acc = T::ZERO;
                for i in 0..plane {
                    acc += g.data()[c * plane + i];
                }
                slot[c] += acc;
            }
        }
    }
}

/// `[C, H, W] + [C, 1, 1]`, broadcasting the vector over space.
pub fn add_bcast_vec<T: Scalar>(x: &Var<T>, v: &Var<T>) -> Var<T> {
    assert_same_graph(x, v);
    let vx = x.value();
    let vv = v.value();
    assert_eq!(vv.shape(), &[vx.shape()[0], 1, 1], "vector shape mismatch");
    let plane = vx.shape()[1] * vx.shape()[2];
    let out = Tensor::from_fn(vx.shape(), |i| vx.data()[i] + vv.data()[i / plane]);
    x.graph().push(
        out,
        Box::new(AddBcastVecOp {
            x: x.idx(),
            v: v.idx(),
        }),
        &[x.idx(), v.idx()],
    )
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

#[inline]
fn reflect_idx(i: isize, n: usize) -> usize {
    let n = n as isize;
    let i = if i < 0 { -i } else { i };
    let i = if i >= n { 2 * n - 2 - i } else { i };
    i as usize
}

fn conv2d_shapes<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    if input.shape().len() != 3 || kernel.shape().len() != 4 {
        return Err(Error::Config(format!(
            "conv2d expects input [C,H,W] and kernel [Co,Ci,k,k], got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, kci, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kh != kw || kh % 2 == 0 {
        return Err(Error::Config(format!(
            "conv2d kernel must be square with odd size, got {kh}x{kw}"
        )));
    }
    if kci != ci {
        return Err(Error::Config(format!(
            "conv2d input has {ci} channels but kernel expects {kci}"
        )));
    }
    if bias.shape() != [co] {
        return Err(Error::Config(format!(
            "conv2d bias shape {:?} does not match {co} output channels",
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    let span = h + 2 * padding;
    if span < kh {
        return Err(Error::Config(format!(
            "conv2d kernel {kh} larger than padded input {span}"
        )));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    Ok((ci, h, w, co, kh, oh, ow))
}

/// Plain (non-tape) cross-correlation. `H' = (H + 2·padding − k)/stride + 1`.
pub fn conv2d_plain<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    pad_mode: PadMode,
) -> Result<Tensor<T>> {
    let (ci_n, h, w, co_n, k, oh, ow) = conv2d_shapes(input, kernel, bias, stride, padding)?;
    let mut out = Tensor::zeros(&[co_n, oh, ow]);
    let in_data = input.data();
    let k_data = kernel.data();
    let b_data = bias.data();
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(co, plane)| {
            plane.fill(b_data[co]);
            for ci in 0..ci_n {
                let in_plane = &in_data[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let kw = k_data[((co * ci_n + ci) * k + ky) * k + kx];
                        if kw == T::ZERO {
                            continue;
                        }
                        match pad_mode {
                            PadMode::Zero if stride == 1 => {
                                let sy = ky as isize - padding as isize;
                                let sx = kx as isize - padding as isize;
                                let oy0 = (-sy).max(0) as usize;
                                let oy1 = (oh as isize).min(h as isize - sy).max(0) as usize;
                                for oy in oy0..oy1 {
                                    let iy = (oy as isize + sy) as usize;
                                    let ox0 = (-sx).max(0) as usize;
                                    let ox1 = (ow as isize).min(w as isize - sx).max(0) as usize;
                                    if ox0 >= ox1 {
                                        continue;
                                    }
                                    let dst = &mut plane[oy * ow + ox0..oy * ow + ox1];
                                    let src0 = (ox0 as isize + sx) as usize;
                                    let src = &in_plane[iy * w + src0..iy * w + src0 + (ox1 - ox0)];
                                    for (d, s) in dst.iter_mut().zip(src) {
                                        *d += kw * *s;
                                    }
                                }
                            }
                            _ => {
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    for ox in 0..ow {
                                        let ix = (ox * stride + kx) as isize - padding as isize;
                                        let v = match pad_mode {
                                            PadMode::Zero => {
                                                if iy < 0
                                                    || iy >= h as isize
                                                    || ix < 0
                                                    || ix >= w as isize
                                                {
                                                    continue;
                                                }
                                                in_plane[iy as usize * w + ix as usize]
                                            }
                                            PadMode::Reflect => {
                                                in_plane
                                                    [reflect_idx(iy, h) * w + reflect_idx(ix, w)]
                                            }
                                        };
                                        plane[oy * ow + ox] += kw * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

struct Conv2dOp {
    input: usize,
    kernel: usize,
    bias: usize,
    stride: usize,
    padding: usize,
    pad_mode: PadMode,
}

impl Conv2dOp {
    fn grad_input<T: Scalar>(&self, input: &Tensor<T>, kernel: &Tensor<T>, g: &Tensor<T>, slot: &mut [T]) {
        let (ci_n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (co_n, k) = (kernel.shape()[0], kernel.shape()[2]);
        let (oh, ow) = (g.shape()[1], g.shape()[2]);
        let (stride, padding) = (self.stride, self.padding);
        let k_data = kernel.data();
        let g_data = g.data();
        match self.pad_mode {
            PadMode::Zero => {
                slot.par_chunks_mut(h * w).enumerate().for_each(|(ci, gin)| {
                    for co in 0..co_n {
                        let g_plane = &g_data[co * oh * ow..(co + 1) * oh * ow];
                        for ky in 0..k {
                            for kx in 0..k {
                                let kw = k_data[((co * ci_n + ci) * k + ky) * k + kx];
                                if kw == T::ZERO {
                                    continue;
                                }
                                if stride == 1 {
                                    // gin[iy][ix] += kw * g[iy + p - ky][ix + p - kx]
                                    let sy = padding as isize - ky as isize;
                                    let sx = padding as isize - kx as isize;
                                    let iy0 = (-sy).max(0) as usize;
                                    let iy1 = (h as isize).min(oh as isize - sy).max(0) as usize;
                                    for iy in iy0..iy1 {
                                        let gy = (iy as isize + sy) as usize;
                                        let ix0 = (-sx).max(0) as usize;
                                        let ix1 =
                                            (w as isize).min(ow as isize - sx).max(0) as usize;
                                        if ix0 >= ix1 {
                                            continue;
                                        }
                                        let dst = &mut gin[iy * w + ix0..iy * w + ix1];
                                        let src0 = (ix0 as isize + sx) as usize;
                                        let src =
                                            &g_plane[gy * ow + src0..gy * ow + src0 + (ix1 - ix0)];
                                        for (d, s) in dst.iter_mut().zip(src) {
                                            *d += kw * *s;
                                        }
                                    }
                                } else {
                                    for oy in 0..oh {
                                        let iy =
                                            (oy * stride + ky) as isize - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for ox in 0..ow {
                                            let ix = (ox * stride + kx) as isize
                                                - padding as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            gin[iy as usize * w + ix as usize] +=
                                                kw * g_plane[oy * ow + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            PadMode::Reflect => {
                slot.par_chunks_mut(h * w).enumerate().for_each(|(ci, gin)| {
                    for co in 0..co_n {
                        let g_plane = &g_data[co * oh * ow..(co + 1) * oh * ow];
                        for ky in 0..k {
                            for kx in 0..k {
                                let kw = k_data[((co * ci_n + ci) * k + ky) * k + kx];
                                if kw == T::ZERO {
                                    continue;
                                }
                                for oy in 0..oh {
                                    let iy = reflect_idx(
                                        (oy * stride + ky) as isize - padding as isize,
                                        h,
                                    );
                                    for ox in 0..ow {
                                        let ix = reflect_idx(
                                            (ox * stride + kx) as isize - padding as isize,
                                            w,
                                        );
                                        gin[iy * w + ix] += kw * g_plane[oy * ow + ox];
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
    }

    fn grad_kernel<T: Scalar>(&self, input: &Tensor<T>, kernel: &Tensor<T>, g: &Tensor<T>, slot: &mut [T]) {
        let (ci_n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let k = kernel.shape()[2];
        let (oh, ow) = (g.shape()[1], g.shape()[2]);
        let (stride, padding) = (self.stride, self.padding);
        let in_data = input.data();
        let g_data = g.data();
        let pad_mode = self.pad_mode;
        slot.par_chunks_mut(ci_n * k * k)
            .enumerate()
            .for_each(|(co, gk)| {
                let g_plane = &g_data[co * oh * ow..(co + 1) * oh * ow];
                for ci in 0..ci_n {
                    let in_plane = &in_data[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = T::ZERO;
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let iy = match pad_mode {
                                    PadMode::Zero => {
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        iy as usize
                                    }
                                    PadMode::Reflect => reflect_idx(iy, h),
                                };
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    let ix = match pad_mode {
                                        PadMode::Zero => {
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            ix as usize
                                        }
                                        PadMode::Reflect => reflect_idx(ix, w),
                                    };
                                    acc += g_plane[oy * ow + ox] * in_plane[iy * w + ix];
                                }
                            }
                            gk[(ci * k + ky) * k + kx] += acc;
                        }
                    }
                }
            });
    }
}

impl<T: Scalar> TapeOp<T> for Conv2dOp {
    fn backward(&self, vals: &Values<'_, T>, _out: usize, g: &Tensor<T>, sink: &mut Sink<'_, T>) {
        let input = vals.get(self.input);
        let kernel = vals.get(self.kernel);
        let (oh, ow) = (g.shape()[1], g.shape()[2]);
        if let Some(slot) = sink.slot(self.bias, &[kernel.shape()[0]]) {
            for (co, s) in slot.iter_mut().enumerate() {
                let mut acc = T::ZERO;
                for &gv in &g.data()[co * oh * ow..(co + 1) * oh * ow] {
                    acc += gv;
                }
                *s += acc;
            }
        }
        if sink.needs(self.kernel) {
            if let Some(slot) = sink.slot(self.kernel, kernel.shape()) {
                self.grad_kernel(input, kernel, g, slot);
            }
        }
        if sink.needs(self.input) {
            if let Some(slot) = sink.slot(self.input, input.shape()) {
                self.grad_input(input, kernel, g, slot);
            }
        }
    }
}

/// Differentiable 2-D cross-correlation over `[C, H, W]` tensors.
pub fn conv2d<T: Scalar>(
    input: &Var<T>,
    kernel: &Var<T>,
    bias: &Var<T>,
    stride: usize,
    padding: usize,
    pad_mode: PadMode,
) -> Result<Var<T>> {
    assert_same_graph(input, kernel);
    assert_same_graph(input, bias);
    let out = input.graph().with_value(input.idx(), |vi| {
        input.graph().with_value(kernel.idx(), |vk| {
            input
                .graph()
                .with_value(bias.idx(), |vb| conv2d_plain(vi, vk, vb, stride, padding, pad_mode))
        })
    })?;
    Ok(input.graph().push(
        out,
        Box::new(Conv2dOp {
            input: input.idx(),
            kernel: kernel.idx(),
            bias: bias.idx(),
            stride,
            padding,
            pad_mode,
        }),
        &[input.idx(), kernel.idx(), bias.idx()],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::graph::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Nested-loop reference convolution, deliberately naive.
    fn conv_oracle(
        input: &Tensor<f64>,
        kernel: &Tensor<f64>,
        bias: &Tensor<f64>,
        stride: usize,
        padding: usize,
    ) -> Tensor<f64> {
        let (ci_n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (co_n, k) = (kernel.shape()[0], kernel.shape()[2]);
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let mut out = Tensor::zeros(&[co_n, oh, ow]);
        for co in 0..co_n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[co];
                    for ci in 0..ci_n {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += input.at3(ci, iy as usize, ix as usize)
                                    * kernel.data()[((co * ci_n + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out.data_mut()[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_1x1_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[1, 4, 5], &mut rng);
        let k = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d_plain(&x, &k, &b, 1, 0, PadMode::Zero).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn box_kernel_on_constant_image_with_reflect_padding() {
        let x = Tensor::full(&[1, 5, 5], 0.7f64);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_plain(&x, &k, &b, 1, 1, PadMode::Reflect).unwrap();
        for &v in y.data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 4, 4], &mut rng);
        let k = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let y = conv2d_plain(&x, &k, &b, 1, 1, PadMode::Zero).unwrap();
        let want = conv_oracle(&x, &k, &b, 1, 1);
        assert!(y.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn matches_naive_oracle_stride2_no_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[2, 7, 9], &mut rng);
        let k = rand_tensor(&[2, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[2], &mut rng);
        let y = conv2d_plain(&x, &k, &b, 2, 0, PadMode::Zero).unwrap();
        let want = conv_oracle(&x, &k, &b, 2, 0);
        assert_eq!(y.shape(), &[2, 3, 4]);
        assert!(y.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let k = Tensor::<f64>::zeros(&[3, 5, 3, 3]);
        let b = Tensor::<f64>::zeros(&[3]);
        assert!(matches!(
            conv2d_plain(&x, &k, &b, 1, 1, PadMode::Zero),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn linear_in_input_for_fixed_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[2, 5, 5], &mut rng);
        let y = rand_tensor(&[2, 5, 5], &mut rng);
        let k = rand_tensor(&[2, 2, 3, 3], &mut rng);
        let b = Tensor::zeros(&[2]);
        let (a, c) = (0.7, -1.3);
        let mixed = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + c * y.data()[i]);
        let lhs = conv2d_plain(&mixed, &k, &b, 1, 1, PadMode::Zero).unwrap();
        let cx = conv2d_plain(&x, &k, &b, 1, 1, PadMode::Zero).unwrap();
        let cy = conv2d_plain(&y, &k, &b, 1, 1, PadMode::Zero).unwrap();
        let rhs = Tensor::from_fn(cx.shape(), |i| a * cx.data()[i] + c * cy.data()[i]);
        assert!(lhs.max_abs_diff(&rhs) < 1e-6);
    }

    #[test]
    fn deterministic_across_repeated_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[3, 16, 16], &mut rng);
        let k = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let y1 = conv2d_plain(&x, &k, &b, 1, 1, PadMode::Zero).unwrap();
        let y2 = conv2d_plain(&x, &k, &b, 1, 1, PadMode::Zero).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn activation_known_values() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::new(&[3], vec![-1.0, 0.0, -2.0]).unwrap());
        assert_eq!(relu(&x).value().data(), &[0.0, 0.0, 0.0]);
        let lr = leaky_relu(&x, 0.1).value();
        assert!((lr.data()[0] + 0.1).abs() < 1e-12);
        assert!((lr.data()[2] + 0.2).abs() < 1e-12);
        let s = sigmoid(&g.constant(Tensor::scalar(0.0))).value();
        assert_eq!(s.data()[0], 0.5);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let g: Graph<f64> = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = g.constant(rand_tensor(&[2, 3, 3], &mut rng));
        let b = g.constant(rand_tensor(&[3, 3, 3], &mut rng));
        let cat = concat_channels(&[&a, &b]);
        assert_eq!(cat.shape(), vec![5, 3, 3]);
        let back = slice_channels(&cat, 2, 5);
        assert_eq!(back.value().data(), b.value().data());
    }

    #[test]
    fn broadcast_ops_match_manual_expansion() {
        let g: Graph<f64> = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&[3, 2, 2], &mut rng);
        let m = rand_tensor(&[1, 2, 2], &mut rng);
        let v = rand_tensor(&[3, 1, 1], &mut rng);
        let xv = g.constant(x.clone());
        let mv = g.constant(m.clone());
        let vv = g.constant(v.clone());
        let y = mul_bcast_chan(&xv, &mv).value();
        for c in 0..3 {
            for i in 0..4 {
                assert_eq!(y.data()[c * 4 + i], x.data()[c * 4 + i] * m.data()[i]);
            }
        }
        let z = mul_bcast_vec(&xv, &vv).value();
        for c in 0..3 {
            for i in 0..4 {
                assert_eq!(z.data()[c * 4 + i], x.data()[c * 4 + i] * v.data()[c]);
            }
        }
    }
}
