//! Optical flow and the frame interpolation network.
//!
//! The pipeline estimates bidirectional flow between the two input
//! frames, scales it to the target time, reverses it by weighted
//! forward splatting, and fuses the two backward-warped frames under a
//! learned blending mask. The flow estimator is pluggable: a classical
//! coarse-to-fine Horn-Schunck solver is the default, and `.flo` files
//! can be supplied for pipelines that precompute flow elsewhere.
//!
//! Flow convention: `f(p)` is the displacement such that sampling the
//! *other* frame at `p + f(p)` reconstructs the frame anchored at `p`'s
//! time. Channel 0 is the horizontal component `u`, channel 1 the
//! vertical component `v`, both in pixels.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::imaging::{bicubic_resize_tensor, Frame};
use crate::params::{conv_fwd, init_conv, Bound, Params};
use crate::tensor::graph::{Graph, Sink, TapeOp, Values, Var};
use crate::tensor::{ops, Scalar, Tensor};
use crate::{Error, Result};

/// Dense per-pixel displacement field, stored as a `[2, H, W]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    tensor: Tensor<f32>,
}

impl FlowField {
    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        if tensor.shape().len() != 3 || tensor.shape()[0] != 2 {
            return Err(Error::Shape(format!(
                "flow field must be [2, H, W], got {:?}",
                tensor.shape()
            )));
        }
        if !tensor.all_finite() {
            return Err(Error::Format("flow field contains non-finite values".into()));
        }
        Ok(Self { tensor })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            tensor: Tensor::zeros(&[2, height, width]),
        }
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        let tensor = Tensor::from_fn(&[2, height, width], |i| {
            if i < height * width {
                u
            } else {
                v
            }
        });
        Self { tensor }
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    #[inline]
    pub fn u(&self, y: usize, x: usize) -> f32 {
        self.tensor.at3(0, y, x)
    }

    #[inline]
    pub fn v(&self, y: usize, x: usize) -> f32 {
        self.tensor.at3(1, y, x)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn to_var<T: Scalar>(&self, graph: &Graph<T>) -> Var<T> {
        graph.constant(self.tensor.cast::<T>())
    }

    /// Largest displacement magnitude on either axis.
    pub fn max_component(&self) -> f32 {
        self.tensor.data().iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }
}

/// Per-pixel blend weight `B` in `[1e-3, 1 - 1e-3]`, shape `[1, H, W]`.
#[derive(Debug, Clone)]
pub struct BlendMask {
    tensor: Tensor<f32>,
}

/// Clamp bound keeping the mask strictly inside (0, 1).
pub const MASK_EPS: f32 = 1e-3;

impl BlendMask {
    /// Wraps a `[1, H, W]` tensor, clamping into `[MASK_EPS, 1 - MASK_EPS]`.
    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        if tensor.shape().len() != 3 || tensor.shape()[0] != 1 {
            return Err(Error::Shape(format!(
                "blend mask must be [1, H, W], got {:?}",
                tensor.shape()
            )));
        }
        Ok(Self {
            tensor: tensor.map(|v| v.clamp(MASK_EPS, 1.0 - MASK_EPS)),
        })
    }

    pub fn uniform(height: usize, width: usize, value: f32) -> Self {
        Self::new(Tensor::full(&[1, height, width], value)).expect("shape is valid")
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn to_var<T: Scalar>(&self, graph: &Graph<T>) -> Var<T> {
        graph.constant(self.tensor.cast::<T>())
    }
}

// ---------------------------------------------------------------------------
// .flo files
// ---------------------------------------------------------------------------

const FLO_MAGIC: f32 = 202021.25;

/// Reads a little-endian `.flo` file (magic float 202021.25, i32 width,
/// i32 height, interleaved (u, v) f32 pairs row-major).
pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let magic = f32::from_le_bytes(header[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad flow magic {magic} (expected {FLO_MAGIC})",
            path.display()
        )));
    }
    let width = i32::from_le_bytes(header[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(header[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 || width > 1 << 20 || height > 1 << 20 {
        return Err(Error::Format(format!(
            "{}: implausible flow dimensions {width}x{height}",
            path.display()
        )));
    }
    let (w, h) = (width as usize, height as usize);
    let mut raw = vec![0u8; h * w * 2 * 4];
    file.read_exact(&mut raw).map_err(|e| Error::io(path, e))?;
    let mut tensor = Tensor::zeros(&[2, h, w]);
    for y in 0..h {
        for x in 0..w {
            let off = (y * w + x) * 8;
            let u = f32::from_le_bytes(raw[off..off + 4].try_into().unwrap());
            let v = f32::from_le_bytes(raw[off + 4..off + 8].try_into().unwrap());
            tensor.data_mut()[y * w + x] = u;
            tensor.data_mut()[h * w + y * w + x] = v;
        }
    }
    let bound = h.max(w) as f32;
    if tensor.data().iter().any(|&c| !c.is_finite() || c.abs() > bound) {
        return Err(Error::Format(format!(
            "{}: flow exceeds the sanity bound |u|,|v| <= {bound}",
            path.display()
        )));
    }
    FlowField::new(tensor)
}

/// Writes the `.flo` layout described at [`read_flo`].
pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + flow.height() * flow.width() * 8);
    buf.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    buf.extend_from_slice(&(flow.width() as i32).to_le_bytes());
    buf.extend_from_slice(&(flow.height() as i32).to_le_bytes());
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            buf.extend_from_slice(&flow.u(y, x).to_le_bytes());
            buf.extend_from_slice(&flow.v(y, x).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// flow estimation
// ---------------------------------------------------------------------------

/// Where a single directed flow field comes from.
#[derive(Debug, Clone)]
pub enum FlowSource {
    /// Coarse-to-fine Horn-Schunck on luma.
    Classical,
    /// Load the field from a `.flo` file; resolution must match.
    Precomputed(PathBuf),
}

/// Flow sources for both directions of the interpolation network.
#[derive(Debug, Clone)]
pub struct FinetBackend {
    pub f01: FlowSource,
    pub f10: FlowSource,
}

impl FinetBackend {
    pub fn classical() -> Self {
        Self {
            f01: FlowSource::Classical,
            f10: FlowSource::Classical,
        }
    }
}

const HS_ALPHA: f64 = 15.0;
const HS_ITERS: usize = 100;
const HS_LEVELS: usize = 3;

/// Dense flow from `i0` to `i1` (`i1(p + f(p)) ≈ i0(p)`).
pub fn estimate_flow(i0: &Frame, i1: &Frame, source: &FlowSource) -> Result<FlowField> {
    if i0.tensor().shape() != i1.tensor().shape() {
        return Err(Error::Shape(format!(
            "flow inputs differ: {:?} vs {:?}",
            i0.tensor().shape(),
            i1.tensor().shape()
        )));
    }
    match source {
        FlowSource::Classical => Ok(horn_schunck(i0, i1)),
        FlowSource::Precomputed(path) => {
            let flow = read_flo(path)?;
            if flow.height() != i0.height() || flow.width() != i0.width() {
                return Err(Error::Format(format!(
                    "{}: flow is {}x{} but frames are {}x{}",
                    path.display(),
                    flow.width(),
                    flow.height(),
                    i0.width(),
                    i0.height()
                )));
            }
            Ok(flow)
        }
    }
}

fn luma255(frame: &Frame) -> Tensor<f64> {
    let (h, w) = (frame.height(), frame.width());
    let luma = frame.luma();
    Tensor::from_fn(&[1, h, w], |i| luma[i] * 255.0)
}

#[inline]
fn sample_bilinear_clamped(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let cy = y.clamp(0.0, (h - 1) as f64);
    let cx = x.clamp(0.0, (w - 1) as f64);
    let y0 = cy.floor() as usize;
    let x0 = cx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = cy - y0 as f64;
    let fx = cx - x0 as f64;
    let top = (1.0 - fx) * img[y0 * w + x0] + fx * img[y0 * w + x1];
    let bot = (1.0 - fx) * img[y1 * w + x0] + fx * img[y1 * w + x1];
    (1.0 - fy) * top + fy * bot
}

/// One Horn-Schunck refinement at a fixed pyramid level. The incoming
/// flow acts as the linearization point `w0`; smoothness applies to the
/// full field.
fn hs_refine(l0: &[f64], l1: &[f64], h: usize, w: usize, u: &mut [f64], v: &mut [f64]) {
    let n = h * w;
    // warp l1 by the current flow
    let mut l1w = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            l1w[i] = sample_bilinear_clamped(l1, h, w, y as f64 + v[i], x as f64 + u[i]);
        }
    }
    // derivative estimates; spatial gradients averaged over both frames
    let mut ix = vec![0.0; n];
    let mut iy = vec![0.0; n];
    let mut it = vec![0.0; n];
    let at = |img: &[f64], y: isize, x: isize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        img[y * w + x]
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            ix[i] = 0.25 * (at(l0, y, x + 1) - at(l0, y, x - 1) + at(&l1w, y, x + 1) - at(&l1w, y, x - 1));
            iy[i] = 0.25 * (at(l0, y + 1, x) - at(l0, y - 1, x) + at(&l1w, y + 1, x) - at(&l1w, y - 1, x));
            it[i] = l1w[i] - l0[i];
        }
    }
    let u0: Vec<f64> = u.to_vec();
    let v0: Vec<f64> = v.to_vec();
    let denom: Vec<f64> = (0..n)
        .map(|i| HS_ALPHA * HS_ALPHA + ix[i] * ix[i] + iy[i] * iy[i])
        .collect();

    let mut ubar = vec![0.0; n];
    let mut vbar = vec![0.0; n];
    for _ in 0..HS_ITERS {
        local_average(u, h, w, &mut ubar);
        local_average(v, h, w, &mut vbar);
        for i in 0..n {
            let term = (ix[i] * (ubar[i] - u0[i]) + iy[i] * (vbar[i] - v0[i]) + it[i]) / denom[i];
            u[i] = ubar[i] - ix[i] * term;
            v[i] = vbar[i] - iy[i] * term;
        }
    }
}

/// 3x3 weighted average (1/6 axis, 1/12 diagonal neighbours) with
/// replicated borders.
fn local_average(f: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let at = |y: isize, x: isize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        f[y * w + x]
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[y as usize * w + x as usize] = (at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1)) / 6.0
                + (at(y - 1, x - 1) + at(y - 1, x + 1) + at(y + 1, x - 1) + at(y + 1, x + 1)) / 12.0;
        }
    }
}

fn horn_schunck(i0: &Frame, i1: &Frame) -> FlowField {
    let l0_full = luma255(i0);
    let l1_full = luma255(i1);
    let (h, w) = (i0.height(), i0.width());

    // level sizes, coarsest first
    let mut sizes = Vec::new();
    for level in (0..HS_LEVELS).rev() {
        let f = 1 << level;
        sizes.push(((h / f).max(4), (w / f).max(4)));
    }

    let mut u: Vec<f64> = Vec::new();
    let mut v: Vec<f64> = Vec::new();
    let (mut ph, mut pw) = (0usize, 0usize);
    for &(lh, lw) in &sizes {
        let l0 = bicubic_resize_tensor(&l0_full, lh, lw).expect("pyramid resize");
        let l1 = bicubic_resize_tensor(&l1_full, lh, lw).expect("pyramid resize");
        if u.is_empty() {
            u = vec![0.0; lh * lw];
            v = vec![0.0; lh * lw];
        } else {
            // warm start: resample the coarser flow and rescale magnitudes
            let prev_u = Tensor::new(&[1, ph, pw], u.clone()).expect("flow shape");
            let prev_v = Tensor::new(&[1, ph, pw], v.clone()).expect("flow shape");
            let su = lw as f64 / pw as f64;
            let sv = lh as f64 / ph as f64;
            u = bicubic_resize_tensor(&prev_u, lh, lw)
                .expect("flow resize")
                .into_data()
                .into_iter()
                .map(|x| x * su)
                .collect();
            v = bicubic_resize_tensor(&prev_v, lh, lw)
                .expect("flow resize")
                .into_data()
                .into_iter()
                .map(|x| x * sv)
                .collect();
        }
        hs_refine(l0.data(), l1.data(), lh, lw, &mut u, &mut v);
        ph = lh;
        pw = lw;
    }

    let tensor = Tensor::from_fn(&[2, h, w], |i| {
        if i < h * w {
            u[i] as f32
        } else {
            v[i - h * w] as f32
        }
    });
    FlowField::new(tensor).expect("estimated flow is finite")
}

/// Elementwise multiplication of a flow field by a time factor.
pub fn scale_flow(flow: &FlowField, t: f64) -> FlowField {
    FlowField {
        tensor: flow.tensor.map(|c| c * t as f32),
    }
}

// ---------------------------------------------------------------------------
// flow reversal
// ---------------------------------------------------------------------------

const REVERSAL_SIGMA2: f64 = 0.25; // sigma = 0.5

/// Weighted forward splat without hole filling. Returns the reversed
/// field (zeros at holes) and the per-pixel coverage mask.
pub fn reverse_flow_splat(flow: &FlowField) -> (FlowField, Vec<bool>) {
    let (h, w) = (flow.height(), flow.width());
    let n = h * w;
    let mut num_u = vec![0.0f64; n];
    let mut num_v = vec![0.0f64; n];
    let mut wsum = vec![0.0f64; n];
    for sy in 0..h {
        for sx in 0..w {
            let u = flow.u(sy, sx) as f64;
            let v = flow.v(sy, sx) as f64;
            let dy = sy as f64 + v;
            let dx = sx as f64 + u;
            let ty0 = (dy - 1.0).ceil() as isize;
            let ty1 = (dy + 1.0).floor() as isize;
            let tx0 = (dx - 1.0).ceil() as isize;
            let tx1 = (dx + 1.0).floor() as isize;
            for ty in ty0..=ty1 {
                if ty < 0 || ty >= h as isize {
                    continue;
                }
                for tx in tx0..=tx1 {
                    if tx < 0 || tx >= w as isize {
                        continue;
                    }
                    let d2 = (dy - ty as f64).powi(2) + (dx - tx as f64).powi(2);
                    if d2 > 1.0 {
                        continue;
                    }
                    let wgt = (-d2 / REVERSAL_SIGMA2).exp();
                    let i = ty as usize * w + tx as usize;
                    num_u[i] += wgt * u;
                    num_v[i] += wgt * v;
                    wsum[i] += wgt;
                }
            }
        }
    }
    let mut tensor = Tensor::zeros(&[2, h, w]);
    let mut covered = vec![false; n];
    for i in 0..n {
        if wsum[i] > 0.0 {
            tensor.data_mut()[i] = (-num_u[i] / wsum[i]) as f32;
            tensor.data_mut()[n + i] = (-num_v[i] / wsum[i]) as f32;
            covered[i] = true;
        }
    }
    (FlowField { tensor }, covered)
}

/// Reverses a flow field anchored at the source time into one anchored
/// at the target time: splat each source displacement to its landing
/// pixel with Gaussian weights (radius 1, `σ = 0.5`), negate the
/// weighted average, and fill uncovered pixels by iterative 3×3
/// averaging from covered neighbours.
pub fn reverse_flow(flow: &FlowField) -> FlowField {
    let (mut reversed, mut covered) = reverse_flow_splat(flow);
    let (h, w) = (flow.height(), flow.width());
    let n = h * w;
    loop {
        let holes: Vec<usize> = (0..n).filter(|&i| !covered[i]).collect();
        if holes.is_empty() {
            break;
        }
        let mut fills: Vec<(usize, f32, f32)> = Vec::new();
        for &i in &holes {
            let (y, x) = (i / w, i % w);
            let mut acc_u = 0.0f32;
            let mut acc_v = 0.0f32;
            let mut count = 0usize;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if covered[j] {
                        acc_u += reversed.tensor.data()[j];
                        acc_v += reversed.tensor.data()[n + j];
                        count += 1;
                    }
                }
            }
            if count > 0 {
                fills.push((i, acc_u / count as f32, acc_v / count as f32));
            }
        }
        if fills.is_empty() {
            // fully uncovered field (pathological input): leave zeros
            break;
        }
        for (i, fu, fv) in fills {
            reversed.tensor.data_mut()[i] = fu;
            reversed.tensor.data_mut()[n + i] = fv;
            covered[i] = true;
        }
    }
    reversed
}

// ---------------------------------------------------------------------------
// backward warping
// ---------------------------------------------------------------------------

fn warp_compute<T: Scalar>(x: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let (c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let plane = h * w;
    let mut out = Tensor::zeros(&[c_n, h, w]);
    let x_data = x.data();
    let f_data = flow.data();
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(c, dst)| {
            let src = &x_data[c * plane..(c + 1) * plane];
            for y in 0..h {
                for xx in 0..w {
                    let i = y * w + xx;
                    let sx = (T::from_f64(xx as f64) + f_data[i])
                        .maxv(T::ZERO)
                        .minv(T::from_f64((w - 1) as f64));
                    let sy = (T::from_f64(y as f64) + f_data[plane + i])
                        .maxv(T::ZERO)
                        .minv(T::from_f64((h - 1) as f64));
                    let x0 = sx.floor().to_f64() as usize;
                    let y0 = sy.floor().to_f64() as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let y1 = (y0 + 1).min(h - 1);
                    let fx = sx - T::from_f64(x0 as f64);
                    let fy = sy - T::from_f64(y0 as f64);
                    let top = (T::ONE - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
                    let bot = (T::ONE - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
                    dst[i] = (T::ONE - fy) * top + fy * bot;
                }
            }
        });
    out
}

struct WarpOp {
    x: usize,
    flow: usize,
}

impl<T: Scalar> TapeOp<T> for WarpOp {
    fn backward(&self, vals: &Values<'_, T>, _out: usize, g: &Tensor<T>, sink: &mut Sink<'_, T>) {
        let x = vals.get(self.x);
        let flow = vals.get(self.flow);
        let (c_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let plane = h * w;
        let x_data = x.data();
        let f_data = flow.data();
        let g_data = g.data();

        // sampling geometry per pixel, shared by both adjoints
        let geom = |i: usize| {
            let (y, xx) = (i / w, i % w);
            let rx = T::from_f64(xx as f64) + f_data[i];
            let ry = T::from_f64(y as f64) + f_data[plane + i];
            let sx = rx.maxv(T::ZERO).minv(T::from_f64((w - 1) as f64));
            let sy = ry.maxv(T::ZERO).minv(T::from_f64((h - 1) as f64));
            let x0 = sx.floor().to_f64() as usize;
            let y0 = sy.floor().to_f64() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - T::from_f64(x0 as f64);
            let fy = sy - T::from_f64(y0 as f64);
            let in_x = rx > T::ZERO && rx < T::from_f64((w - 1) as f64);
            let in_y = ry > T::ZERO && ry < T::from_f64((h - 1) as f64);
            (x0, y0, x1, y1, fx, fy, in_x, in_y)
        };

        if sink.needs(self.x) {
            if let Some(slot) = sink.slot(self.x, x.shape()) {
                slot.par_chunks_mut(plane).enumerate().for_each(|(c, gin)| {
                    let g_plane = &g_data[c * plane..(c + 1) * plane];
                    for i in 0..plane {
                        let (x0, y0, x1, y1, fx, fy, _, _) = geom(i);
                        let gv = g_plane[i];
                        gin[y0 * w + x0] += gv * (T::ONE - fy) * (T::ONE - fx);
                        gin[y0 * w + x1] += gv * (T::ONE - fy) * fx;
                        gin[y1 * w + x0] += gv * fy * (T::ONE - fx);
                        gin[y1 * w + x1] += gv * fy * fx;
                    }
                });
            }
        }
        if sink.needs(self.flow) {
            if let Some(slot) = sink.slot(self.flow, flow.shape()) {
                for i in 0..plane {
                    let (x0, y0, x1, y1, fx, fy, in_x, in_y) = geom(i);
                    let mut du = T::ZERO;
                    let mut dv = T::ZERO;
                    for c in 0..c_n {
                        let src = &x_data[c * plane..(c + 1) * plane];
                        let gv = g_data[c * plane + i];
                        if in_x {
                            let d_dx = (T::ONE - fy) * (src[y0 * w + x1] - src[y0 * w + x0])
                                + fy * (src[y1 * w + x1] - src[y1 * w + x0]);
                            du += gv * d_dx;
                        }
                        if in_y {
                            let d_dy = (T::ONE - fx) * (src[y1 * w + x0] - src[y0 * w + x0])
                                + fx * (src[y1 * w + x1] - src[y0 * w + x1]);
                            dv += gv * d_dy;
                        }
                    }
                    slot[i] += du;
                    slot[plane + i] += dv;
                }
            }
        }
    }
}

/// Differentiable backward warp: `out(p) = bilinear(x, p + f(p))` with
/// sampling coordinates clamped to the image rectangle. Differentiable
/// in both the image and the flow.
pub fn warp_var<T: Scalar>(x: &Var<T>, flow: &Var<T>) -> Var<T> {
    assert!(x.graph().same_graph(flow.graph()), "warp across graphs");
    let out = x.graph().with_value(x.idx(), |vx| {
        x.graph().with_value(flow.idx(), |vf| {
            assert_eq!(
                &vx.shape()[1..],
                &vf.shape()[1..],
                "warp: spatial shapes differ"
            );
            assert_eq!(vf.shape()[0], 2, "warp: flow must be [2, H, W]");
            warp_compute(vx, vf)
        })
    });
    x.graph().push(
        out,
        Box::new(WarpOp {
            x: x.idx(),
            flow: flow.idx(),
        }),
        &[x.idx(), flow.idx()],
    )
}

/// Non-tape backward warp of an arbitrary `[C, H, W]` tensor.
pub fn warp_tensor<T: Scalar>(x: &Tensor<T>, flow: &FlowField) -> Tensor<T> {
    warp_compute(x, &flow.tensor.cast::<T>())
}

/// Non-tape backward warp of a frame.
pub fn warp_frame(frame: &Frame, flow: &FlowField) -> Frame {
    Frame::from_clamped(warp_compute(frame.tensor(), flow.tensor())).expect("warp keeps shape")
}

// ---------------------------------------------------------------------------
// blending mask and fusion
// ---------------------------------------------------------------------------

/// Inserts the mask network parameters (3 conv layers over the 10
/// channels of two warped frames and two flows).
pub fn init_finet(params: &mut Params<f32>, rng: &mut rand_chacha::ChaCha8Rng) {
    init_conv(params, "finet.mask.0", 16, 10, 3, rng, false);
    init_conv(params, "finet.mask.1", 16, 16, 3, rng, false);
    // zero-initialized head: the mask starts neutral at 0.5
    init_conv(params, "finet.mask.2", 1, 16, 3, rng, true);
}

/// Mask network on the tape: 3×3 convs (16 channels, leaky ReLU 0.1),
/// sigmoid head, output clamped to `[MASK_EPS, 1 - MASK_EPS]`.
pub fn predict_mask_var<T: Scalar>(
    bound: &Bound<T>,
    w0: &Var<T>,
    w1: &Var<T>,
    ft0: &Var<T>,
    ft1: &Var<T>,
) -> Var<T> {
    let x = ops::concat_channels(&[w0, w1, ft0, ft1]);
    let x = ops::leaky_relu(&conv_fwd(bound, "finet.mask.0", &x, 1), 0.1);
    let x = ops::leaky_relu(&conv_fwd(bound, "finet.mask.1", &x, 1), 0.1);
    let x = ops::sigmoid(&conv_fwd(bound, "finet.mask.2", &x, 1));
    ops::clamp(&x, MASK_EPS as f64, 1.0 - MASK_EPS as f64)
}

/// Non-tape wrapper over [`predict_mask_var`].
pub fn predict_mask(
    w0: &Frame,
    w1: &Frame,
    ft0: &FlowField,
    ft1: &FlowField,
    params: &Params<f32>,
) -> BlendMask {
    let g: Graph<f32> = Graph::new();
    let bound = crate::params::bind(&g, params);
    let mask = predict_mask_var(
        &bound,
        &w0.to_var(&g),
        &w1.to_var(&g),
        &ft0.to_var(&g),
        &ft1.to_var(&g),
    );
    BlendMask::new(mask.value()).expect("mask shape")
}

/// Fusion denominator regularizer.
pub const FUSE_EPS: f64 = 1e-8;

/// Mask-weighted fusion of the two backward-warped frames:
/// `[(1-t)·B·g(I0, ft0) + t·(1-B)·g(I1, ft1)] / [(1-t)·B + t·(1-B) + ε]`.
pub fn fuse_var<T: Scalar>(
    i0: &Var<T>,
    i1: &Var<T>,
    ft0: &Var<T>,
    ft1: &Var<T>,
    mask: &Var<T>,
    t: f64,
) -> Var<T> {
    let w0 = warp_var(i0, ft0);
    let w1 = warp_var(i1, ft1);
    let wa = ops::scale(mask, 1.0 - t);
    let inv_mask = ops::add_scalar(&ops::scale(mask, -1.0), 1.0);
    let wb = ops::scale(&inv_mask, t);
    let num = ops::add(&ops::mul_bcast_chan(&w0, &wa), &ops::mul_bcast_chan(&w1, &wb));
    let den = ops::add_scalar(&ops::add(&wa, &wb), FUSE_EPS);
    ops::mul_bcast_chan(&num, &ops::recip(&den))
}

/// Non-tape fusion returning a frame.
pub fn fuse(
    i0: &Frame,
    i1: &Frame,
    ft0: &FlowField,
    ft1: &FlowField,
    mask: &BlendMask,
    t: f64,
) -> Result<Frame> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Usage(format!("fuse time t={t} outside [0, 1]")));
    }
    let g: Graph<f32> = Graph::new();
    let out = fuse_var(
        &i0.to_var(&g),
        &i1.to_var(&g),
        &ft0.to_var(&g),
        &ft1.to_var(&g),
        &mask.to_var(&g),
        t,
    );
    Frame::from_clamped(out.value())
}

// ---------------------------------------------------------------------------
// frame interpolation network
// ---------------------------------------------------------------------------

/// Tape-level interpolation pass used by training and the full forward.
/// Returns the fused reference frame node plus the reversed flows,
/// which the enhancement network reuses.
pub fn finet_forward_var<T: Scalar>(
    bound: &Bound<T>,
    graph: &Graph<T>,
    i0: &Frame,
    i1: &Frame,
    t: f64,
    backend: &FinetBackend,
) -> Result<(Var<T>, FlowField, FlowField)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Usage(format!("interpolation time t={t} outside [0, 1]")));
    }
    let f01 = estimate_flow(i0, i1, &backend.f01)?;
    let f10 = estimate_flow(i1, i0, &backend.f10)?;
    let ft0 = reverse_flow(&scale_flow(&f01, t));
    let ft1 = reverse_flow(&scale_flow(&f10, 1.0 - t));

    let i0v = i0.to_var(graph);
    let i1v = i1.to_var(graph);
    let ft0v = ft0.to_var(graph);
    let ft1v = ft1.to_var(graph);
    let w0 = warp_var(&i0v, &ft0v);
    let w1 = warp_var(&i1v, &ft1v);
    let mask = predict_mask_var(bound, &w0, &w1, &ft0v, &ft1v);
    let fused = fuse_var(&i0v, &i1v, &ft0v, &ft1v, &mask, t);
    Ok((fused, ft0, ft1))
}

/// Synthesizes the low-resolution reference frame at time `t`.
pub fn finet_forward(
    i0: &Frame,
    i1: &Frame,
    t: f64,
    backend: &FinetBackend,
    params: &Params<f32>,
) -> Result<(Frame, FlowField, FlowField)> {
    let g: Graph<f32> = Graph::new();
    let bound = crate::params::bind(&g, params);
    let (fused, ft0, ft1) = finet_forward_var(&bound, &g, i0, i1, t, backend)?;
    Ok((Frame::from_clamped(fused.value())?, ft0, ft1))
}
