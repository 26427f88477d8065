//! Image I/O, bicubic resampling and the PSNR/SSIM metrics.
//!
//! Frames are `[3, H, W]` tensors with values in `[0, 1]`. Resampling
//! uses the Catmull-Rom cubic kernel (`a = -0.5`) with half-pixel
//! centered coordinates and clamped edge taps; the choice is frozen so
//! every numeric oracle in the tests stays stable.

use std::path::Path;

use rayon::prelude::*;

use crate::tensor::graph::{Sink, TapeOp, Values, Var};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// An H×W×3 image with values in `[0, 1]`, stored as a `[3, H, W]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    tensor: Tensor<f32>,
}

impl Frame {
    /// Wraps a `[3, H, W]` tensor, validating the `[0, 1]` range.
    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        if tensor.shape().len() != 3 || tensor.shape()[0] != 3 {
            return Err(Error::Shape(format!(
                "frame must be [3, H, W], got {:?}",
                tensor.shape()
            )));
        }
        if tensor.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Usage("frame values must lie in [0, 1]".into()));
        }
        Ok(Self { tensor })
    }

    /// Wraps a `[3, H, W]` tensor, clamping values into `[0, 1]`.
    pub fn from_clamped(tensor: Tensor<f32>) -> Result<Self> {
        if tensor.shape().len() != 3 || tensor.shape()[0] != 3 {
            return Err(Error::Shape(format!(
                "frame must be [3, H, W], got {:?}",
                tensor.shape()
            )));
        }
        Ok(Self {
            tensor: tensor.map(|v| v.clamp(0.0, 1.0)),
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let tensor = Tensor::from_fn(&[3, height, width], |i| {
            let c = i / (height * width);
            let y = (i / width) % height;
            let x = i % width;
            f(c, y, x).clamp(0.0, 1.0)
        });
        Self { tensor }
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.tensor
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.tensor.at3(c, y, x)
    }

    /// Lifts the frame onto a graph as a constant, converting dtype.
    pub fn to_var<T: Scalar>(&self, graph: &crate::tensor::graph::Graph<T>) -> Var<T> {
        graph.constant(self.tensor.cast::<T>())
    }

    /// Per-pixel luma (ITU BT.601 weights), `[H, W]` row-major in f64.
    pub fn luma(&self) -> Vec<f64> {
        let (h, w) = (self.height(), self.width());
        let d = self.tensor.data();
        let plane = h * w;
        (0..plane)
            .map(|i| {
                0.299 * d[i] as f64 + 0.587 * d[plane + i] as f64 + 0.114 * d[2 * plane + i] as f64
            })
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Frame) -> f64 {
        self.tensor.max_abs_diff(&other.tensor)
    }
}

// ---------------------------------------------------------------------------
// image files
// ---------------------------------------------------------------------------

/// Reads an 8-bit RGB image; byte `b` maps to `b / 255`.
pub fn read_image(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let tensor = Tensor::from_fn(&[3, h, w], |i| {
        let c = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        raw[(y * w + x) * 3 + c] as f32 / 255.0
    });
    Frame::new(tensor)
}

/// Writes an 8-bit RGB image; value `v` maps to `round(v * 255)`.
/// The frame invariant guarantees values in `[0, 1]`.
pub fn write_image(frame: &Frame, path: &Path) -> Result<()> {
    let (h, w) = (frame.height(), frame.width());
    let mut raw = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                raw[(y * w + x) * 3 + c] = (frame.at(c, y, x) * 255.0).round() as u8;
            }
        }
    }
    image::save_buffer(path, &raw, w as u32, h as u32, image::ColorType::Rgb8).map_err(
        |source| Error::Image {
            path: path.to_path_buf(),
            source,
        },
    )
}

// ---------------------------------------------------------------------------
// bicubic resampling
// ---------------------------------------------------------------------------

/// Catmull-Rom cubic kernel, `a = -0.5`.
#[inline]
pub fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        A * (((t - 5.0) * t + 8.0) * t - 4.0)
    } else {
        0.0
    }
}

/// Four taps (clamped indices + weights) per output coordinate along
/// one axis. Source coordinate of output `i` is `(i+0.5)·n_in/n_out − 0.5`.
fn cubic_taps(n_in: usize, n_out: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..n_out)
        .map(|i| {
            let src = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut w = [0f64; 4];
            for (j, (ij, wj)) in idx.iter_mut().zip(w.iter_mut()).enumerate() {
                let tap = base as isize + j as isize - 1;
                *ij = tap.clamp(0, n_in as isize - 1) as usize;
                *wj = cubic_weight(frac - (j as f64 - 1.0));
            }
            (idx, w)
        })
        .collect()
}

/// Separable Catmull-Rom resize of a `[C, H, W]` tensor.
pub fn bicubic_resize_tensor<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if input.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "bicubic_resize expects [C, H, W], got {:?}",
            input.shape()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Usage("bicubic_resize target must be >= 1".into()));
    }
    let (c_n, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let ty = cubic_taps(h, out_h);
    let tx = cubic_taps(w, out_w);
    let mut out = Tensor::zeros(&[c_n, out_h, out_w]);
    let in_data = input.data();
    out.data_mut()
        .par_chunks_mut(out_h * out_w)
        .enumerate()
        .for_each(|(c, plane)| {
            let src = &in_data[c * h * w..(c + 1) * h * w];
            for (oy, (yi, yw)) in ty.iter().enumerate() {
                for (ox, (xi, xw)) in tx.iter().enumerate() {
                    let mut acc = T::ZERO;
                    for jy in 0..4 {
                        let row = yi[jy] * w;
                        let wy = yw[jy];
                        for jx in 0..4 {
                            acc += T::from_f64(wy * xw[jx]) * src[row + xi[jx]];
                        }
                    }
                    plane[oy * out_w + ox] = acc;
                }
            }
        });
    Ok(out)
}

/// Bicubic resize of a frame; the result is clamped back into `[0, 1]`
/// (cubic kernels overshoot near edges).
pub fn bicubic_resize(frame: &Frame, out_h: usize, out_w: usize) -> Result<Frame> {
    Frame::from_clamped(bicubic_resize_tensor(frame.tensor(), out_h, out_w)?)
}

struct BicubicOp {
    x: usize,
    out_h: usize,
    out_w: usize,
}

impl<T: Scalar> TapeOp<T> for BicubicOp {
    fn backward(&self, vals: &Values<'_, T>, _out: usize, g: &Tensor<T>, sink: &mut Sink<'_, T>) {
        let x = vals.get(self.x);
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let ty = cubic_taps(h, self.out_h);
        let tx = cubic_taps(w, self.out_w);
        let (oh, ow) = (self.out_h, self.out_w);
        let g_data = g.data();
        if let Some(slot) = sink.slot(self.x, x.shape()) {
            slot.par_chunks_mut(h * w).enumerate().for_each(|(c, gin)| {
                let g_plane = &g_data[c * oh * ow..(c + 1) * oh * ow];
                for (oy, (yi, yw)) in ty.iter().enumerate() {
                    for (ox, (xi, xw)) in tx.iter().enumerate() {
                        let gv = g_plane[oy * ow + ox];
                        for jy in 0..4 {
                            let row = yi[jy] * w;
                            let wy = yw[jy];
                            for jx in 0..4 {
                                gin[row + xi[jx]] += T::from_f64(wy * xw[jx]) * gv;
                            }
                        }
                    }
                }
            });
        }
    }
}

/// Differentiable bicubic resize (the reconstruction network's global
/// residual path).
pub fn bicubic_resize_var<T: Scalar>(x: &Var<T>, out_h: usize, out_w: usize) -> Result<Var<T>> {
    let out = x
        .graph()
        .with_value(x.idx(), |t| bicubic_resize_tensor(t, out_h, out_w))?;
    Ok(x.graph().push(
        out,
        Box::new(BicubicOp {
            x: x.idx(),
            out_h,
            out_w,
        }),
        &[x.idx()],
    ))
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

/// PSNR in dB with peak 1.0, averaged over all RGB elements.
/// Capped at 99.0 when MSE falls below 1e-10.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::Usage(format!(
            "psnr shapes differ: {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.tensor().data().iter().zip(b.tensor().data()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    let mse = acc / a.tensor().len() as f64;
    if mse < 1e-10 {
        Ok(99.0)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

fn filter_valid(img: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    // separable Gaussian, valid region only
    let vh = h - SSIM_WINDOW + 1;
    let vw = w - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * vw];
    for y in 0..h {
        for x in 0..vw {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * img[y * w + x + k];
            }
            rows[y * vw + x] = acc;
        }
    }
    let mut out = vec![0.0; vh * vw];
    for y in 0..vh {
        for x in 0..vw {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * rows[(y + k) * vw + x];
            }
            out[y * vw + x] = acc;
        }
    }
    out
}

/// Mean local SSIM over the luma channel: Gaussian 11×11 window with
/// `σ = 1.5`, `K1 = 0.01`, `K2 = 0.03`, dynamic range 1.0.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::Usage(format!(
            "ssim shapes differ: {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Usage(format!(
            "ssim needs min(H, W) >= {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let la = a.luma();
    let lb = b.luma();
    let la2: Vec<f64> = la.iter().map(|v| v * v).collect();
    let lb2: Vec<f64> = lb.iter().map(|v| v * v).collect();
    let lab: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x * y).collect();

    let win = gaussian_window();
    let mu_a = filter_valid(&la, h, w, &win);
    let mu_b = filter_valid(&lb, h, w, &win);
    let e_a2 = filter_valid(&la2, h, w, &win);
    let e_b2 = filter_valid(&lb2, h, w, &win);
    let e_ab = filter_valid(&lab, h, w, &win);

    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut acc = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_a2[i] - ma * ma;
        let vb = e_b2[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(acc / mu_a.len() as f64)
}
