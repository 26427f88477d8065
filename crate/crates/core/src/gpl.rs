//! Generalized pixelshuffle: arbitrary-scale feature upsampling.
//!
//! The standard pixelshuffle ([`spl`]) rearranges `s²·C_out` channels at
//! `H×W` into `C_out` channels at `sH×sW` and only works for integer
//! `s`. The generalized layer ([`gpl_sample`]) instead projects every
//! output position onto the intermediate feature maps, then samples the
//! *channel axis* at a real-valued position `p_c + Δp_c` with linear
//! interpolation. `p_c` follows a fixed centered schedule and `Δp_c` is
//! predicted per output position by a small fully connected network fed
//! `(frac_i, frac_j, 1/s)`, so fractional scales become possible and
//! sub-cell positions become distinguishable.
//!
//! With `C_inter = s²·C_out`, zero offsets and the pixelshuffle channel
//! index as `p_c`, the generalized layer degenerates to the standard
//! one exactly; the acceptance suite checks this elementwise.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::params::{Bound, Params};
use crate::tensor::graph::{Sink, TapeOp, Values, Var};
use crate::tensor::{ops, Scalar, Tensor};
use crate::{Error, Result};

/// Channel layout of the generalized pixelshuffle head.
#[derive(Debug, Clone, PartialEq)]
pub struct GplConfig {
    pub c_in: usize,
    pub c_inter: usize,
    pub c_out: usize,
    /// Hidden width of the offset network.
    pub hidden: usize,
    /// When false the layer runs with `Δp_c ≡ 0` (the FG ablation);
    /// offset parameters stay allocated but untouched.
    pub offsets_enabled: bool,
}

impl Default for GplConfig {
    fn default() -> Self {
        // C_inter = 5·C_in with C_in = C_out = 64
        Self {
            c_in: 64,
            c_inter: 320,
            c_out: 64,
            hidden: 64,
            offsets_enabled: true,
        }
    }
}

impl GplConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_inter == 0 || self.c_out == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "gpl channel counts and hidden width must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Projects an output pixel onto the intermediate feature maps:
/// `(i, j) -> (i/s, j/s)`.
pub fn project_location(i: usize, j: usize, s: f64) -> (f64, f64) {
    debug_assert!(s > 0.0);
    (i as f64 / s, j as f64 / s)
}

/// Centered channel schedule: `p_c = c·(C_inter/C_out) + (C_inter/C_out − 1)/2`.
pub fn centered_channel_position(c: usize, c_inter: usize, c_out: usize) -> f64 {
    let ratio = c_inter as f64 / c_out as f64;
    c as f64 * ratio + (ratio - 1.0) / 2.0
}

/// Pixelshuffle channel index for output `(i, j, c)` at integer scale
/// `s`: `C_out·s·mod(i,s) + C_out·mod(j,s) + c`. Bijective over the
/// `s²·C_out` intermediate channels.
pub fn spl_channel_index(i: usize, j: usize, c: usize, s: usize, c_out: usize) -> usize {
    c_out * s * (i % s) + c_out * (j % s) + c
}

/// Standard pixelshuffle: `[s²·C_out, H, W] -> [C_out, sH, sW]`.
pub fn spl<T: Scalar>(t: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    if t.shape().len() != 3 {
        return Err(Error::Shape(format!("spl expects [C, H, W], got {:?}", t.shape())));
    }
    if s == 0 {
        return Err(Error::Usage("spl scale must be >= 1".into()));
    }
    let (c_n, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if c_n % (s * s) != 0 {
        return Err(Error::Usage(format!(
            "spl channel count {c_n} is not divisible by s^2 = {}",
            s * s
        )));
    }
    let c_out = c_n / (s * s);
    let (oh, ow) = (s * h, s * w);
    let out = Tensor::from_fn(&[c_out, oh, ow], |idx| {
        let c = idx / (oh * ow);
        let i = (idx / ow) % oh;
        let j = idx % ow;
        t.at3(spl_channel_index(i, j, c, s, c_out), i / s, j / s)
    });
    Ok(out)
}

/// Linear interpolation along the channel axis:
/// `Σ_k max(0, 1 − |q − k|) · T[k, yi, xj]`, zero outside `[-1, C]`.
pub fn channel_interp<T: Scalar>(t: &Tensor<T>, yi: usize, xj: usize, q: f64) -> T {
    let (c_n, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    assert!(yi < h && xj < w, "channel_interp cell out of bounds");
    interp_at(t.data(), c_n, h * w, yi * w + xj, T::from_f64(q))
}

#[inline]
fn interp_at<T: Scalar>(data: &[T], c_n: usize, plane: usize, pix: usize, q: T) -> T {
    let qf = q.to_f64();
    if !(-1.0..=c_n as f64).contains(&qf) {
        return T::ZERO;
    }
    let k0 = qf.floor() as isize;
    let mut acc = T::ZERO;
    for k in [k0, k0 + 1] {
        if k < 0 || k >= c_n as isize {
            continue;
        }
        let wgt = T::ONE - (q - T::from_f64(k as f64)).abs();
        if wgt > T::ZERO {
            acc += wgt * data[k as usize * plane + pix];
        }
    }
    acc
}

/// Derivative of [`interp_at`] w.r.t. `q`, using the floor/frac
/// decomposition: on `[k0, k0+1)` the value is
/// `(1-f)·T[k0] + f·T[k0+1]`, so the slope is `T[k0+1] - T[k0]`. The
/// one-sided choice at the kinks keeps the zero-initialized offset
/// network trainable (the symmetric subgradient at the apex is zero,
/// which would freeze it permanently).
#[inline]
fn interp_dq<T: Scalar>(data: &[T], c_n: usize, plane: usize, pix: usize, q: T) -> T {
    let qf = q.to_f64();
    if !(-1.0..=c_n as f64).contains(&qf) {
        return T::ZERO;
    }
    let k0 = qf.floor() as isize;
    let at = |k: isize| -> T {
        if k < 0 || k >= c_n as isize {
            T::ZERO
        } else {
            data[k as usize * plane + pix]
        }
    };
    at(k0 + 1) - at(k0)
}

/// Two-layer offset predictor `(frac_i, frac_j, 1/s) -> Δp ∈ R^{C_out}`,
/// ReLU between the affine layers. The final layer is zero-initialized
/// so offsets start at exactly zero.
#[derive(Debug, Clone)]
pub struct OffsetNet<T: Scalar> {
    pub w1: Tensor<T>, // [hidden, 3]
    pub b1: Tensor<T>, // [hidden]
    pub w2: Tensor<T>, // [c_out, hidden]
    pub b2: Tensor<T>, // [c_out]
}

impl OffsetNet<f32> {
    pub fn init(c_out: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (1.0f64 / 3.0).sqrt();
        Self {
            w1: Tensor::from_fn(&[hidden, 3], |_| rng.gen_range(-limit..limit) as f32),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[c_out, hidden]),
            b2: Tensor::zeros(&[c_out]),
        }
    }
}

impl<T: Scalar> OffsetNet<T> {
    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.w2.shape()[0]
    }

    /// Evaluates the offset vector for one `(frac_i, frac_j, 1/s)` input.
    pub fn eval(&self, frac_i: T, frac_j: T, inv_s: T) -> Vec<T> {
        eval_offsets(
            self.w1.data(),
            self.b1.data(),
            self.w2.data(),
            self.b2.data(),
            self.hidden(),
            self.c_out(),
            [frac_i, frac_j, inv_s],
        )
    }

    pub fn cast<U: Scalar>(&self) -> OffsetNet<U> {
        OffsetNet {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }
}

fn eval_offsets<T: Scalar>(
    w1: &[T],
    b1: &[T],
    w2: &[T],
    b2: &[T],
    hidden: usize,
    c_out: usize,
    x: [T; 3],
) -> Vec<T> {
    let mut h = vec![T::ZERO; hidden];
    for (k, hk) in h.iter_mut().enumerate() {
        let pre = w1[k * 3] * x[0] + w1[k * 3 + 1] * x[1] + w1[k * 3 + 2] * x[2] + b1[k];
        *hk = pre.maxv(T::ZERO);
    }
    (0..c_out)
        .map(|c| {
            let mut acc = b2[c];
            for (k, hk) in h.iter().enumerate() {
                acc += w2[c * hidden + k] * *hk;
            }
            acc
        })
        .collect()
}

/// Inserts the offset network parameters under `{prefix}.offset.*`.
pub fn init_gpl(params: &mut Params<f32>, prefix: &str, cfg: &GplConfig, rng: &mut ChaCha8Rng) {
    let net = OffsetNet::init(cfg.c_out, cfg.hidden, rng);
    params.insert(format!("{prefix}.offset.0.weight"), net.w1);
    params.insert(format!("{prefix}.offset.0.bias"), net.b1);
    params.insert(format!("{prefix}.offset.1.weight"), net.w2);
    params.insert(format!("{prefix}.offset.1.bias"), net.b2);
}

/// Reconstructs an [`OffsetNet`] view from stored parameters.
pub fn offset_net_from_params<T: Scalar>(params: &Params<T>, prefix: &str) -> OffsetNet<T> {
    let get = |suffix: &str| {
        params
            .get(&format!("{prefix}.offset.{suffix}"))
            .unwrap_or_else(|| panic!("missing gpl parameter {prefix}.offset.{suffix}"))
            .clone()
    };
    OffsetNet {
        w1: get("0.weight"),
        b1: get("0.bias"),
        w2: get("1.weight"),
        b2: get("1.bias"),
    }
}

/// Per-call sampling geometry: source cell and fractional coordinates
/// for each output position, with fractional pairs deduplicated so the
/// offset network runs once per unique pair.
struct SamplePlan<T: Scalar> {
    y_src: Vec<usize>,
    x_src: Vec<usize>,
    /// unique (frac_y, frac_x) pairs in first-encounter order
    keys: Vec<(T, T)>,
    /// index into `keys` for each output pixel, row-major
    key_of: Vec<usize>,
    inv_s: T,
}

fn make_plan<T: Scalar>(h: usize, w: usize, out_h: usize, out_w: usize) -> SamplePlan<T> {
    let axis = |n_in: usize, n_out: usize| -> (Vec<usize>, Vec<T>) {
        (0..n_out)
            .map(|i| {
                let src = i as f64 * n_in as f64 / n_out as f64;
                let base = (src.floor() as usize).min(n_in - 1);
                (base, T::from_f64(src - base as f64))
            })
            .unzip()
    };
    let (y_src, fy) = axis(h, out_h);
    let (x_src, fx) = axis(w, out_w);
    let mut keys: Vec<(T, T)> = Vec::new();
    let mut lookup: HashMap<(u64, u64), usize> = HashMap::new();
    let mut key_of = Vec::with_capacity(out_h * out_w);
    for &fyv in &fy {
        for &fxv in &fx {
            let bits = (fyv.to_f64().to_bits(), fxv.to_f64().to_bits());
            let id = *lookup.entry(bits).or_insert_with(|| {
                keys.push((fyv, fxv));
                keys.len() - 1
            });
            key_of.push(id);
        }
    }
    SamplePlan {
        y_src,
        x_src,
        keys,
        key_of,
        inv_s: T::from_f64(h as f64 / out_h as f64),
    }
}

fn check_gpl_dims<T: Scalar>(t: &Tensor<T>, out_h: usize, out_w: usize) -> Result<(usize, usize, usize)> {
    if t.shape().len() != 3 {
        return Err(Error::Shape(format!(
            "gpl_sample expects [C, H, W], got {:?}",
            t.shape()
        )));
    }
    let (c_n, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if out_h < h || out_w < w {
        return Err(Error::Usage(format!(
            "gpl_sample target {out_h}x{out_w} smaller than input {h}x{w}"
        )));
    }
    Ok((c_n, h, w))
}

/// Generalized sampling with an explicit channel-position schedule.
/// `schedule(i, j, c)` returns `p_c` for the output position; `offsets`
/// optionally adds the learned `Δp_c`. The degeneracy check calls this
/// with the pixelshuffle index and no offsets.
pub fn gpl_sample_with<T: Scalar>(
    t: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    c_out: usize,
    schedule: &dyn Fn(usize, usize, usize) -> f64,
    offsets: Option<&OffsetNet<T>>,
) -> Result<Tensor<T>> {
    let (c_n, h, w) = check_gpl_dims(t, out_h, out_w)?;
    let plan = make_plan::<T>(h, w, out_h, out_w);
    let deltas: Vec<Vec<T>> = match offsets {
        Some(net) => plan
            .keys
            .iter()
            .map(|&(fyv, fxv)| net.eval(fyv, fxv, plan.inv_s))
            .collect(),
        None => Vec::new(),
    };
    let plane = h * w;
    let data = t.data();
    let out = Tensor::from_fn(&[c_out, out_h, out_w], |idx| {
        let c = idx / (out_h * out_w);
        let i = (idx / out_w) % out_h;
        let j = idx % out_w;
        let pix = plan.y_src[i] * w + plan.x_src[j];
        let mut q = T::from_f64(schedule(i, j, c));
        if offsets.is_some() {
            q += deltas[plan.key_of[i * out_w + j]][c];
        }
        interp_at(data, c_n, plane, pix, q)
    });
    Ok(out)
}

/// Generalized pixelshuffle with the centered channel schedule and the
/// learned offset network. `s = out_h/H` may be fractional.
pub fn gpl_sample<T: Scalar>(
    t: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    cfg: &GplConfig,
    net: &OffsetNet<T>,
) -> Result<Tensor<T>> {
    let (c_n, _, _) = check_gpl_dims(t, out_h, out_w)?;
    if c_n != cfg.c_inter {
        return Err(Error::Config(format!(
            "gpl_sample input has {c_n} channels, config says C_inter = {}",
            cfg.c_inter
        )));
    }
    let schedule = |_: usize, _: usize, c: usize| centered_channel_position(c, cfg.c_inter, cfg.c_out);
    gpl_sample_with(
        t,
        out_h,
        out_w,
        cfg.c_out,
        &schedule,
        cfg.offsets_enabled.then_some(net),
    )
}

// ---------------------------------------------------------------------------
// tape op
// ---------------------------------------------------------------------------

struct GplSampleOp {
    t: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    out_h: usize,
    out_w: usize,
    c_inter: usize,
    c_out: usize,
    offsets_enabled: bool,
}

impl GplSampleOp {
    fn deltas<T: Scalar>(&self, vals: &Values<'_, T>, plan: &SamplePlan<T>) -> Vec<Vec<T>> {
        if !self.offsets_enabled {
            return vec![vec![T::ZERO; self.c_out]; plan.keys.len()];
        }
        let w1 = vals.get(self.w1);
        let b1 = vals.get(self.b1);
        let w2 = vals.get(self.w2);
        let b2 = vals.get(self.b2);
        let hidden = w1.shape()[0];
        plan.keys
            .iter()
            .map(|&(fyv, fxv)| {
                eval_offsets(
                    w1.data(),
                    b1.data(),
                    w2.data(),
                    b2.data(),
                    hidden,
                    self.c_out,
                    [fyv, fxv, plan.inv_s],
                )
            })
            .collect()
    }
}

impl<T: Scalar> TapeOp<T> for GplSampleOp {
    fn backward(&self, vals: &Values<'_, T>, _out: usize, g: &Tensor<T>, sink: &mut Sink<'_, T>) {
        let t = vals.get(self.t);
        let (h, w) = (t.shape()[1], t.shape()[2]);
        let plane = h * w;
        let plan = make_plan::<T>(h, w, self.out_h, self.out_w);
        let deltas = self.deltas(vals, &plan);
        let (oh, ow) = (self.out_h, self.out_w);
        let g_data = g.data();
        let t_data = t.data();

        let want_offsets = self.offsets_enabled
            && (sink.needs(self.w1) || sink.needs(self.b1) || sink.needs(self.w2) || sink.needs(self.b2));
        let mut g_delta: Vec<Vec<T>> = if want_offsets {
            vec![vec![T::ZERO; self.c_out]; plan.keys.len()]
        } else {
            Vec::new()
        };

        // grads w.r.t. the intermediate features, plus dL/dΔp per key
        let needs_t = sink.needs(self.t);
        {
            let slot_t = if needs_t { sink.slot(self.t, t.shape()) } else { None };
            let mut slot_t = slot_t;
            for c in 0..self.c_out {
                for i in 0..oh {
                    for j in 0..ow {
                        let gv = g_data[(c * oh + i) * ow + j];
                        if gv == T::ZERO {
                            continue;
                        }
                        let key = plan.key_of[i * ow + j];
                        let pix = plan.y_src[i] * w + plan.x_src[j];
                        let q = T::from_f64(centered_channel_position(c, self.c_inter, self.c_out))
                            + deltas[key][c];
                        let qf = q.to_f64();
                        if !(-1.0..=self.c_inter as f64).contains(&qf) {
                            continue;
                        }
                        if let Some(slot) = slot_t.as_deref_mut() {
                            let k0 = qf.floor() as isize;
                            for k in [k0, k0 + 1] {
                                if k < 0 || k >= self.c_inter as isize {
                                    continue;
                                }
                                let wgt = T::ONE - (q - T::from_f64(k as f64)).abs();
                                if wgt > T::ZERO {
                                    slot[k as usize * plane + pix] += gv * wgt;
                                }
                            }
                        }
                        if want_offsets {
                            g_delta[key][c] += gv * interp_dq(t_data, self.c_inter, plane, pix, q);
                        }
                    }
                }
            }
        }

        if want_offsets {
            let w1 = vals.get(self.w1).clone();
            let b1 = vals.get(self.b1).clone();
            let w2 = vals.get(self.w2).clone();
            let hidden = w1.shape()[0];
            // replay the tiny MLP per unique key and push gradients through
            let mut gw1 = Tensor::zeros(w1.shape());
            let mut gb1 = Tensor::zeros(&[hidden]);
            let mut gw2 = Tensor::zeros(w2.shape());
            let mut gb2 = Tensor::zeros(&[self.c_out]);
            for (key, &(fyv, fxv)) in plan.keys.iter().enumerate() {
                let x = [fyv, fxv, plan.inv_s];
                let mut pre = vec![T::ZERO; hidden];
                let mut hval = vec![T::ZERO; hidden];
                for k in 0..hidden {
                    pre[k] = w1.data()[k * 3] * x[0]
                        + w1.data()[k * 3 + 1] * x[1]
                        + w1.data()[k * 3 + 2] * x[2]
                        + b1.data()[k];
                    hval[k] = pre[k].maxv(T::ZERO);
                }
                let mut gh = vec![T::ZERO; hidden];
                for c in 0..self.c_out {
                    let gd = g_delta[key][c];
                    if gd == T::ZERO {
                        continue;
                    }
                    gb2.data_mut()[c] += gd;
                    for k in 0..hidden {
                        gw2.data_mut()[c * hidden + k] += gd * hval[k];
                        gh[k] += gd * w2.data()[c * hidden + k];
                    }
                }
                for k in 0..hidden {
                    if pre[k] > T::ZERO {
                        gw1.data_mut()[k * 3] += gh[k] * x[0];
                        gw1.data_mut()[k * 3 + 1] += gh[k] * x[1];
                        gw1.data_mut()[k * 3 + 2] += gh[k] * x[2];
                        gb1.data_mut()[k] += gh[k];
                    }
                }
            }
            sink.accum(self.w1, &gw1);
            sink.accum(self.b1, &gb1);
            sink.accum(self.w2, &gw2);
            sink.accum(self.b2, &gb2);
        }
    }
}

/// Differentiable generalized pixelshuffle reading the offset network
/// from bound parameters under `{prefix}.offset.*`.
pub fn gpl_sample_var<T: Scalar>(
    t: &Var<T>,
    bound: &Bound<T>,
    prefix: &str,
    out_h: usize,
    out_w: usize,
    cfg: &GplConfig,
) -> Result<Var<T>> {
    let w1 = bound.var(&format!("{prefix}.offset.0.weight"));
    let b1 = bound.var(&format!("{prefix}.offset.0.bias"));
    let w2 = bound.var(&format!("{prefix}.offset.1.weight"));
    let b2 = bound.var(&format!("{prefix}.offset.1.bias"));
    let net = OffsetNet {
        w1: w1.value(),
        b1: b1.value(),
        w2: w2.value(),
        b2: b2.value(),
    };
    let out = t
        .graph()
        .with_value(t.idx(), |vt| gpl_sample(vt, out_h, out_w, cfg, &net))?;
    Ok(t.graph().push(
        out,
        Box::new(GplSampleOp {
            t: t.idx(),
            w1: w1.idx(),
            b1: b1.idx(),
            w2: w2.idx(),
            b2: b2.idx(),
            out_h,
            out_w,
            c_inter: cfg.c_inter,
            c_out: cfg.c_out,
            offsets_enabled: cfg.offsets_enabled,
        }),
        &[t.idx(), w1.idx(), b1.idx(), w2.idx(), b2.idx()],
    ))
}

struct ChannelInterpOp {
    t: usize,
    q: usize,
    yi: usize,
    xj: usize,
}

impl<T: Scalar> TapeOp<T> for ChannelInterpOp {
    fn backward(&self, vals: &Values<'_, T>, _out: usize, g: &Tensor<T>, sink: &mut Sink<'_, T>) {
        let t = vals.get(self.t);
        let (c_n, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let plane = h * w;
        let pix = self.yi * w + self.xj;
        let q = vals.get(self.q).data()[0];
        let gv = g.data()[0];
        if let Some(slot) = sink.slot(self.t, t.shape()) {
            let qf = q.to_f64();
            if (-1.0..=c_n as f64).contains(&qf) {
                let k0 = qf.floor() as isize;
                for k in [k0, k0 + 1] {
                    if k < 0 || k >= c_n as isize {
                        continue;
                    }
                    let wgt = T::ONE - (q - T::from_f64(k as f64)).abs();
                    if wgt > T::ZERO {
                        slot[k as usize * plane + pix] += gv * wgt;
                    }
                }
            }
        }
        if let Some(slot) = sink.slot(self.q, &[1]) {
            slot[0] += gv * interp_dq(t.data(), c_n, plane, pix, q);
        }
    }
}

/// Differentiable channel-axis interpolation at one cell: `q` is a
/// one-element node so gradients flow into both the features and the
/// sampling position.
pub fn channel_interp_var<T: Scalar>(t: &Var<T>, yi: usize, xj: usize, q: &Var<T>) -> Var<T> {
    assert!(t.graph().same_graph(q.graph()), "interp across graphs");
    let out = t.graph().with_value(t.idx(), |vt| {
        let (c_n, h, w) = (vt.shape()[0], vt.shape()[1], vt.shape()[2]);
        assert!(yi < h && xj < w, "channel_interp cell out of bounds");
        let qv = q.graph().with_value(q.idx(), |vq| vq.data()[0]);
        Tensor::scalar(interp_at(vt.data(), c_n, h * w, yi * w + xj, qv))
    });
    t.graph().push(
        out,
        Box::new(ChannelInterpOp {
            t: t.idx(),
            q: q.idx(),
            yi,
            xj,
        }),
        &[t.idx(), q.idx()],
    )
}

/// Widening convolution in front of the sampler: a single 3×3 conv from
/// `C_in` to `C_inter` with unit padding.
pub fn widen<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    ops::conv2d_plain(input, kernel, bias, 1, 1, ops::PadMode::Zero)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn project_location_known_values() {
        assert_eq!(project_location(3, 3, 2.0), (1.5, 1.5));
        assert_eq!(project_location(5, 2, 1.0), (5.0, 2.0));
        let (i, j) = project_location(2, 0, 1.5);
        assert!((i - 1.3333333).abs() < 1e-6);
        assert_eq!(j, 0.0);
    }

    #[test]
    fn widen_has_requested_channel_count() {
        let x = rand_tensor(&[2, 4, 4], 0);
        let k = rand_tensor(&[4, 2, 3, 3], 1);
        let b = rand_tensor(&[4], 2);
        let y = widen(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), &[4, 4, 4]);
    }

    #[test]
    fn spl_enumerates_the_depth_to_space_layout() {
        // C_inter = 4, C_out = 1, s = 2 on a 2x2 input: within every 2x2
        // output cell the four channels appear in row-major order
        let t = Tensor::<f64>::from_fn(&[4, 2, 2], |i| i as f64);
        let y = spl(&t, 2).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        for i in 0..4 {
            for j in 0..4 {
                let want = t.at3(2 * (i % 2) + (j % 2), i / 2, j / 2);
                assert_eq!(y.at3(0, i, j), want, "({i},{j})");
            }
        }
    }

    #[test]
    fn spl_scale_one_is_identity() {
        let t = rand_tensor(&[3, 4, 5], 3);
        let y = spl(&t, 1).unwrap();
        assert_eq!(y.data(), t.data());
    }

    #[test]
    fn spl_rejects_bad_channel_count() {
        let t = rand_tensor(&[6, 4, 4], 4);
        assert!(spl(&t, 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn spl_is_a_bijection(seed in 0u64..1000, s in 1usize..4, c_out in 1usize..3) {
            let t = rand_tensor(&[c_out * s * s, 3, 2], seed);
            let y = spl(&t, s).unwrap();
            // invert: every intermediate element must be recoverable
            let mut back = Tensor::<f64>::zeros(t.shape());
            for c in 0..c_out {
                for i in 0..3 * s {
                    for j in 0..2 * s {
                        let idx = spl_channel_index(i, j, c, s, c_out);
                        back.data_mut()[(idx * 3 + i / s) * 2 + j / s] = y.at3(c, i, j);
                    }
                }
            }
            prop_assert_eq!(back.data(), t.data());
        }
    }

    #[test]
    fn offset_net_is_zero_at_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = OffsetNet::init(6, 16, &mut rng);
        for probe in [[0.0f32, 0.0, 1.0], [0.3, 0.9, 0.25], [0.99, 0.01, 0.5]] {
            let out = net.eval(probe[0], probe[1], probe[2]);
            assert_eq!(out.len(), 6);
            assert!(out.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn offset_net_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net = OffsetNet::init(4, 8, &mut rng);
        // make it non-trivial
        for v in net.w2.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let a = net.eval(0.25f32, 0.75, 0.4);
        let b = net.eval(0.25f32, 0.75, 0.4);
        assert_eq!(a, b);
    }

    #[test]
    fn channel_interp_known_values() {
        let t = Tensor::<f64>::from_fn(&[4, 1, 1], |i| (i * 10) as f64);
        for k in 0..4 {
            assert_eq!(channel_interp(&t, 0, 0, k as f64), (k * 10) as f64);
        }
        assert_eq!(channel_interp(&t, 0, 0, 1.5), 15.0);
        assert_eq!(channel_interp(&t, 0, 0, -2.0), 0.0);
        assert_eq!(channel_interp(&t, 0, 0, 5.0), 0.0);
    }

    #[test]
    fn channel_interp_matches_direct_formula() {
        let t = rand_tensor(&[7, 3, 4], 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let yi = rng.gen_range(0..3);
            let xj = rng.gen_range(0..4);
            let q = rng.gen_range(-2.0..9.0);
            let got = channel_interp(&t, yi, xj, q);
            let want: f64 = if (-1.0..=7.0).contains(&q) {
                (0..7)
                    .map(|k| (1.0 - (q - k as f64).abs()).max(0.0) * t.at3(k, yi, xj))
                    .sum()
            } else {
                0.0
            };
            assert!((got - want).abs() < 1e-9, "q={q}: {got} vs {want}");
        }
    }

    #[test]
    fn fractional_scale_projection_matches_the_layout_example() {
        // C_inter = 4, C_out = 2, s = 1.5 (2x2 -> 3x3) with p_c = 0 and no
        // offsets: every output reads channel 0 of the projected cell
        let t = rand_tensor(&[4, 2, 2], 9);
        let y = gpl_sample_with(&t, 3, 3, 2, &|_, _, _| 0.0, None).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
        let src = [0usize, 0, 1]; // floor(i * 2 / 3)
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(y.at3(c, i, j), t.at3(0, src[i], src[j]), "({c},{i},{j})");
                }
            }
        }
    }

    #[test]
    fn degenerates_to_spl_for_integer_scales() {
        for (s, seed) in [(2usize, 10u64), (3, 11), (4, 12)] {
            let c_out = 2;
            let t = rand_tensor(&[s * s * c_out, 3, 3], seed);
            let want = spl(&t, s).unwrap();
            let schedule =
                |i: usize, j: usize, c: usize| spl_channel_index(i, j, c, s, c_out) as f64;
            let got = gpl_sample_with(&t, 3 * s, 3 * s, c_out, &schedule, None).unwrap();
            assert!(got.max_abs_diff(&want) <= 1e-6, "s={s}");
        }
    }

    #[test]
    fn scale_one_with_matching_channels_is_identity() {
        // C_inter = C_out and s = 1: centered schedule reads p_c = c
        let c = 5;
        let t = rand_tensor(&[c, 4, 4], 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let net = OffsetNet::init(c, 8, &mut rng).cast::<f64>();
        let cfg = GplConfig {
            c_in: c,
            c_inter: c,
            c_out: c,
            hidden: 8,
            offsets_enabled: true,
        };
        let y = gpl_sample(&t, 4, 4, &cfg, &net).unwrap();
        assert!(y.max_abs_diff(&t) < 1e-12);
    }

    #[test]
    fn zero_offset_output_is_constant_within_each_cell() {
        let s = 3usize;
        let c_out = 2;
        let t = rand_tensor(&[5 * c_out, 4, 4], 15);
        let cfg = GplConfig {
            c_in: c_out,
            c_inter: 5 * c_out,
            c_out,
            hidden: 8,
            offsets_enabled: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let net = OffsetNet::init(c_out, 8, &mut rng).cast::<f64>();
        let y = gpl_sample(&t, 4 * s, 4 * s, &cfg, &net).unwrap();
        for c in 0..c_out {
            for cell_y in 0..4 {
                for cell_x in 0..4 {
                    let v = y.at3(c, cell_y * s, cell_x * s);
                    for dy in 0..s {
                        for dx in 0..s {
                            assert_eq!(y.at3(c, cell_y * s + dy, cell_x * s + dx), v);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn cached_offsets_match_per_pixel_evaluation_bitwise() {
        let c_out = 3;
        let cfg = GplConfig {
            c_in: c_out,
            c_inter: 7,
            c_out,
            hidden: 8,
            offsets_enabled: true,
        };
        let t = rand_tensor(&[7, 4, 4], 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut net = OffsetNet::init(c_out, 8, &mut rng);
        for v in net.w2.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        for v in net.b2.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        let net = net.cast::<f64>();
        let (out_h, out_w) = (10, 10);
        let got = gpl_sample(&t, out_h, out_w, &cfg, &net).unwrap();

        // per-pixel: evaluate the MLP at every output position
        let h = 4;
        let inv_s = h as f64 / out_h as f64;
        for c in 0..c_out {
            for i in 0..out_h {
                for j in 0..out_w {
                    let sy = i as f64 * 4.0 / out_h as f64;
                    let sx = j as f64 * 4.0 / out_w as f64;
                    let (by, bx) = (sy.floor() as usize, sx.floor() as usize);
                    let delta = net.eval(sy - by as f64, sx - bx as f64, inv_s)[c];
                    let q = centered_channel_position(c, 7, c_out) + delta;
                    let want = channel_interp(&t, by, bx, q);
                    let gotv = got.at3(c, i, j);
                    assert_eq!(gotv.to_bits(), want.to_bits(), "({c},{i},{j})");
                }
            }
        }
    }

    #[test]
    fn rejects_downscaling() {
        let t = rand_tensor(&[4, 8, 8], 19);
        assert!(gpl_sample_with(&t, 4, 8, 1, &|_, _, _| 0.0, None).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_sampler() {
        use crate::params::bind;
        use crate::tensor::graph::Graph;

        let cfg = GplConfig {
            c_in: 3,
            c_inter: 15,
            c_out: 3,
            hidden: 8,
            offsets_enabled: true,
        };
        let mut params = Params::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        init_gpl(&mut params, "recon.gpl", &cfg, &mut rng);
        params.jitter(&mut rng, 0.05);
        let params64 = params.cast::<f64>();

        let t = rand_tensor(&[15, 5, 5], 21);
        let plain = gpl_sample(
            &t,
            12,
            12,
            &cfg,
            &offset_net_from_params(&params64, "recon.gpl"),
        )
        .unwrap();

        let g: Graph<f64> = Graph::new();
        let bound = bind(&g, &params64);
        let tv = g.constant(t.clone());
        let var = gpl_sample_var(&tv, &bound, "recon.gpl", 12, 12, &cfg).unwrap();
        assert_eq!(var.value().data(), plain.data());
    }

    #[test]
    fn gradient_check_with_random_offsets() {

        use crate::tensor::gradcheck::grad_check;
        use crate::tensor::graph::Graph;

        let cfg = GplConfig {
            c_in: 2,
            c_inter: 7,
            c_out: 2,
            hidden: 6,
            offsets_enabled: true,
        };
        let mut params = Params::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        init_gpl(&mut params, "recon.gpl", &cfg, &mut rng);
        params.jitter(&mut rng, 0.1);
        let p64 = params.cast::<f64>();

        let t = rand_tensor(&[7, 4, 4], 23);
        let report = grad_check(
            |g: &Graph<f64>, xs| {
                let mut jittered = p64.clone();
                // route the checked leaves into the parameter store
                *jittered.get_mut("recon.gpl.offset.0.weight").unwrap() = xs[1].value();
                *jittered.get_mut("recon.gpl.offset.1.weight").unwrap() = xs[2].value();
                let bound = bind_with_leaves(g, &jittered, xs);
                let y = gpl_sample_var(&xs[0], &bound, "recon.gpl", 9, 9, &cfg).unwrap();
                crate::tensor::ops::sum_all(&y)
            },
            &[
                t,
                p64.get("recon.gpl.offset.0.weight").unwrap().clone(),
                p64.get("recon.gpl.offset.1.weight").unwrap().clone(),
            ],
            1e-6,
            120,
            24,
        );
        assert!(report.pass, "{report}");
    }

    /// Binds `params` but substitutes the gradient-checked leaves for
    /// the offset weight tensors.
    fn bind_with_leaves(
        g: &crate::tensor::graph::Graph<f64>,
        params: &Params<f64>,
        xs: &[crate::tensor::graph::Var<f64>],
    ) -> Bound<f64> {
        use std::collections::BTreeMap;
        let mut map = BTreeMap::new();
        for (name, tensor) in params.iter() {
            map.insert(name.clone(), g.leaf(tensor.clone().with_grad()));
        }
        map.insert("recon.gpl.offset.0.weight".into(), xs[1].clone());
        map.insert("recon.gpl.offset.1.weight".into(), xs[2].clone());
        Bound::from_map(map)
    }
}
