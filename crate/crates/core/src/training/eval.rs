//! Evaluation over `(t, s)` query grids, plus the two-stage baseline
//! (linearly blended backward warps, bicubic-upsampled) that the
//! trained model is measured against.

use rayon::prelude::*;

use crate::imaging::{bicubic_resize, psnr, ssim, Frame};
use crate::motion::{
    estimate_flow, reverse_flow, scale_flow, warp_frame, FinetBackend, FlowSource,
};
use crate::net::{forward, NetConfig, ScaleTimeQuery};
use crate::params::Params;
use crate::training::dataset::Sequence;
use crate::{Error, Result};

/// What produces the prediction during evaluation.
pub enum EvalModel<'a> {
    /// Warp both endpoints to `t`, blend linearly, upsample bicubically.
    Baseline,
    /// The trained network.
    Net {
        cfg: &'a NetConfig,
        params: &'a Params<f32>,
    },
}

/// Mean scores for one `(t, s)` query over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub t: f64,
    pub s: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Two-stage reference prediction: classical flows, flow reversal,
/// backward warps blended as `(1-t)·w0 + t·w1`, then bicubic upsampling
/// to the output size.
pub fn baseline_predict(
    i0: &Frame,
    i1: &Frame,
    t: f64,
    out_h: usize,
    out_w: usize,
) -> Result<Frame> {
    let f01 = estimate_flow(i0, i1, &FlowSource::Classical)?;
    let f10 = estimate_flow(i1, i0, &FlowSource::Classical)?;
    let ft0 = reverse_flow(&scale_flow(&f01, t));
    let ft1 = reverse_flow(&scale_flow(&f10, 1.0 - t));
    let w0 = warp_frame(i0, &ft0);
    let w1 = warp_frame(i1, &ft1);
    let blended = Frame::from_clamped(crate::tensor::Tensor::from_fn(
        w0.tensor().shape(),
        |i| (1.0 - t as f32) * w0.tensor().data()[i] + t as f32 * w1.tensor().data()[i],
    ))?;
    bicubic_resize(&blended, out_h, out_w)
}

/// Evaluates the model over every `(t, s)` point: LR inputs are the
/// bicubic-degraded endpoint frames, the output is compared against the
/// ground-truth frame at `t` at full resolution. Sequences are scored
/// in parallel and averaged in index order.
pub fn evaluate(
    dataset: &[Sequence],
    model: &EvalModel<'_>,
    points: &[(f64, f64)],
) -> Result<Vec<EvalRow>> {
    if dataset.is_empty() {
        return Err(Error::Usage("evaluation dataset is empty".into()));
    }
    let mut rows = Vec::with_capacity(points.len());
    for &(t, s) in points {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Usage(format!("evaluation time t={t} outside [0, 1]")));
        }
        if s < 1.0 {
            return Err(Error::Usage(format!("evaluation scale s={s} below 1")));
        }
        let scores: Vec<Result<(f64, f64)>> = dataset
            .par_iter()
            .map(|seq| score_sequence(seq, model, t, s))
            .collect();
        let mut psnr_acc = 0.0;
        let mut ssim_acc = 0.0;
        for r in &scores {
            match r {
                Ok((p, m)) => {
                    psnr_acc += p;
                    ssim_acc += m;
                }
                Err(e) => return Err(Error::Usage(e.to_string())),
            }
        }
        rows.push(EvalRow {
            t,
            s,
            psnr: psnr_acc / dataset.len() as f64,
            ssim: ssim_acc / dataset.len() as f64,
        });
    }
    Ok(rows)
}

fn score_sequence(seq: &Sequence, model: &EvalModel<'_>, t: f64, s: f64) -> Result<(f64, f64)> {
    let (h, w) = seq.hr_size();
    let lh = ((h as f64 / s).round() as usize).max(1);
    let lw = ((w as f64 / s).round() as usize).max(1);
    let gt = seq.frame_at_time(t).ok_or_else(|| {
        Error::Usage(format!(
            "no ground truth at t={t}; directory datasets only support grid times"
        ))
    })?;
    let i0 = bicubic_resize(&seq.frame_at_time(0.0).expect("endpoint frame"), lh, lw)?;
    let i1 = bicubic_resize(&seq.frame_at_time(1.0).expect("endpoint frame"), lh, lw)?;
    let pred = match model {
        EvalModel::Baseline => baseline_predict(&i0, &i1, t, h, w)?,
        EvalModel::Net { cfg, params } => {
            let query = ScaleTimeQuery::new(t, h, w)?;
            forward(&i0, &i1, &query, cfg, params, &FinetBackend::classical())?
        }
    };
    Ok((psnr(&gt, &pred)?, ssim(&gt, &pred)?))
}
