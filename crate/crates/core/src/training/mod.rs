//! Desk-scale training harness: batch construction with randomized
//! `(t, s)` queries, Adam optimization with the two mode-specific
//! learning-rate schedules, checkpoint persistence, and the evaluation
//! loop used by the CLI and the acceptance experiments.

pub mod checkpoint;
pub mod dataset;
pub mod eval;
pub mod optim;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::{bicubic_resize, Frame};
use crate::losses::{total_loss_var, LossConfig};
use crate::motion::FinetBackend;
use crate::net::{forward_var, init_net, NetConfig, ScaleTimeQuery};
use crate::params::{bind, collect_grads, Params};
use crate::tensor::graph::Graph;
use crate::tensor::ops;
use crate::{Error, Result};

use checkpoint::Checkpoint;
use dataset::Sequence;
use optim::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

/// Unconstrained mode trains over the full `(t, s)` domain; fixed mode
/// restricts to `t ∈ {0, 0.5, 1}` and `s = 4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Unconstrained,
    Fixed,
}

/// Training hyperparameters. The defaults are the desk-scale stand-in
/// for the reference regime: 2000 iterations, batch 4, learning rate
/// 1e-4 dropped ×0.1 at 70% progress.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub iters: usize,
    pub batch_size: usize,
    /// LR patch side; the HR patch is `round(patch · s)`.
    pub patch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Scale range sampled per batch (ignored in fixed mode, which
    /// pins `s = 4`).
    pub s_range: (f64, f64),
    pub net: NetConfig,
    pub checkpoint_every: usize,
    /// Where checkpoints are written (periodic, final, and last-good on
    /// abort). `None` keeps everything in memory.
    pub out_path: Option<PathBuf>,
    /// Resume from a previous checkpoint (continues the step counter).
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Unconstrained,
            iters: 2000,
            batch_size: 4,
            patch: 56,
            lr: 1e-4,
            seed: 0,
            s_range: (1.0, 4.0),
            net: NetConfig::default(),
            checkpoint_every: 500,
            out_path: None,
            resume: None,
        }
    }
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub params: Params<f32>,
    pub opt: AdamState,
    /// `(step, loss)` per iteration.
    pub curve: Vec<(u64, f64)>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint::from_training(&self.params, &self.opt, cfg.net.config_hash())
    }
}

// ---------------------------------------------------------------------------
// batch sampling
// ---------------------------------------------------------------------------

/// One random draw describing how to cut a training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleDraw {
    pub seq: usize,
    pub y0: usize,
    pub x0: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub t_reverse: bool,
}

/// A training example: LR endpoints plus the HR target at time `t`.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub i0: Frame,
    pub i1: Frame,
    pub target: Frame,
}

/// A batch shares one `(t, s)`; `s` is snapped so the LR patch is
/// exactly `patch` pixels: `s = hr_patch / patch`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    pub t: f64,
    pub s: f64,
    pub hr_patch: usize,
}

fn time_grid(mode: TrainMode) -> &'static [f64] {
    match mode {
        TrainMode::Unconstrained => &[0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0],
        TrainMode::Fixed => &[0.0, 0.5, 1.0],
    }
}

/// Draws the per-batch `(t, s)` query: `t` uniform over the mode's time
/// grid, `s` uniform over the configured range (pinned to 4 in fixed
/// mode).
pub fn draw_query(rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> (f64, f64) {
    let grid = time_grid(cfg.mode);
    let t = grid[rng.gen_range(0..grid.len())];
    let s = match cfg.mode {
        TrainMode::Fixed => 4.0,
        TrainMode::Unconstrained => {
            if cfg.s_range.0 == cfg.s_range.1 {
                cfg.s_range.0
            } else {
                rng.gen_range(cfg.s_range.0..cfg.s_range.1)
            }
        }
    };
    (t, s)
}

fn crop(frame: &Frame, y0: usize, x0: usize, size: usize) -> Frame {
    Frame::from_fn(size, size, |c, y, x| frame.at(c, y0 + y, x0 + x))
}

fn flip(frame: &Frame, horizontal: bool, vertical: bool) -> Frame {
    let (h, w) = (frame.height(), frame.width());
    Frame::from_fn(h, w, |c, y, x| {
        let sy = if vertical { h - 1 - y } else { y };
        let sx = if horizontal { w - 1 - x } else { x };
        frame.at(c, sy, sx)
    })
}

/// Deterministically cuts one training example from a sequence: crop
/// the HR frames, apply flips and optional temporal reversal, then
/// bicubic-downsample the endpoints to the LR patch size.
pub fn materialize_sample(
    dataset: &[Sequence],
    t: f64,
    hr_patch: usize,
    lr_patch: usize,
    draw: &SampleDraw,
) -> Result<BatchItem> {
    let seq = &dataset[draw.seq];
    let t_target = if draw.t_reverse { 1.0 - t } else { t };
    let (e0_t, e1_t) = if draw.t_reverse { (1.0, 0.0) } else { (0.0, 1.0) };
    let fetch = |time: f64| -> Result<Frame> {
        seq.frame_at_time(time).ok_or_else(|| {
            Error::Usage(format!("sequence has no frame at t={time} (off-grid)"))
        })
    };
    let prep = |frame: &Frame| flip(&crop(frame, draw.y0, draw.x0, hr_patch), draw.hflip, draw.vflip);

    let hr0 = prep(&fetch(e0_t)?);
    let hr1 = prep(&fetch(e1_t)?);
    let target = prep(&fetch(t_target)?);
    Ok(BatchItem {
        i0: bicubic_resize(&hr0, lr_patch, lr_patch)?,
        i1: bicubic_resize(&hr1, lr_patch, lr_patch)?,
        target,
    })
}

/// Draws a batch: one `(t, s)` pair shared by every item, per-item
/// crops and augmentation flags.
pub fn sample_batch(dataset: &[Sequence], rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> Result<Batch> {
    let (t, s) = draw_query(rng, cfg);
    let hr_patch = ((cfg.patch as f64 * s).round() as usize).max(cfg.patch);
    let s_snapped = hr_patch as f64 / cfg.patch as f64;

    let mut items = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let seq_idx = rng.gen_range(0..dataset.len());
        let (h, w) = dataset[seq_idx].hr_size();
        if hr_patch > h || hr_patch > w {
            return Err(Error::Config(format!(
                "HR patch {hr_patch} does not fit in {h}x{w} frames; lower patch or s_range"
            )));
        }
        let draw = SampleDraw {
            seq: seq_idx,
            y0: rng.gen_range(0..=h - hr_patch),
            x0: rng.gen_range(0..=w - hr_patch),
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
            t_reverse: rng.gen_bool(0.5),
        };
        items.push(materialize_sample(dataset, t, hr_patch, cfg.patch, &draw)?);
    }
    Ok(Batch {
        items,
        t,
        s: s_snapped,
        hr_patch,
    })
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

/// Learning rate at a given progress fraction. The unconstrained
/// schedule drops ×0.1 at 70% progress; the fixed schedule halves at
/// 32% and 64%, then drops ×0.2 at 76% and 88% (the reference epoch
/// boundaries mapped proportionally onto the iteration budget).
pub fn lr_at(cfg: &TrainConfig, iter: usize) -> f64 {
    let progress = iter as f64 / cfg.iters.max(1) as f64;
    match cfg.mode {
        TrainMode::Unconstrained => {
            if progress < 0.7 {
                cfg.lr
            } else {
                cfg.lr * 0.1
            }
        }
        TrainMode::Fixed => {
            let mut lr = cfg.lr;
            for (at, factor) in [(0.32, 0.5), (0.64, 0.5), (0.76, 0.2), (0.88, 0.2)] {
                if progress >= at {
                    lr *= factor;
                }
            }
            lr
        }
    }
}

fn validate_patch_fit(cfg: &TrainConfig, dataset: &[Sequence]) -> Result<()> {
    let s_max = match cfg.mode {
        TrainMode::Fixed => 4.0,
        TrainMode::Unconstrained => cfg.s_range.1,
    };
    let hr_max = (cfg.patch as f64 * s_max).round() as usize;
    for (i, seq) in dataset.iter().enumerate() {
        let (h, w) = seq.hr_size();
        if hr_max > h || hr_max > w {
            return Err(Error::Config(format!(
                "patch {} x s_max {s_max} needs {hr_max} px but sequence {i} is {h}x{w}",
                cfg.patch
            )));
        }
    }
    Ok(())
}

/// Runs the training loop: sample batch → forward → loss → Adam.
/// Fully seeded and bit-reproducible. Aborts on a non-finite loss,
/// saving the last good parameters when an output path is configured.
pub fn train(cfg: &TrainConfig, dataset: &[Sequence]) -> Result<TrainOutcome> {
    cfg.net.validate()?;
    if dataset.is_empty() {
        return Err(Error::Usage("training dataset is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.iters == 0 {
        return Err(Error::Config("iters and batch size must be >= 1".into()));
    }
    validate_patch_fit(cfg, dataset)?;

    let (mut params, mut opt) = match &cfg.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if let Some(hash) = ckpt.config_hash() {
                if hash != cfg.net.config_hash() {
                    return Err(Error::Config(format!(
                        "checkpoint {} was trained with a different architecture",
                        path.display()
                    )));
                }
            }
            (ckpt.params()?, ckpt.adam_state()?)
        }
        None => (init_net(&cfg.net, cfg.seed), AdamState::new()),
    };

    let backend = FinetBackend::classical();
    let loss_cfg = LossConfig::<f32>::default(); // λ = 0.04 over a disabled extractor
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ opt.step.wrapping_mul(0x9e3779b9));
    let mut curve = Vec::with_capacity(cfg.iters);

    for iter in 0..cfg.iters {
        let last_good = params.clone();
        let batch = sample_batch(dataset, &mut rng, cfg)?;

        let graph: Graph<f32> = Graph::new();
        let bound = bind(&graph, &params);
        let mut total: Option<crate::tensor::graph::Var<f32>> = None;
        for item in &batch.items {
            let query = ScaleTimeQuery {
                t: batch.t,
                out_h: batch.hr_patch,
                out_w: batch.hr_patch,
            };
            let (out, _, _) =
                forward_var(&graph, &bound, &cfg.net, &item.i0, &item.i1, &query, &backend)?;
            let target = graph.constant(item.target.tensor().clone());
            let item_loss = total_loss_var(&out, &target, &loss_cfg);
            total = Some(match total {
                Some(acc) => ops::add(&acc, &item_loss),
                None => item_loss,
            });
        }
        let loss = ops::scale(&total.expect("batch not empty"), 1.0 / batch.items.len() as f64);
        let loss_value = loss.item() as f64;

        if !loss_value.is_finite() {
            return abort_diverged(
                cfg,
                &last_good,
                &opt,
                format!("non-finite loss {loss_value} at step {}", opt.step + 1),
            );
        }

        let mut grads = graph.backward(&loss);
        let collected = collect_grads(&mut grads, &bound);
        adam_step(
            &mut params,
            &collected,
            &mut opt,
            lr_at(cfg, iter),
            ADAM_BETA1,
            ADAM_BETA2,
            ADAM_EPS,
        );
        // rectifier units can mask non-finite parameters behind a finite
        // loss, so the parameters are guarded directly as well
        if !params.all_finite() {
            return abort_diverged(
                cfg,
                &last_good,
                &opt,
                format!("non-finite parameters after step {}", opt.step),
            );
        }
        curve.push((opt.step, loss_value));

        if let Some(path) = &cfg.out_path {
            if (iter + 1) % cfg.checkpoint_every.max(1) == 0 {
                Checkpoint::from_training(&params, &opt, cfg.net.config_hash()).save(path)?;
            }
        }
    }

    if let Some(path) = &cfg.out_path {
        Checkpoint::from_training(&params, &opt, cfg.net.config_hash()).save(path)?;
    }
    Ok(TrainOutcome { params, opt, curve })
}

fn abort_diverged(
    cfg: &TrainConfig,
    last_good: &Params<f32>,
    opt: &AdamState,
    mut msg: String,
) -> Result<TrainOutcome> {
    if let Some(path) = &cfg.out_path {
        let ckpt = Checkpoint::from_training(last_good, opt, cfg.net.config_hash());
        ckpt.save(path)?;
        msg.push_str(&format!("; last-good checkpoint saved to {}", path.display()));
    }
    Err(Error::Training(msg))
}

/// Writes a loss curve as `step,loss` CSV.
pub fn write_loss_csv(curve: &[(u64, f64)], path: &std::path::Path) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (step, loss) in curve {
        out.push_str(&format!("{step},{loss:.8}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
