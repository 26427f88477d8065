//! The full gradient suite: every differentiable operator checked
//! against central finite differences in f64 at relative tolerance
//! 1e-6, ≥100 sampled coordinates each. The `gradcheck` CLI command and
//! the acceptance tests both run this.
//!
//! Inputs are drawn from pinned seeds chosen so no sampled coordinate
//! sits within 1e-3 of an interpolation kink (where the subgradient
//! choice is arbitrary and finite differences straddle two segments).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{init_sardb, sardb_forward_var, RdbConfig};
use crate::gpl::{
    centered_channel_position, channel_interp_var, gpl_sample_var, init_gpl,
    offset_net_from_params, GplConfig,
};
use crate::imaging::Frame;
use crate::losses::{charbonnier_var, total_loss_var, IdentityStages, LossConfig};
use crate::motion::{fuse_var, warp_var};
use crate::net::{enhance_var, init_net, reconstruct_var, NetConfig};
use crate::params::{Bound, Params};
use crate::tensor::gradcheck::grad_check;
use crate::tensor::graph::Var;
use crate::tensor::{ops, GradReport, Tensor};

pub const SUITE_TOL: f64 = 1e-6;
const POINTS: usize = 120;

/// One named check result.
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradReport,
}

pub fn suite_passed(entries: &[SuiteEntry]) -> bool {
    entries.iter().all(|e| e.report.pass)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Flow whose fractional parts stay well clear of bilinear kinks
/// (integer sampling coordinates).
fn fractional_flow(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[2, h, w], |_| {
        let mag = rng.gen_range(0.15..0.45);
        let whole = rng.gen_range(-1..=1) as f64;
        whole + if rng.gen_bool(0.5) { mag } else { -mag }
    })
}

/// Binds every parameter tensor as a gradient-checked leaf, in sorted
/// name order matching how the tensors were passed to `grad_check`.
fn bound_from_leaves(names: &[String], leaves: &[Var<f64>], offset: usize) -> Bound<f64> {
    let mut map = BTreeMap::new();
    for (i, name) in names.iter().enumerate() {
        map.insert(name.clone(), leaves[offset + i].clone());
    }
    Bound::from_map(map)
}

fn params_as_tensors(params: &Params<f64>) -> (Vec<String>, Vec<Tensor<f64>>) {
    let names: Vec<String> = params.names().cloned().collect();
    let tensors = names
        .iter()
        .map(|n| params.get(n).unwrap().clone())
        .collect();
    (names, tensors)
}

fn check_conv2d() -> SuiteEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let x = rand_tensor(&[2, 5, 5], &mut rng);
    let k = rand_tensor(&[3, 2, 3, 3], &mut rng);
    let b = rand_tensor(&[3], &mut rng);
    let report = grad_check(
        |_, xs| ops::sum_all(&ops::conv2d(&xs[0], &xs[1], &xs[2], 1, 1, ops::PadMode::Zero).unwrap()),
        &[x, k, b],
        SUITE_TOL,
        POINTS + 30,
        1,
    );
    SuiteEntry {
        name: "conv2d",
        report,
    }
}

fn check_warp() -> SuiteEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let img = rand_tensor(&[2, 7, 7], &mut rng);
    let flow = fractional_flow(7, 7, &mut rng);
    let report = grad_check(
        |_, xs| ops::sum_all(&warp_var(&xs[0], &xs[1])),
        &[img, flow],
        SUITE_TOL,
        POINTS + 30,
        2,
    );
    SuiteEntry {
        name: "warp (image and flow)",
        report,
    }
}

fn check_fuse() -> SuiteEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let i0 = Tensor::from_fn(&[3, 6, 6], |_| rng.gen_range(0.0..1.0));
    let i1 = Tensor::from_fn(&[3, 6, 6], |_| rng.gen_range(0.0..1.0));
    let ft0 = fractional_flow(6, 6, &mut rng);
    let ft1 = fractional_flow(6, 6, &mut rng);
    let mask = Tensor::from_fn(&[1, 6, 6], |_| rng.gen_range(0.2..0.8));
    let report = grad_check(
        |_, xs| ops::sum_all(&fuse_var(&xs[0], &xs[1], &xs[2], &xs[3], &xs[4], 0.4)),
        &[i0, i1, ft0, ft1, mask],
        SUITE_TOL,
        POINTS + 30,
        3,
    );
    SuiteEntry {
        name: "fuse",
        report,
    }
}

fn check_channel_interp() -> SuiteEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let t = rand_tensor(&[7, 3, 3], &mut rng);
    // sampling positions away from integer kinks
    let qs: Vec<f64> = (0..6).map(|_| {
        let base = rng.gen_range(0..6) as f64;
        base + rng.gen_range(0.15..0.85)
    }).collect();
    let report = grad_check(
        |g, xs| {
            let mut acc: Option<Var<f64>> = None;
            for (i, &q0) in qs.iter().enumerate() {
                let q = ops::add_scalar(&ops::scale(&xs[1], 0.1), q0);
                let v = channel_interp_var(&xs[0], i / 3, i % 3, &q);
                acc = Some(match acc {
                    Some(a) => ops::add(&a, &v),
                    None => v,
                });
            }
            let _ = g;
            acc.unwrap()
        },
        &[t, Tensor::scalar(0.3)],
        SUITE_TOL,
        POINTS,
        4,
    );
    SuiteEntry {
        name: "channel_interp",
        report,
    }
}

/// Panics if any sampling position of the given layer configuration
/// lands within `1e-3` of an interpolation kink; the pinned seeds keep
/// the finite-difference probes on a single linear segment.
fn assert_kink_margin(params: &Params<f64>, prefix: &str, cfg: &GplConfig, h: usize, out_h: usize) {
    let net = offset_net_from_params(params, prefix);
    let inv_s = h as f64 / out_h as f64;
    for i in 0..out_h {
        let src = i as f64 * h as f64 / out_h as f64;
        let fy = src - src.floor();
        for j in 0..out_h {
            let srcx = j as f64 * h as f64 / out_h as f64;
            let fx = srcx - srcx.floor();
            let deltas = net.eval(fy, fx, inv_s);
            for (c, &d) in deltas.iter().enumerate() {
                let q = centered_channel_position(c, cfg.c_inter, cfg.c_out) + d;
                let margin = (q - q.round()).abs();
                assert!(
                    margin > 1e-3,
                    "offset takes q={q} within 1e-3 of a kink; choose another seed"
                );
            }
        }
    }
}

fn check_gpl_sample() -> SuiteEntry {
    let cfg = GplConfig {
        c_in: 2,
        c_inter: 7,
        c_out: 2,
        hidden: 6,
        offsets_enabled: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut p32 = Params::<f32>::new();
    init_gpl(&mut p32, "recon.gpl", &cfg, &mut rng);
    p32.jitter(&mut rng, 0.1);
    let params = p32.cast::<f64>();
    assert_kink_margin(&params, "recon.gpl", &cfg, 4, 9);

    let t = rand_tensor(&[7, 4, 4], &mut rng);
    let (names, param_tensors) = params_as_tensors(&params);
    let mut inputs = vec![t];
    inputs.extend(param_tensors);
    let names2 = names.clone();
    let report = grad_check(
        move |_, xs| {
            let bound = bound_from_leaves(&names2, xs, 1);
            ops::sum_all(&gpl_sample_var(&xs[0], &bound, "recon.gpl", 9, 9, &cfg).unwrap())
        },
        &inputs,
        SUITE_TOL,
        POINTS + 30,
        5,
    );
    SuiteEntry {
        name: "gpl_sample",
        report,
    }
}

fn check_sardb() -> SuiteEntry {
    let cfg = RdbConfig {
        channels: 4,
        layers: 2,
        growth: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut p32 = Params::<f32>::new();
    init_sardb(&mut p32, "sa", &cfg, &mut rng);
    p32.jitter(&mut rng, 0.1);
    let params = p32.cast::<f64>();

    let x = rand_tensor(&[4, 4, 4], &mut rng);
    let (names, param_tensors) = params_as_tensors(&params);
    let mut inputs = vec![x];
    inputs.extend(param_tensors);
    let report = grad_check(
        move |_, xs| {
            let bound = bound_from_leaves(&names, xs, 1);
            ops::sum_all(&sardb_forward_var(&bound, "sa", &cfg, &xs[0], 0.4))
        },
        &inputs,
        SUITE_TOL,
        POINTS + 30,
        6,
    );
    SuiteEntry {
        name: "sardb_forward",
        report,
    }
}

fn tiny_net_params(seed: u64) -> (NetConfig, Params<f64>) {
    let cfg = NetConfig {
        channels: 6,
        extractor_blocks: 1,
        trunk_blocks: 2,
        sardb_every: 2,
        rdb_layers: 2,
        growth: 3,
        gpl: GplConfig {
            c_in: 6,
            c_inter: 15,
            c_out: 6,
            hidden: 8,
            offsets_enabled: true,
        },
    };
    let mut p32 = init_net(&cfg, seed);
    p32.jitter(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xabcd), 0.05);
    (cfg, p32.cast::<f64>())
}

fn check_enhance() -> SuiteEntry {
    let (_, params) = tiny_net_params(107);
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let f0 = rand_tensor(&[6, 5, 5], &mut rng);
    let ft = rand_tensor(&[6, 5, 5], &mut rng);
    let f1 = rand_tensor(&[6, 5, 5], &mut rng);
    let ft0 = fractional_flow(5, 5, &mut rng);
    let ft1 = fractional_flow(5, 5, &mut rng);

    let enhance_names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with("enhance."))
        .cloned()
        .collect();
    let mut inputs = vec![f0, ft, f1, ft0, ft1];
    inputs.extend(enhance_names.iter().map(|n| params.get(n).unwrap().clone()));
    let report = grad_check(
        move |_, xs| {
            let bound = bound_from_leaves(&enhance_names, xs, 5);
            ops::sum_all(&enhance_var(&bound, &xs[0], &xs[1], &xs[2], &xs[3], &xs[4]))
        },
        &inputs,
        SUITE_TOL,
        POINTS + 30,
        7,
    );
    SuiteEntry {
        name: "enhance",
        report,
    }
}

fn check_reconstruct() -> SuiteEntry {
    let (cfg, params) = tiny_net_params(109);
    assert_kink_margin(&params, "recon.gpl", &cfg.gpl, 6, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let feats = rand_tensor(&[6, 6, 6], &mut rng);
    let reference = Tensor::from_fn(&[3, 6, 6], |_| rng.gen_range(0.0..1.0));

    let (names, param_tensors) = params_as_tensors(&params);
    let mut inputs = vec![feats, reference];
    inputs.extend(param_tensors);
    let cfg2 = cfg.clone();
    let report = grad_check(
        move |_, xs| {
            let bound = bound_from_leaves(&names, xs, 2);
            ops::sum_all(&reconstruct_var(&bound, &cfg2, &xs[0], &xs[1], 9, 9).unwrap())
        },
        &inputs,
        SUITE_TOL,
        POINTS + 30,
        8,
    );
    SuiteEntry {
        name: "reconstruct",
        report,
    }
}

fn check_charbonnier() -> SuiteEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let pred = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(0.0..1.0));
    let gt = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(0.0..1.0));
    let report = grad_check(
        |_, xs| charbonnier_var(&xs[0], &xs[1], 1e-6),
        &[pred, gt],
        SUITE_TOL,
        POINTS,
        9,
    );
    SuiteEntry {
        name: "charbonnier_l1",
        report,
    }
}

fn check_total_loss() -> SuiteEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(112);
    let pred = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(0.0..1.0));
    let gt = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(0.0..1.0));
    let cfg = LossConfig::<f64> {
        eps: 1e-6,
        lambda: 0.04,
        extractor: Some(std::rc::Rc::new(IdentityStages)),
    };
    let report = grad_check(
        move |_, xs| total_loss_var(&xs[0], &xs[1], &cfg),
        &[pred, gt],
        SUITE_TOL,
        POINTS,
        10,
    );
    SuiteEntry {
        name: "total_loss",
        report,
    }
}

fn check_predict_mask() -> SuiteEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(113);
    let mut p32 = Params::<f32>::new();
    crate::motion::init_finet(&mut p32, &mut rng);
    p32.jitter(&mut rng, 0.1);
    let params = p32.cast::<f64>();

    let w0 = Frame::from_fn(5, 5, |_, _, _| rng.gen_range(0.0..1.0));
    let w1 = Frame::from_fn(5, 5, |_, _, _| rng.gen_range(0.0..1.0));
    let ft0 = fractional_flow(5, 5, &mut rng);
    let ft1 = fractional_flow(5, 5, &mut rng);

    let (names, param_tensors) = params_as_tensors(&params);
    let mut inputs = vec![
        w0.tensor().cast::<f64>(),
        w1.tensor().cast::<f64>(),
        ft0,
        ft1,
    ];
    inputs.extend(param_tensors);
    let report = grad_check(
        move |_, xs| {
            let bound = bound_from_leaves(&names, xs, 4);
            let mask = crate::motion::predict_mask_var(&bound, &xs[0], &xs[1], &xs[2], &xs[3]);
            // through the fusion-style weighting so the clamp is exercised
            ops::sum_all(&ops::mul(&mask, &mask))
        },
        &inputs,
        SUITE_TOL,
        POINTS,
        11,
    );
    SuiteEntry {
        name: "predict_mask",
        report,
    }
}

/// Runs every gradient check in the suite.
pub fn run_full_suite() -> Vec<SuiteEntry> {
    vec![
        check_conv2d(),
        check_warp(),
        check_fuse(),
        check_predict_mask(),
        check_channel_interp(),
        check_gpl_sample(),
        check_sardb(),
        check_enhance(),
        check_reconstruct(),
        check_charbonnier(),
        check_total_loss(),
    ]
}
