//! Reusable network blocks: residual block, residual dense block with
//! local feature fusion, scale-aware convolution, and the
//! scale-attentive residual dense block.
//!
//! Every block preserves `[C, H, W]` and is the identity map at its
//! default initialization (residual and fusion heads start at zero), so
//! the assembled network trains from a near-identity start.

use rand_chacha::ChaCha8Rng;

use crate::params::{conv_fwd, init_conv, Bound, Params};
use crate::tensor::graph::Var;
use crate::tensor::{ops, Scalar, Tensor};

/// Residual dense block geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct RdbConfig {
    /// Feature channels carried between blocks.
    pub channels: usize,
    /// Dense conv layers per block.
    pub layers: usize,
    /// Channels added by each dense layer.
    pub growth: usize,
}

impl Default for RdbConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            layers: 4,
            growth: 32,
        }
    }
}

/// Hidden width of the scale conditioner MLP.
const FILM_HIDDEN: usize = 16;

// ---------------------------------------------------------------------------
// residual block
// ---------------------------------------------------------------------------

pub fn init_residual_block(params: &mut Params<f32>, prefix: &str, channels: usize, rng: &mut ChaCha8Rng) {
    init_conv(params, &format!("{prefix}.conv1"), channels, channels, 3, rng, false);
    init_conv(params, &format!("{prefix}.conv2"), channels, channels, 3, rng, true);
}

/// `x + conv3x3(relu(conv3x3(x)))`; the second conv starts at zero.
pub fn residual_block_var<T: Scalar>(bound: &Bound<T>, prefix: &str, x: &Var<T>) -> Var<T> {
    let inner = ops::relu(&conv_fwd(bound, &format!("{prefix}.conv1"), x, 1));
    let inner = conv_fwd(bound, &format!("{prefix}.conv2"), &inner, 1);
    ops::add(x, &inner)
}

// ---------------------------------------------------------------------------
// residual dense block
// ---------------------------------------------------------------------------

pub fn init_rdb(params: &mut Params<f32>, prefix: &str, cfg: &RdbConfig, rng: &mut ChaCha8Rng) {
    for i in 0..cfg.layers {
        init_conv(
            params,
            &format!("{prefix}.dense.{i}"),
            cfg.growth,
            cfg.channels + i * cfg.growth,
            3,
            rng,
            false,
        );
    }
    init_conv(
        params,
        &format!("{prefix}.lff"),
        cfg.channels,
        cfg.channels + cfg.layers * cfg.growth,
        1,
        rng,
        true,
    );
}

/// Dense layers plus local feature fusion, *before* the local residual.
/// The scale-attentive block reuses this pre-residual output.
fn rdb_fused<T: Scalar>(bound: &Bound<T>, prefix: &str, cfg: &RdbConfig, x: &Var<T>) -> Var<T> {
    let mut features: Vec<Var<T>> = vec![x.clone()];
    for i in 0..cfg.layers {
        let cat_refs: Vec<&Var<T>> = features.iter().collect();
        let cat = if cat_refs.len() == 1 {
            features[0].clone()
        } else {
            ops::concat_channels(&cat_refs)
        };
        let grown = ops::relu(&conv_fwd(bound, &format!("{prefix}.dense.{i}"), &cat, 1));
        features.push(grown);
    }
    let cat_refs: Vec<&Var<T>> = features.iter().collect();
    let cat = ops::concat_channels(&cat_refs);
    conv_fwd(bound, &format!("{prefix}.lff"), &cat, 0)
}

/// Residual dense block: dense layers, 1×1 local feature fusion, local
/// residual. Identity at initialization (the fusion conv starts at zero).
pub fn rdb_forward_var<T: Scalar>(bound: &Bound<T>, prefix: &str, cfg: &RdbConfig, x: &Var<T>) -> Var<T> {
    ops::add(x, &rdb_fused(bound, prefix, cfg, x))
}

// ---------------------------------------------------------------------------
// scale-aware convolution
// ---------------------------------------------------------------------------

pub fn init_scale_aware_conv(params: &mut Params<f32>, prefix: &str, channels: usize, rng: &mut ChaCha8Rng) {
    init_conv(params, &format!("{prefix}.conv"), channels, channels, 3, rng, false);
    init_conv(params, &format!("{prefix}.film.0"), FILM_HIDDEN, 1, 1, rng, false);
    // zero-initialized conditioner: gamma = beta = 0, so the modulation
    // is the identity for every scale
    init_conv(params, &format!("{prefix}.film.1"), 2 * channels, FILM_HIDDEN, 1, rng, true);
}

/// FiLM-style scale conditioning: `(1 + γ(1/s)) ⊙ conv3x3(x) + β(1/s)`,
/// with per-channel gain and bias produced by a tiny MLP on `1/s`.
pub fn scale_aware_conv_var<T: Scalar>(
    bound: &Bound<T>,
    prefix: &str,
    x: &Var<T>,
    inv_s: f64,
) -> Var<T> {
    let channels = x.shape()[0];
    let y = conv_fwd(bound, &format!("{prefix}.conv"), x, 1);
    let s_in = x.graph().constant(Tensor::new(&[1, 1, 1], vec![T::from_f64(inv_s)]).expect("scalar"));
    let hidden = ops::relu(&conv_fwd(bound, &format!("{prefix}.film.0"), &s_in, 0));
    let gain_bias = conv_fwd(bound, &format!("{prefix}.film.1"), &hidden, 0);
    let gamma = ops::slice_channels(&gain_bias, 0, channels);
    let beta = ops::slice_channels(&gain_bias, channels, 2 * channels);
    let gained = ops::mul_bcast_vec(&y, &ops::add_scalar(&gamma, 1.0));
    ops::add_bcast_vec(&gained, &beta)
}

// ---------------------------------------------------------------------------
// scale-attentive residual dense block
// ---------------------------------------------------------------------------

pub fn init_sardb(params: &mut Params<f32>, prefix: &str, cfg: &RdbConfig, rng: &mut ChaCha8Rng) {
    for i in 0..cfg.layers {
        init_conv(
            params,
            &format!("{prefix}.dense.{i}"),
            cfg.growth,
            cfg.channels + i * cfg.growth,
            3,
            rng,
            false,
        );
    }
    init_conv(
        params,
        &format!("{prefix}.lff"),
        cfg.channels,
        cfg.channels + cfg.layers * cfg.growth,
        1,
        rng,
        true,
    );
    init_conv(params, &format!("{prefix}.spatial"), 1, cfg.channels, 3, rng, false);
    init_conv(params, &format!("{prefix}.channel"), cfg.channels, cfg.channels, 1, rng, false);
    // the scale branch conv starts at zero so the block is the identity
    init_conv(params, &format!("{prefix}.scale.conv"), cfg.channels, cfg.channels, 3, rng, true);
    init_conv(params, &format!("{prefix}.scale.film.0"), FILM_HIDDEN, 1, 1, rng, false);
    init_conv(
        params,
        &format!("{prefix}.scale.film.1"),
        2 * cfg.channels,
        FILM_HIDDEN,
        1,
        rng,
        true,
    );
}

/// Scale-attentive residual dense block: the fused features `F` are
/// converted into scale-dependent features by a scale-aware conv,
/// modulated jointly by a spatial and a channel attention map, merged
/// additively with the plain branch, then wrapped in the local residual:
/// `out = x + F + M_s ⊙ M_c ⊙ F_d`.
pub fn sardb_forward_var<T: Scalar>(
    bound: &Bound<T>,
    prefix: &str,
    cfg: &RdbConfig,
    x: &Var<T>,
    inv_s: f64,
) -> Var<T> {
    let fused = rdb_fused(bound, prefix, cfg, x);
    let m_s = ops::sigmoid(&conv_fwd(bound, &format!("{prefix}.spatial"), &fused, 1));
    let pooled = ops::spatial_mean(&fused);
    let m_c = ops::sigmoid(&conv_fwd(bound, &format!("{prefix}.channel"), &pooled, 0));
    let f_d = scale_aware_conv_var(bound, &format!("{prefix}.scale"), &fused, inv_s);
    let modulated = ops::mul_bcast_chan(&ops::mul_bcast_vec(&f_d, &m_c), &m_s);
    ops::add(x, &ops::add(&fused, &modulated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bind;
    use crate::tensor::gradcheck::grad_check;
    use crate::tensor::graph::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn small_cfg() -> RdbConfig {
        RdbConfig {
            channels: 6,
            layers: 2,
            growth: 4,
        }
    }

    fn run<T, F>(params: &Params<f64>, f: F) -> Tensor<f64>
    where
        F: FnOnce(&Graph<f64>, &Bound<f64>) -> Var<f64>,
        T: Scalar,
    {
        let g = Graph::new();
        let bound = bind(&g, params);
        f(&g, &bound).value()
    }

    #[test]
    fn residual_block_is_identity_at_init() {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_residual_block(&mut params, "rb", 5, &mut rng);
        let p64 = params.cast::<f64>();
        let x = rand_tensor(&[5, 6, 6], 2);
        let y = run::<f64, _>(&p64, |g, b| residual_block_var(b, "rb", &g.constant(x.clone())));
        assert_eq!(y.shape(), &[5, 6, 6]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn residual_block_matches_composed_convolutions() {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_residual_block(&mut params, "rb", 4, &mut rng);
        params.jitter(&mut rng, 0.1);
        let p64 = params.cast::<f64>();
        let x = rand_tensor(&[4, 5, 5], 4);

        let y = run::<f64, _>(&p64, |g, b| residual_block_var(b, "rb", &g.constant(x.clone())));

        let c1 = ops::conv2d_plain(
            &x,
            p64.get("rb.conv1.weight").unwrap(),
            p64.get("rb.conv1.bias").unwrap(),
            1,
            1,
            ops::PadMode::Zero,
        )
        .unwrap()
        .map(|v| v.max(0.0));
        let c2 = ops::conv2d_plain(
            &c1,
            p64.get("rb.conv2.weight").unwrap(),
            p64.get("rb.conv2.bias").unwrap(),
            1,
            1,
            ops::PadMode::Zero,
        )
        .unwrap();
        let want = Tensor::from_fn(x.shape(), |i| x.data()[i] + c2.data()[i]);
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn rdb_is_identity_at_init_and_preserves_shape() {
        let cfg = small_cfg();
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        init_rdb(&mut params, "rdb", &cfg, &mut rng);
        let p64 = params.cast::<f64>();
        let x = rand_tensor(&[6, 7, 7], 6);
        let y = run::<f64, _>(&p64, |g, b| rdb_forward_var(b, "rdb", &cfg, &g.constant(x.clone())));
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn single_layer_rdb_matches_hand_composition() {
        let cfg = RdbConfig {
            channels: 3,
            layers: 1,
            growth: 2,
        };
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        init_rdb(&mut params, "rdb", &cfg, &mut rng);
        params.jitter(&mut rng, 0.1);
        let p64 = params.cast::<f64>();
        let x = rand_tensor(&[3, 4, 4], 8);

        let y = run::<f64, _>(&p64, |g, b| rdb_forward_var(b, "rdb", &cfg, &g.constant(x.clone())));

        let grown = ops::conv2d_plain(
            &x,
            p64.get("rdb.dense.0.weight").unwrap(),
            p64.get("rdb.dense.0.bias").unwrap(),
            1,
            1,
            ops::PadMode::Zero,
        )
        .unwrap()
        .map(|v| v.max(0.0));
        // concat [x, grown] -> 5 channels -> 1x1 lff back to 3
        let mut cat_data = x.data().to_vec();
        cat_data.extend_from_slice(grown.data());
        let cat = Tensor::new(&[5, 4, 4], cat_data).unwrap();
        let lff = ops::conv2d_plain(
            &cat,
            p64.get("rdb.lff.weight").unwrap(),
            p64.get("rdb.lff.bias").unwrap(),
            1,
            0,
            ops::PadMode::Zero,
        )
        .unwrap();
        let want = Tensor::from_fn(x.shape(), |i| x.data()[i] + lff.data()[i]);
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn scale_aware_conv_ignores_scale_at_init_and_is_deterministic() {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        init_scale_aware_conv(&mut params, "sc", 4, &mut rng);
        let p64 = params.cast::<f64>();
        let x = rand_tensor(&[4, 5, 5], 10);

        let plain = ops::conv2d_plain(
            &x,
            p64.get("sc.conv.weight").unwrap(),
            p64.get("sc.conv.bias").unwrap(),
            1,
            1,
            ops::PadMode::Zero,
        )
        .unwrap();
        for inv_s in [1.0, 0.5, 0.25] {
            let y = run::<f64, _>(&p64, |g, b| {
                scale_aware_conv_var(b, "sc", &g.constant(x.clone()), inv_s)
            });
            assert!(y.max_abs_diff(&plain) < 1e-12, "inv_s = {inv_s}");
        }
        let a = run::<f64, _>(&p64, |g, b| scale_aware_conv_var(b, "sc", &g.constant(x.clone()), 0.4));
        let b2 = run::<f64, _>(&p64, |g, b| scale_aware_conv_var(b, "sc", &g.constant(x.clone()), 0.4));
        assert_eq!(a.data(), b2.data());
    }

    #[test]
    fn scale_aware_conv_gradient_passes() {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        init_scale_aware_conv(&mut params, "sc", 3, &mut rng);
        params.jitter(&mut rng, 0.1);
        let p64 = params.cast::<f64>();
        let x = rand_tensor(&[3, 4, 4], 12);
        let names: Vec<String> = p64.names().cloned().collect();
        let tensors: Vec<Tensor<f64>> = std::iter::once(x.clone())
            .chain(names.iter().map(|n| p64.get(n).unwrap().clone()))
            .collect();
        let report = grad_check(
            |_, xs| {
                let mut map = std::collections::BTreeMap::new();
                for (i, n) in names.iter().enumerate() {
                    map.insert(n.clone(), xs[i + 1].clone());
                }
                let bound = Bound::from_map(map);
                ops::sum_all(&scale_aware_conv_var(&bound, "sc", &xs[0], 0.4))
            },
            &tensors,
            1e-6,
            120,
            13,
        );
        assert!(report.pass, "{report}");
    }

    #[test]
    fn sardb_is_identity_at_init() {
        let cfg = small_cfg();
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        init_sardb(&mut params, "sa", &cfg, &mut rng);
        let p64 = params.cast::<f64>();
        let x = rand_tensor(&[6, 6, 6], 15);
        let y = run::<f64, _>(&p64, |g, b| {
            sardb_forward_var(b, "sa", &cfg, &g.constant(x.clone()), 0.5)
        });
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn sardb_attention_maps_stay_in_the_sigmoid_range() {
        let cfg = small_cfg();
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        init_sardb(&mut params, "sa", &cfg, &mut rng);
        params.jitter(&mut rng, 0.2);
        let p64 = params.cast::<f64>();
        let x = rand_tensor(&[6, 6, 6], 17);

        let g = Graph::new();
        let bound = bind(&g, &p64);
        let xv = g.constant(x);
        let fused = rdb_fused(&bound, "sa", &cfg, &xv);
        let m_s = ops::sigmoid(&conv_fwd(&bound, "sa.spatial", &fused, 1));
        let m_c = ops::sigmoid(&conv_fwd(&bound, "sa.channel", &ops::spatial_mean(&fused), 0));
        assert_eq!(m_s.shape(), vec![1, 6, 6]);
        assert_eq!(m_c.shape(), vec![6, 1, 1]);
        for &v in m_s.value().data().iter().chain(m_c.value().data()) {
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn sardb_scale_independence_at_init_and_sensitivity_after_gamma_nudge() {
        let cfg = small_cfg();
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        init_sardb(&mut params, "sa", &cfg, &mut rng);
        // non-degenerate features and scale branch, conditioner still zero
        for name in ["sa.lff.weight", "sa.scale.conv.weight"] {
            for v in params.get_mut(name).unwrap().data_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
        let p64 = params.cast::<f64>();
        let x = rand_tensor(&[6, 6, 6], 19);
        let out = |p: &Params<f64>, inv_s: f64| {
            let g = Graph::new();
            let bound = bind(&g, p);
            sardb_forward_var(&bound, "sa", &cfg, &g.constant(x.clone()), inv_s).value()
        };
        // conditioner zero-init: identical outputs for every scale
        assert_eq!(out(&p64, 0.5).data(), out(&p64, 0.25).data());

        // nudge gamma on channel 2 through the conditioner weights
        let mut nudged = p64.clone();
        {
            let w = nudged.get_mut("sa.scale.film.1.weight").unwrap();
            for h in 0..FILM_HIDDEN {
                w.data_mut()[(2 * FILM_HIDDEN) + h] = 0.1;
            }
        }
        let at2 = out(&nudged, 0.5);
        let at4 = out(&nudged, 0.25);
        let plane = 36;
        let diff_on_2: f64 = (0..plane)
            .map(|i| (at2.data()[2 * plane + i] - at4.data()[2 * plane + i]).abs())
            .sum();
        assert!(diff_on_2 > 0.0, "channel 2 must react to the scale");
        for c in [0usize, 1, 3, 4, 5] {
            for i in 0..plane {
                assert_eq!(at2.data()[c * plane + i], at4.data()[c * plane + i]);
            }
        }
    }

    #[test]
    fn sardb_gradient_passes_end_to_end() {
        let cfg = RdbConfig {
            channels: 4,
            layers: 2,
            growth: 3,
        };
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        init_sardb(&mut params, "sa", &cfg, &mut rng);
        params.jitter(&mut rng, 0.1);
        let p64 = params.cast::<f64>();
        let x = rand_tensor(&[4, 4, 4], 21);
        let names: Vec<String> = p64.names().cloned().collect();
        let tensors: Vec<Tensor<f64>> = std::iter::once(x.clone())
            .chain(names.iter().map(|n| p64.get(n).unwrap().clone()))
            .collect();
        let report = grad_check(
            |_, xs| {
                let mut map = std::collections::BTreeMap::new();
                for (i, n) in names.iter().enumerate() {
                    map.insert(n.clone(), xs[i + 1].clone());
                }
                let bound = Bound::from_map(map);
                ops::sum_all(&sardb_forward_var(&bound, "sa", &cfg, &xs[0], 0.4))
            },
            &tensors,
            1e-6,
            150,
            22,
        );
        assert!(report.pass, "{report}");
    }
}
