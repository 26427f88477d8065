//! Full network assembly: feature extractor, feature-level enhancement,
//! and the reconstruction trunk with the generalized-pixelshuffle head.
//!
//! The forward pass takes two low-resolution frames and a
//! [`ScaleTimeQuery`] and produces the intermediate high-resolution
//! frame: interpolate a reference frame at time `t`, extract features
//! from both inputs and the reference, enhance the reference features
//! under flow guidance, then reconstruct at the requested output size
//! with a bicubic global residual.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    init_rdb, init_residual_block, init_sardb, rdb_forward_var, residual_block_var,
    sardb_forward_var, RdbConfig,
};
use crate::gpl::{gpl_sample_var, init_gpl, GplConfig};
use crate::imaging::{bicubic_resize_var, Frame};
use crate::motion::{finet_forward_var, init_finet, warp_var, FinetBackend, FlowField};
use crate::params::{bind, conv_fwd, init_conv, Bound, Params};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::{ops, Scalar};
use crate::{Error, Result};

/// Target time and output size of one synthesis query. The scale is
/// derived as `out_h / H`, never stored, so fractional scales need no
/// special casing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleTimeQuery {
    pub t: f64,
    pub out_h: usize,
    pub out_w: usize,
}

impl ScaleTimeQuery {
    pub fn new(t: f64, out_h: usize, out_w: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Usage(format!("query time t={t} outside [0, 1]")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Usage("query output size must be >= 1".into()));
        }
        Ok(Self { t, out_h, out_w })
    }
}

/// Whole-model architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Feature channels everywhere in the body.
    pub channels: usize,
    /// Residual blocks in the feature extractor.
    pub extractor_blocks: usize,
    /// Blocks in the reconstruction trunk.
    pub trunk_blocks: usize,
    /// Every K-th trunk block is scale-attentive.
    pub sardb_every: usize,
    /// Dense layers per trunk block.
    pub rdb_layers: usize,
    /// Growth channels per dense layer.
    pub growth: usize,
    pub gpl: GplConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            extractor_blocks: 5,
            trunk_blocks: 8,
            sardb_every: 4,
            rdb_layers: 4,
            growth: 32,
            gpl: GplConfig::default(),
        }
    }
}

impl NetConfig {
    /// A small configuration for CPU-scale experiments and tests.
    pub fn toy() -> Self {
        let channels = 24;
        Self {
            channels,
            extractor_blocks: 2,
            trunk_blocks: 4,
            sardb_every: 4,
            rdb_layers: 3,
            growth: 12,
            gpl: GplConfig {
                c_in: channels,
                c_inter: 5 * channels,
                c_out: channels,
                hidden: 32,
                offsets_enabled: true,
            },
        }
    }

    pub fn rdb(&self) -> RdbConfig {
        RdbConfig {
            channels: self.channels,
            layers: self.rdb_layers,
            growth: self.growth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.extractor_blocks == 0 || self.trunk_blocks == 0 {
            return Err(Error::Config("network dimensions must be >= 1".into()));
        }
        if self.sardb_every == 0 || self.trunk_blocks < self.sardb_every {
            return Err(Error::Config(format!(
                "trunk depth {} must be >= the scale-attentive stride {}",
                self.trunk_blocks, self.sardb_every
            )));
        }
        if self.gpl.c_in != self.channels || self.gpl.c_out != self.channels {
            return Err(Error::Config(
                "gpl c_in/c_out must match the body channel count".into(),
            ));
        }
        self.gpl.validate()
    }

    /// Canonical one-line form, hashed into checkpoints.
    pub fn describe(&self) -> String {
        format!(
            "c={} r={} d={} k={} l={} g={} ci={} co={} cint={} hid={} off={}",
            self.channels,
            self.extractor_blocks,
            self.trunk_blocks,
            self.sardb_every,
            self.rdb_layers,
            self.growth,
            self.gpl.c_in,
            self.gpl.c_out,
            self.gpl.c_inter,
            self.gpl.hidden,
            self.gpl.offsets_enabled,
        )
    }

    /// FNV-1a hash of [`Self::describe`], stored in checkpoints so a
    /// mismatched architecture is caught on load.
    pub fn config_hash(&self) -> u32 {
        let mut hash: u32 = 0x811c9dc5;
        for b in self.describe().bytes() {
            hash ^= b as u32;
            hash = hash.wrapping_mul(0x01000193);
        }
        hash
    }
}

/// Builds a freshly initialized parameter store for the configuration.
/// All heads are zero-initialized, so the whole model starts as the
/// identity around its bicubic residual.
pub fn init_net(cfg: &NetConfig, seed: u64) -> Params<f32> {
    let mut params = Params::new();
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.channels;

    init_finet(&mut params, rng);

    init_conv(&mut params, "extractor.head", c, 3, 3, rng, false);
    for i in 0..cfg.extractor_blocks {
        init_residual_block(&mut params, &format!("extractor.res{i}"), c, rng);
    }

    init_conv(&mut params, "enhance.motion.0", c, 4, 3, rng, false);
    init_conv(&mut params, "enhance.motion.1", c, c, 3, rng, false);
    init_conv(&mut params, "enhance.pred.0", c, 3 * c, 3, rng, false);
    init_conv(&mut params, "enhance.pred.1", c, c, 3, rng, false);
    init_conv(&mut params, "enhance.pred.2", c, c, 3, rng, false);
    init_conv(&mut params, "enhance.refine.0", c, 2 * c, 3, rng, false);
    // zero-initialized refinement head: E_t = F_t at initialization
    init_conv(&mut params, "enhance.refine.1", c, c, 3, rng, true);

    let rdb = cfg.rdb();
    for i in 1..=cfg.trunk_blocks {
        let prefix = format!("recon.block{i}");
        if i % cfg.sardb_every == 0 {
            init_sardb(&mut params, &prefix, &rdb, rng);
        } else {
            init_rdb(&mut params, &prefix, &rdb, rng);
        }
    }
    init_conv(&mut params, "recon.gff", c, cfg.trunk_blocks * c, 1, rng, false);
    init_conv(&mut params, "recon.widen", cfg.gpl.c_inter, c, 3, rng, false);
    init_gpl(&mut params, "recon.gpl", &cfg.gpl, rng);
    // zero-initialized head: reconstruction starts as the bicubic residual
    init_conv(&mut params, "recon.head", 3, cfg.gpl.c_out, 3, rng, true);

    params
}

/// Scalar parameter count of a configuration.
pub fn param_count(cfg: &NetConfig) -> usize {
    init_net(cfg, 0).scalar_count()
}

/// Feature extractor: one 3→C conv followed by residual blocks.
pub fn extract_features_var<T: Scalar>(bound: &Bound<T>, cfg: &NetConfig, frame: &Var<T>) -> Var<T> {
    let mut x = conv_fwd(bound, "extractor.head", frame, 1);
    for i in 0..cfg.extractor_blocks {
        x = residual_block_var(bound, &format!("extractor.res{i}"), &x);
    }
    x
}

/// Feature-level enhancement: motion features from the two flows guide
/// the fusion of the endpoint features, and the result refines the
/// reference features residually.
pub fn enhance_var<T: Scalar>(
    bound: &Bound<T>,
    f0: &Var<T>,
    ft: &Var<T>,
    f1: &Var<T>,
    ft0: &Var<T>,
    ft1: &Var<T>,
) -> Var<T> {
    let flows = ops::concat_channels(&[ft0, ft1]);
    let m = ops::relu(&conv_fwd(bound, "enhance.motion.0", &flows, 1));
    let m = ops::relu(&conv_fwd(bound, "enhance.motion.1", &m, 1));

    let w0 = warp_var(f0, ft0);
    let w1 = warp_var(f1, ft1);
    let cat = ops::concat_channels(&[&w0, &w1, &m]);
    let p = ops::relu(&conv_fwd(bound, "enhance.pred.0", &cat, 1));
    let p = ops::relu(&conv_fwd(bound, "enhance.pred.1", &p, 1));
    let predicted = conv_fwd(bound, "enhance.pred.2", &p, 1);

    let cat = ops::concat_channels(&[ft, &predicted]);
    let r = ops::relu(&conv_fwd(bound, "enhance.refine.0", &cat, 1));
    let r = conv_fwd(bound, "enhance.refine.1", &r, 1);
    ops::add(ft, &r)
}

/// Reconstruction: trunk of dense blocks (scale-attentive every K-th),
/// global feature fusion, widen, generalized pixelshuffle to the target
/// size, a zero-initialized RGB head, and the bicubic global residual.
pub fn reconstruct_var<T: Scalar>(
    bound: &Bound<T>,
    cfg: &NetConfig,
    features: &Var<T>,
    reference: &Var<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Var<T>> {
    let shape = features.shape();
    let (h, w) = (shape[1], shape[2]);
    let sy = out_h as f64 / h as f64;
    let sx = out_w as f64 / w as f64;
    if (sy - sx).abs() > 1e-6 {
        return Err(Error::Usage(format!(
            "non-uniform scale: {out_h}/{h} vs {out_w}/{w}"
        )));
    }
    let inv_s = 1.0 / sy;
    let rdb = cfg.rdb();

    let mut x = features.clone();
    let mut block_outputs = Vec::with_capacity(cfg.trunk_blocks);
    for i in 1..=cfg.trunk_blocks {
        let prefix = format!("recon.block{i}");
        x = if i % cfg.sardb_every == 0 {
            sardb_forward_var(bound, &prefix, &rdb, &x, inv_s)
        } else {
            rdb_forward_var(bound, &prefix, &rdb, &x)
        };
        block_outputs.push(x.clone());
    }
    let refs: Vec<&Var<T>> = block_outputs.iter().collect();
    let fused = conv_fwd(bound, "recon.gff", &ops::concat_channels(&refs), 0);
    let trunk = ops::add(features, &fused);

    let widened = conv_fwd(bound, "recon.widen", &trunk, 1);
    let upsampled = gpl_sample_var(&widened, bound, "recon.gpl", out_h, out_w, &cfg.gpl)?;
    let rgb = conv_fwd(bound, "recon.head", &upsampled, 1);
    let residual = bicubic_resize_var(reference, out_h, out_w)?;
    Ok(ops::add(&rgb, &residual))
}

/// Tape-level end-to-end pass; training drives this directly.
pub fn forward_var<T: Scalar>(
    graph: &Graph<T>,
    bound: &Bound<T>,
    cfg: &NetConfig,
    i0: &Frame,
    i1: &Frame,
    query: &ScaleTimeQuery,
    backend: &FinetBackend,
) -> Result<(Var<T>, FlowField, FlowField)> {
    if query.out_h < i0.height() || query.out_w < i0.width() {
        return Err(Error::Usage(format!(
            "query output {}x{} smaller than input {}x{}",
            query.out_h,
            query.out_w,
            i0.height(),
            i0.width()
        )));
    }
    let (reference, ft0, ft1) = finet_forward_var(bound, graph, i0, i1, query.t, backend)?;
    let f0 = extract_features_var(bound, cfg, &i0.to_var(graph));
    let ft_feat = extract_features_var(bound, cfg, &reference);
    let f1 = extract_features_var(bound, cfg, &i1.to_var(graph));
    let ft0v = ft0.to_var(graph);
    let ft1v = ft1.to_var(graph);
    let enhanced = enhance_var(bound, &f0, &ft_feat, &f1, &ft0v, &ft1v);
    let out = reconstruct_var(bound, cfg, &enhanced, &reference, query.out_h, query.out_w)?;
    Ok((out, ft0, ft1))
}

/// Synthesizes the intermediate high-resolution frame. Output values
/// are clamped to `[0, 1]` (inference only; training reads the tape
/// node before clamping).
pub fn forward(
    i0: &Frame,
    i1: &Frame,
    query: &ScaleTimeQuery,
    cfg: &NetConfig,
    params: &Params<f32>,
    backend: &FinetBackend,
) -> Result<Frame> {
    cfg.validate()?;
    let graph: Graph<f32> = Graph::new();
    let bound = bind(&graph, params);
    let (out, _, _) = forward_var(&graph, &bound, cfg, i0, i1, query, backend)?;
    Frame::from_clamped(out.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_frame(h: usize, w: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::from_fn(h, w, |_, _, _| rng.gen_range(0.0..1.0))
    }

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            channels: 8,
            extractor_blocks: 1,
            trunk_blocks: 2,
            sardb_every: 2,
            rdb_layers: 2,
            growth: 4,
            gpl: GplConfig {
                c_in: 8,
                c_inter: 20,
                c_out: 8,
                hidden: 8,
                offsets_enabled: true,
            },
        }
    }

    #[test]
    fn extractor_output_shape_and_determinism() {
        let cfg = tiny_cfg();
        let params = init_net(&cfg, 0).cast::<f64>();
        let f = random_frame(10, 12, 1);
        let run = || {
            let g: Graph<f64> = Graph::new();
            let bound = bind(&g, &params);
            extract_features_var(&bound, &cfg, &f.to_var(&g)).value()
        };
        let a = run();
        assert_eq!(a.shape(), &[8, 10, 12]);
        assert_eq!(a.data(), run().data());
    }

    #[test]
    fn enhance_is_residual_identity_at_init() {
        // zero flows, identical features, zero-initialized refinement
        // head: the enhanced features equal the reference features
        let cfg = tiny_cfg();
        let params = init_net(&cfg, 2).cast::<f64>();
        let g: Graph<f64> = Graph::new();
        let bound = bind(&g, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feat = g.constant(crate::tensor::Tensor::from_fn(&[8, 6, 6], |_| {
            rng.gen_range(-1.0..1.0)
        }));
        let zero_flow = FlowField::zeros(6, 6).to_var(&g);
        let e = enhance_var(&bound, &feat, &feat, &feat, &zero_flow, &zero_flow);
        assert_eq!(e.value().data(), feat.value().data());
    }

    #[test]
    fn reconstruct_at_init_is_the_bicubic_residual() {
        let cfg = tiny_cfg();
        let params = init_net(&cfg, 4).cast::<f64>();
        let g: Graph<f64> = Graph::new();
        let bound = bind(&g, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats = g.constant(crate::tensor::Tensor::from_fn(&[8, 8, 8], |_| {
            rng.gen_range(-1.0..1.0)
        }));
        let reference = random_frame(8, 8, 6);
        let refv = reference.to_var(&g);
        let out = reconstruct_var(&bound, &cfg, &feats, &refv, 20, 20).unwrap();
        let want = crate::imaging::bicubic_resize_tensor(&reference.tensor().cast::<f64>(), 20, 20)
            .unwrap();
        assert!(out.value().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn reconstruct_rejects_non_uniform_scale() {
        let cfg = tiny_cfg();
        let params = init_net(&cfg, 7).cast::<f64>();
        let g: Graph<f64> = Graph::new();
        let bound = bind(&g, &params);
        let feats = g.constant(crate::tensor::Tensor::zeros(&[8, 8, 8]));
        let refv = random_frame(8, 8, 8).to_var(&g);
        assert!(matches!(
            reconstruct_var(&bound, &cfg, &feats, &refv, 16, 24),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn boundary_time_identity_at_initialization() {
        let cfg = tiny_cfg();
        let params = init_net(&cfg, 9);
        let i0 = random_frame(16, 16, 10);
        let i1 = random_frame(16, 16, 11);
        let q = ScaleTimeQuery::new(0.0, 16, 16).unwrap();
        let out = forward(&i0, &i1, &q, &cfg, &params, &FinetBackend::classical()).unwrap();
        assert!(out.max_abs_diff(&i0) <= 1e-5, "{}", out.max_abs_diff(&i0));

        let q1 = ScaleTimeQuery::new(1.0, 16, 16).unwrap();
        let out1 = forward(&i0, &i1, &q1, &cfg, &params, &FinetBackend::classical()).unwrap();
        assert!(out1.max_abs_diff(&i1) <= 1e-5);
    }

    #[test]
    fn output_dims_follow_the_query_for_fractional_scales() {
        let cfg = tiny_cfg();
        let params = init_net(&cfg, 12);
        let i0 = random_frame(16, 16, 13);
        let i1 = random_frame(16, 16, 14);
        for s in [1.5f64, 2.5, 3.5] {
            let side = (16.0 * s) as usize;
            let q = ScaleTimeQuery::new(0.5, side, side).unwrap();
            let out = forward(&i0, &i1, &q, &cfg, &params, &FinetBackend::classical()).unwrap();
            assert_eq!(out.height(), side);
            assert_eq!(out.width(), side);
            assert!(out.tensor().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn forward_backward_stay_finite_across_scales() {
        let cfg = tiny_cfg();
        let params = init_net(&cfg, 15);
        // move heads off zero so gradients flow everywhere
        let mut params = params;
        params.jitter(&mut ChaCha8Rng::seed_from_u64(16), 0.02);
        let p64 = params.cast::<f64>();
        let i0 = random_frame(32, 32, 17);
        let i1 = random_frame(32, 32, 18);
        let gt = |h: usize, w: usize| random_frame(h, w, 19);
        for s in [1.0f64, 1.5, 2.0, 3.0, 4.0] {
            let side = (32.0 * s).round() as usize;
            let q = ScaleTimeQuery::new(0.375, side, side).unwrap();
            let g: Graph<f64> = Graph::new();
            let bound = bind(&g, &p64);
            let (out, _, _) =
                forward_var(&g, &bound, &cfg, &i0, &i1, &q, &FinetBackend::classical()).unwrap();
            let target = gt(side, side).to_var(&g);
            let loss = crate::losses::charbonnier_var(&out, &target, 1e-6);
            assert!(loss.item().is_finite(), "loss at s={s}");
            let mut grads = g.backward(&loss);
            let collected = crate::params::collect_grads(&mut grads, &bound);
            for (name, grad) in &collected {
                assert!(grad.all_finite(), "non-finite gradient in {name} at s={s}");
            }
        }
    }

    #[test]
    fn default_parameter_count_is_stable() {
        // regression guard for the default architecture
        let count = param_count(&NetConfig::default());
        assert_eq!(count, PARAM_COUNT_DEFAULT);
    }

    /// Frozen scalar parameter count of `NetConfig::default()`.
    const PARAM_COUNT_DEFAULT: usize = 2_152_918;
}
