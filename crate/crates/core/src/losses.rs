//! Training objective: Charbonnier-smoothed L1, an optional pluggable
//! perceptual term, and their λ-weighted sum.

use std::rc::Rc;

use crate::imaging::Frame;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::{ops, Scalar};
use crate::{Error, Result};

/// Charbonnier smoothing constant.
pub const CHARBONNIER_EPS: f64 = 1e-6;

/// Default perceptual weight.
pub const DEFAULT_LAMBDA: f64 = 0.04;

/// A pluggable multi-stage feature extractor for the perceptual loss.
/// The reference uses three stages of a pretrained classifier; that is
/// out of scope here, so implementations plug in anything with three
/// stages (the identity extractor exists to test the loss structure).
pub trait FeatureStages<T: Scalar> {
    fn stages(&self, x: &Var<T>) -> Vec<Var<T>>;
}

/// Identity feature extractor: every stage is the input itself.
pub struct IdentityStages;

impl<T: Scalar> FeatureStages<T> for IdentityStages {
    fn stages(&self, x: &Var<T>) -> Vec<Var<T>> {
        vec![x.clone(), x.clone(), x.clone()]
    }
}

/// Loss weights plus the optional perceptual extractor.
#[derive(Clone)]
pub struct LossConfig<T: Scalar> {
    pub eps: f64,
    pub lambda: f64,
    pub extractor: Option<Rc<dyn FeatureStages<T>>>,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        Self {
            eps: CHARBONNIER_EPS,
            lambda: DEFAULT_LAMBDA,
            extractor: None,
        }
    }
}

/// Charbonnier-smoothed L1 on the tape:
/// `mean(sqrt((pred - gt)^2 + eps^2))`.
pub fn charbonnier_var<T: Scalar>(pred: &Var<T>, gt: &Var<T>, eps: f64) -> Var<T> {
    let diff = ops::sub(pred, gt);
    ops::mean_all(&ops::sqrt(&ops::add_scalar(&ops::mul(&diff, &diff), eps * eps)))
}

/// Perceptual distance on the tape: per-stage mean squared feature
/// difference, summed over the three stages. Returns zero (with a
/// logged notice) when no extractor is configured.
pub fn perceptual_var<T: Scalar>(
    pred: &Var<T>,
    gt: &Var<T>,
    extractor: Option<&dyn FeatureStages<T>>,
) -> Var<T> {
    let Some(phi) = extractor else {
        log::warn!("perceptual loss requested without a feature extractor; contributing 0");
        return pred
            .graph()
            .constant(crate::tensor::Tensor::scalar(T::ZERO));
    };
    let sp = phi.stages(pred);
    let sg = phi.stages(gt);
    assert_eq!(sp.len(), 3, "feature extractor must provide 3 stages");
    let mut total: Option<Var<T>> = None;
    for (p, g) in sp.iter().zip(&sg) {
        let d = ops::sub(p, g);
        let stage = ops::mean_all(&ops::mul(&d, &d));
        total = Some(match total {
            Some(t) => ops::add(&t, &stage),
            None => stage,
        });
    }
    total.expect("three stages")
}

/// Combined objective on the tape: `charbonnier + λ · perceptual`.
pub fn total_loss_var<T: Scalar>(pred: &Var<T>, gt: &Var<T>, cfg: &LossConfig<T>) -> Var<T> {
    let l1 = charbonnier_var(pred, gt, cfg.eps);
    if cfg.lambda == 0.0 {
        return l1;
    }
    let lp = perceptual_var(pred, gt, cfg.extractor.as_deref());
    ops::add(&l1, &ops::scale(&lp, cfg.lambda))
}

fn frame_pair_to_vars<T: Scalar>(pred: &Frame, gt: &Frame) -> Result<(Graph<T>, Var<T>, Var<T>)> {
    if pred.tensor().shape() != gt.tensor().shape() {
        return Err(Error::Usage(format!(
            "loss shapes differ: {:?} vs {:?}",
            pred.tensor().shape(),
            gt.tensor().shape()
        )));
    }
    let g: Graph<T> = Graph::new();
    let p = pred.to_var(&g);
    let t = gt.to_var(&g);
    Ok((g, p, t))
}

/// Charbonnier-smoothed L1 between frames.
pub fn charbonnier_l1(pred: &Frame, gt: &Frame) -> Result<f64> {
    let (_g, p, t) = frame_pair_to_vars::<f64>(pred, gt)?;
    Ok(charbonnier_var(&p, &t, CHARBONNIER_EPS).item())
}

/// Perceptual distance between frames under an optional extractor.
pub fn perceptual(pred: &Frame, gt: &Frame, extractor: Option<&dyn FeatureStages<f64>>) -> Result<f64> {
    let (_g, p, t) = frame_pair_to_vars::<f64>(pred, gt)?;
    Ok(perceptual_var(&p, &t, extractor).item())
}

/// Combined objective between frames.
pub fn total_loss(pred: &Frame, gt: &Frame, cfg: &LossConfig<f64>) -> Result<f64> {
    let (_g, p, t) = frame_pair_to_vars::<f64>(pred, gt)?;
    Ok(total_loss_var(&p, &t, cfg).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::from_fn(6, 6, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn equal_frames_cost_exactly_eps() {
        let f = random_frame(1);
        assert!((charbonnier_l1(&f, &f).unwrap() - CHARBONNIER_EPS).abs() < 1e-18);
    }

    #[test]
    fn small_difference_matches_closed_form() {
        // one element off by 0.003: that element contributes
        // sqrt(9e-6 + 1e-12), the rest contribute eps
        let a = Frame::from_fn(1, 1, |_, _, _| 0.5);
        let b = Frame::from_fn(1, 1, |c, _, _| if c == 0 { 0.503 } else { 0.5 });
        let got = charbonnier_l1(&a, &b).unwrap();
        let d = 0.503f32 as f64 - 0.5; // frames quantize to f32
        let want = ((d * d + 1e-12).sqrt() + 2.0 * 1e-6) / 3.0;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((got - 0.0010000001).abs() < 1e-5); // ~ diff/3 for diff >> eps
    }

    #[test]
    fn charbonnier_rejects_shape_mismatch() {
        let a = random_frame(2);
        let b = Frame::from_fn(5, 6, |_, _, _| 0.0);
        assert!(charbonnier_l1(&a, &b).is_err());
    }

    #[test]
    fn perceptual_is_zero_for_identical_inputs() {
        let f = random_frame(3);
        assert_eq!(perceptual(&f, &f, Some(&IdentityStages)).unwrap(), 0.0);
    }

    #[test]
    fn perceptual_without_extractor_is_zero() {
        let a = random_frame(4);
        let b = random_frame(5);
        assert_eq!(perceptual(&a, &b, None).unwrap(), 0.0);
    }

    #[test]
    fn identity_stages_give_three_times_mse() {
        let a = random_frame(6);
        let b = random_frame(7);
        let got = perceptual(&a, &b, Some(&IdentityStages)).unwrap();
        let mse: f64 = a
            .tensor()
            .data()
            .iter()
            .zip(b.tensor().data())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            / a.tensor().len() as f64;
        assert!((got - 3.0 * mse).abs() < 1e-12);
    }

    #[test]
    fn total_loss_composition_and_linearity_in_lambda() {
        let a = random_frame(8);
        let b = random_frame(9);
        let base = LossConfig::<f64> {
            eps: CHARBONNIER_EPS,
            lambda: 0.0,
            extractor: Some(Rc::new(IdentityStages)),
        };
        let l0 = total_loss(&a, &b, &base).unwrap();
        assert_eq!(l0, charbonnier_l1(&a, &b).unwrap());

        let with = |lambda: f64| LossConfig::<f64> {
            eps: CHARBONNIER_EPS,
            lambda,
            extractor: Some(Rc::new(IdentityStages)),
        };
        let l04 = total_loss(&a, &b, &with(0.04)).unwrap();
        let mse3 = perceptual(&a, &b, Some(&IdentityStages)).unwrap();
        assert!((l04 - (l0 + 0.04 * mse3)).abs() < 1e-12);

        // additivity: loss(l1) + loss(l2) - loss(0) = loss(l1 + l2)
        let (l1, l2) = (0.03, 0.11);
        let lhs = total_loss(&a, &b, &with(l1)).unwrap() + total_loss(&a, &b, &with(l2)).unwrap()
            - l0;
        let rhs = total_loss(&a, &b, &with(l1 + l2)).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn total_loss_lower_bound_is_eps_with_equality_iff_equal() {
        let a = random_frame(10);
        let cfg = LossConfig::<f64> {
            eps: CHARBONNIER_EPS,
            lambda: 0.04,
            extractor: Some(Rc::new(IdentityStages)),
        };
        assert!((total_loss(&a, &a, &cfg).unwrap() - CHARBONNIER_EPS).abs() < 1e-18);
        let b = random_frame(11);
        assert!(total_loss(&a, &b, &cfg).unwrap() > CHARBONNIER_EPS);
    }

    #[test]
    fn gradients_pass_including_near_zero_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pred = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(0.0..1.0));
        // small but FD-resolvable differences: |d| >> h = 1e-5 keeps the
        // probe clear of the eps-scale curvature around d = 0
        let gt = Tensor::from_fn(&[3, 4, 4], |i| {
            let mag = rng.gen_range(1e-3..1e-2);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            pred.data()[i] + sign * mag
        });
        let report = grad_check(
            |_, xs| charbonnier_var(&xs[0], &xs[1], CHARBONNIER_EPS),
            &[pred.clone(), gt],
            1e-6,
            120,
            13,
        );
        assert!(report.pass, "{report}");

        // at pred == gt the slope is exactly zero and stays finite
        let report = grad_check(
            |_, xs| charbonnier_var(&xs[0], &xs[0], CHARBONNIER_EPS),
            &[pred.clone()],
            1e-6,
            40,
            15,
        );
        assert!(report.pass, "{report}");

        let gt_far = Tensor::from_fn(&[3, 4, 4], |_| rng.gen_range(0.0..1.0));
        let cfg = LossConfig::<f64> {
            eps: CHARBONNIER_EPS,
            lambda: 0.04,
            extractor: Some(Rc::new(IdentityStages)),
        };
        let report = grad_check(
            |_, xs| total_loss_var(&xs[0], &xs[1], &cfg),
            &[pred, gt_far],
            1e-6,
            120,
            14,
        );
        assert!(report.pass, "{report}");
    }
}
