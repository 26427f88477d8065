//! Named parameter store and tape binding.
//!
//! All learnable tensors live in a [`Params`] map keyed by hierarchical
//! names such as `finet.mask.0.weight`. A forward pass binds the whole
//! store onto a graph as gradient-tracked leaves; after backward the
//! per-name gradients are collected for the optimizer. Iteration order
//! is the sorted name order everywhere, which keeps training
//! bit-reproducible.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::graph::{Grads, Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Ordered map of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct Params<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), tensor).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn tensor_count(&self) -> usize {
        self.map.len()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>()))
                .collect(),
        }
    }

    /// Adds uniform noise in `[-scale, scale]` to every element.
    /// Gradient tests use this to move zero-initialized heads off their
    /// vanishing-gradient starting point.
    pub fn jitter(&mut self, rng: &mut ChaCha8Rng, scale: f64) {
        for tensor in self.map.values_mut() {
            for v in tensor.data_mut() {
                *v = *v + T::from_f64(rng.gen_range(-scale..scale));
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.all_finite())
    }
}

/// Parameters bound onto a graph as gradient-tracked leaves.
pub struct Bound<T: Scalar> {
    vars: BTreeMap<String, Var<T>>,
}

impl<T: Scalar> Bound<T> {
    /// Builds a binding from an explicit name→node map. Gradient tests
    /// use this to substitute checked leaves for specific parameters.
    pub fn from_map(vars: BTreeMap<String, Var<T>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> &Var<T> {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<T>)> {
        self.vars.iter()
    }
}

/// Binds every parameter as a `requires_grad` leaf on `graph`.
pub fn bind<T: Scalar>(graph: &Graph<T>, params: &Params<T>) -> Bound<T> {
    let vars = params
        .iter()
        .map(|(name, tensor)| (name.clone(), graph.leaf(tensor.clone().with_grad())))
        .collect();
    Bound { vars }
}

/// Collects per-name gradients after backward; parameters that did not
/// participate get zero gradients of matching shape.
pub fn collect_grads<T: Scalar>(
    grads: &mut Grads<T>,
    bound: &Bound<T>,
) -> BTreeMap<String, Tensor<T>> {
    bound
        .iter()
        .map(|(name, var)| {
            let g = grads
                .take(var)
                .unwrap_or_else(|| Tensor::zeros(&var.shape()));
            (name.clone(), g)
        })
        .collect()
}

/// Inserts `{name}.weight` `[co, ci, k, k]` and `{name}.bias` `[co]`.
/// Weights are uniform with fan-in scaling; `zero_init` zeroes both,
/// which is how identity-at-initialization heads are built.
pub fn init_conv(
    params: &mut Params<f32>,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
    zero_init: bool,
) {
    let weight = if zero_init {
        Tensor::zeros(&[co, ci, k, k])
    } else {
        let limit = (1.0 / (ci * k * k) as f64).sqrt();
        Tensor::from_fn(&[co, ci, k, k], |_| rng.gen_range(-limit..limit) as f32)
    };
    params.insert(format!("{name}.weight"), weight);
    params.insert(format!("{name}.bias"), Tensor::zeros(&[co]));
}

/// Applies the convolution stored under `name` (stride 1, zero padding).
pub fn conv_fwd<T: Scalar>(bound: &Bound<T>, name: &str, x: &Var<T>, padding: usize) -> Var<T> {
    crate::tensor::ops::conv2d(
        x,
        bound.var(&format!("{name}.weight")),
        bound.var(&format!("{name}.bias")),
        1,
        padding,
        crate::tensor::ops::PadMode::Zero,
    )
    .expect("bound convolution shapes are validated at init")
}
