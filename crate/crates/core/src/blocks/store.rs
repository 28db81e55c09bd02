use std::collections::BTreeMap;

use rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::layers::layer_specs;
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::rng::{fnv1a, Xoshiro256StarStar};
use crate::tensor::{Real, Shape, Tensor};

/// Named learnable tensors, keyed by hierarchical layer path
/// (`rcb.0.arb.1.bn.dw1.weight`). Iteration is lexicographic.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct WeightStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Graph-side handles for every tensor of a [`WeightStore`].
pub type ParamSet<V> = BTreeMap<String, V>;

impl<T: Real> WeightStore<T> {
    pub fn new() -> Self {
        WeightStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(path.into(), t)
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total learnable scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> WeightStore<U> {
        WeightStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Register every tensor with `g` as a learnable parameter.
    pub fn bind<G: Graph<T>>(&self, g: &G) -> ParamSet<G::V> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), g.param(v.clone())))
            .collect()
    }

    /// Zero every tensor whose path starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (k, v) in self.tensors.iter_mut() {
            if k.starts_with(prefix) {
                v.data_mut().fill(T::ZERO);
            }
        }
    }

    /// The expected `(path, dims)` list for `cfg`, in lexicographic order.
    pub fn expected_layout(cfg: &ModelConfig) -> BTreeMap<String, [usize; 4]> {
        let mut out = BTreeMap::new();
        for l in layer_specs(cfg) {
            out.insert(format!("{}.weight", l.path), l.weight_dims());
            out.insert(format!("{}.bias", l.path), l.bias_dims());
        }
        out
    }
}

/// Deterministic per-layer generator: layer path hash mixed with the global seed.
pub fn layer_rng(path: &str, seed: u64) -> Xoshiro256StarStar {
    Xoshiro256StarStar::seed_from_u64(fnv1a(path.as_bytes()) ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Build and initialize every layer of `cfg`.
///
/// Weights are zero-mean Gaussians with the He (ReLU-gain) fan-in standard
/// deviation `sqrt(2 / fan_in)`; biases start at zero.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<WeightStore<f32>> {
    cfg.validate()?;
    let mut store = WeightStore::new();
    for l in layer_specs(cfg) {
        let dims = l.weight_dims();
        let fan_in = dims[1] * dims[2] * dims[3];
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = layer_rng(&l.path, seed);
        let shape = Shape::from_dims(dims);
        let data = (0..shape.numel()).map(|_| normal.sample(&mut rng) as f32).collect();
        store.insert(format!("{}.weight", l.path), Tensor::from_vec(shape, data)?);
        store.insert(
            format!("{}.bias", l.path),
            Tensor::zeros(Shape::from_dims(l.bias_dims())),
        );
    }
    Ok(store)
}
