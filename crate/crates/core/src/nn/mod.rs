//! Named parameter storage, layer descriptors and optimizers.

pub mod optim;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    params: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameters whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore<F> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copy every entry of `other` into `self`, overwriting same-named ones.
    pub fn extend(&mut self, other: ParamStore<F>) {
        self.params.extend(other.params);
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Register every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Bind, marking as trainable only names accepted by `trainable`.
    pub fn bind_filtered(&self, g: &mut Graph<F>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Panics on unknown names: layer descriptors and stores are built together.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn extend(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }

    /// Pull out gradients for every bound parameter that received one.
    pub fn gradients<F: Real>(&self, grads: &mut Gradients<F>) -> BTreeMap<String, Tensor<F>> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.take(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}

/// Truncated normal on `[-2σ, 2σ]`.
pub fn trunc_normal<F: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<F> {
    let normal = Normal::new(0.0, std).expect("std must be finite and positive");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break F::from_f64(v);
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Dense layer `y = x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    fn w(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn b(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<F: Real>(&self, store: &mut ParamStore<F>, rng: &mut impl Rng) {
        store.insert(self.w(), trunc_normal(&[self.in_dim, self.out_dim], 0.02, rng));
        store.insert(self.b(), Tensor::zeros(&[self.out_dim]));
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.get(&self.w()));
        g.add_broadcast(y, p.get(&self.b()))
    }
}

/// Square-kernel NHWC convolution with He-normal initialization.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            name: name.into(),
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    fn w(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn b(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<F: Real>(&self, store: &mut ParamStore<F>, rng: &mut impl Rng) {
        let fan_in = self.kernel * self.kernel * self.c_in;
        let std = (2.0 / fan_in as f64).sqrt();
        store.insert(self.w(), trunc_normal(&[fan_in, self.c_out], std, rng));
        store.insert(self.b(), Tensor::zeros(&[self.c_out]));
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.get(&self.w()), p.get(&self.b()), self.stride, self.pad)
    }
}

/// Layer normalization with learnable affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            name: name.into(),
            dim,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<F: Real>(&self, store: &mut ParamStore<F>) {
        store.insert(self.weight_name(), Tensor::full(&[self.dim], F::ONE));
        store.insert(self.bias_name(), Tensor::zeros(&[self.dim]));
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, x: Var) -> Var {
        g.layer_norm(
            x,
            p.get(&self.weight_name()),
            p.get(&self.bias_name()),
            F::from_f64(Self::EPS),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = trunc_normal(&[1000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean: f64 = t.data().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.005);
    }

    #[test]
    fn linear_forward_matches_manual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new("fc", 3, 2);
        let mut store = ParamStore::<f64>::new();
        lin.init(&mut store, &mut rng);
        store.get_mut("fc.bias").unwrap().data_mut()[1] = 0.5;
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]));
        let y = lin.forward(&mut g, &p, x);
        let w = store.get("fc.weight").unwrap();
        for j in 0..2 {
            let expect: f64 =
                (0..3).map(|i| [1.0, 2.0, 3.0][i] * w.data()[i * 2 + j]).sum::<f64>() + [0.0, 0.5][j];
            assert!((g.value(y).data()[j] - expect).abs() < 1e-12);
        }
    }
}
