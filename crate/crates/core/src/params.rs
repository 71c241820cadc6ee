//! Named parameter storage and per-forward binding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn push(&mut self, name: String, t: Tensor<T>) -> ParamId {
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Binds every parameter as a graph leaf for one forward pass.
    pub fn bind(&self, trainable: bool) -> Bound<T> {
        Bound { vars: self.tensors.iter().map(|t| Var::leaf(t.clone(), trainable)).collect() }
    }
}

/// Graph leaves for one forward pass, indexed by [`ParamId`].
pub struct Bound<T: Scalar> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> Bound<T> {
    /// Binds caller-provided leaves, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var<T>>) -> Self {
        Bound { vars }
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    /// One gradient per parameter (zeros for parameters that did not contribute).
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    }
}

/// Creates parameters with deterministic initial values under a name prefix.
pub struct Init<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Init { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: String::new() }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() { name.to_string() } else { format!("{saved}.{name}") };
        let r = f(self);
        self.prefix = saved;
        r
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.random_range(-bound..=bound))).collect();
        let full = self.full_name(name);
        self.store.push(full, Tensor::from_vec(shape, data))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(&mut self.rng))).collect();
        let full = self.full_name(name);
        self.store.push(full, Tensor::from_vec(shape, data))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.push(full, Tensor::full(shape, T::lit(v)))
    }
}
