use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter within its store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Globally unique parameter handle (store + index), used to route gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    store: u64,
    index: usize,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug)]
pub struct ParamStore<T> {
    id: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self { id: fresh_id(), names: self.names.clone(), tensors: self.tensors.clone() }
    }
}

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { id: fresh_id(), names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.by_name(&name).is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(tensor);
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

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey { store: self.id, index: id.0 }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copy of this store in another precision (new identity).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            id: fresh_id(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Reads scalar `flat` in declaration order.
    pub fn scalar(&self, flat: usize) -> T {
        let (p, i) = self.locate(flat);
        self.tensors[p].data()[i]
    }

    pub fn set_scalar(&mut self, flat: usize, value: T) {
        let (p, i) = self.locate(flat);
        self.tensors[p].data_mut()[i] = value;
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (p, t) in self.tensors.iter().enumerate() {
            if flat < t.numel() {
                return (p, flat);
            }
            flat -= t.numel();
        }
        panic!("scalar index out of range");
    }

    /// Uniform `[-bound, bound]` initialised parameter.
    pub fn add_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
        self.add(name, Tensor::new(shape, data).expect("shape product"))
    }

    pub fn add_normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        self.add(name, Tensor::new(shape, data).expect("shape product"))
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, T::lit(value)))
    }
}

/// Gradients of a scalar with respect to every parameter that took part.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    map: HashMap<ParamKey, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub(crate) fn accumulate(&mut self, key: ParamKey, grad: Tensor<T>) {
        match self.map.get_mut(&key) {
            Some(acc) => acc.add_assign(&grad),
            None => {
                self.map.insert(key, grad);
            }
        }
    }

    pub fn get(&self, store: &ParamStore<T>, id: ParamId) -> Option<&Tensor<T>> {
        self.map.get(&store.key(id))
    }

    /// L2 norm over the gradients that belong to `store`.
    pub fn norm_for(&self, store: &ParamStore<T>) -> f64 {
        store.ids().filter_map(|id| self.get(store, id)).map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::all_finite)
    }

    /// Scalar-flat gradient for `store` in declaration order (zeros where absent).
    pub fn flat_for(&self, store: &ParamStore<T>) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.num_scalars());
        for id in store.ids() {
            match self.get(store, id) {
                Some(g) => out.extend(g.data().iter().map(|v| v.as_f64())),
                None => out.extend(std::iter::repeat(0.0).take(store.get(id).numel())),
            }
        }
        out
    }
}
