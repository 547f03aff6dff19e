use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::backward::Gradients;
use crate::error::{AutodiffError, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Graph variables for every parameter of a store, valid for one graph.
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Index<ParamId> for Bindings {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bindings {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Records every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bindings {
        Bindings(self.tensors.iter().map(|t| g.leaf(t)).collect())
    }

    /// Records every parameter as a constant (frozen) leaf.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bindings {
        Bindings(
            self.tensors
                .iter()
                .map(|t| {
                    g.constant(t.shape().to_vec(), t.data().to_vec())
                        .expect("stored tensors are consistent")
                })
                .collect(),
        )
    }

    /// Copies gradients out of a backward pass; unreached parameters get `None`.
    pub fn absorb_grads(&mut self, grads: &mut Gradients<T>, bindings: &Bindings) {
        for (t, &v) in self.tensors.iter_mut().zip(&bindings.0) {
            t.set_grad(grads.take(v)).expect("gradient matches parameter shape");
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Overwrites values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(AutodiffError::Checkpoint("parameter names differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(AutodiffError::Dimension {
                    op: "load_from",
                    lhs: dst.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub(crate) fn push_raw(&mut self, name: String, tensor: Tensor<T>) {
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
    }
}

/// Seeded parameter initializer.
#[derive(Debug)]
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal(0, std²) truncated to ±2 std by resampling.
    pub fn trunc_normal<T: Float>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let data = (0..numel(shape))
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break T::from_f64(z * std);
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }

    /// He-normal initialization for rectifier networks.
    pub fn he_normal<T: Float>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.trunc_normal(shape, (2.0 / fan_in.max(1) as f64).sqrt())
    }

    pub fn uniform<T: Float>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let data = (0..numel(shape))
            .map(|_| T::from_f64(self.rng.gen_range(lo..hi)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }
}
