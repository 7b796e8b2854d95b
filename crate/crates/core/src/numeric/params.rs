use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};

/// Tensor of independent `N(0, std^2)` entries.
pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered parameter tensors. Model structure refers to entries by
/// [`ParamId`], so two stores with the same layout (student and teacher) can
/// drive the same forward code.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        self.add(name, normal_tensor(shape, std, rng))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Binds a parameter on a graph.
    pub fn bind(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param(id.0, &self.tensors[id.0])
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Copies `grad` of every parameter bound on `g` into a fresh vector
    /// indexed like the store; unbound parameters get `None`.
    pub fn collect_grads(&self, g: &Graph) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![None; self.tensors.len()];
        for (key, var) in g.bound_params() {
            if let Some(grad) = g.grad(var) {
                out[key] = Some(grad.to_vec());
            }
        }
        out
    }

    /// Plain gradient step on every parameter bound on `g`.
    pub fn sgd_step(&mut self, g: &Graph, lr: f64, skip: impl Fn(ParamId) -> bool) {
        for (key, var) in g.bound_params() {
            if skip(ParamId(key)) {
                continue;
            }
            if let Some(grad) = g.grad(var) {
                self.tensors[key]
                    .data_mut()
                    .iter_mut()
                    .zip(grad)
                    .for_each(|(p, d)| *p -= lr * d);
            }
        }
    }

    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Dimension {
                op: "param layout",
                lhs: vec![self.len(), self.scalar_count()],
                rhs: vec![other.len(), other.scalar_count()],
            })
        }
    }
}
