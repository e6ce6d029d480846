use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<F: Scalar> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Collection of named parameters. Names are dot-separated paths and unique.
///
/// Gradients accumulate across [`ParamStore::accumulate`] calls until
/// [`ParamStore::zero_grad`] is called.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Scalar> {
    params: Vec<Parameter<F>>,
    index: HashMap<String, ParamId>,
}

/// Per-parameter gradients extracted from one backward pass.
#[derive(Debug, Clone, Default)]
pub struct ParamGradients<F> {
    pub(crate) entries: Vec<(ParamId, Vec<F>)>,
}

impl<F: Scalar> ParamGradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.entries
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.entries.iter().map(|(p, g)| (*p, g.as_slice()))
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Parameter ids ordered lexicographically by name (checkpoint order).
    pub fn sorted_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.ids().collect();
        ids.sort_by(|a, b| self.name(*a).cmp(self.name(*b)));
        ids
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Adds extracted gradients into the stored ones, scaled by `weight`.
    pub fn accumulate(&mut self, grads: &ParamGradients<F>, weight: F) {
        for (id, g) in &grads.entries {
            let dst = self.params[id.0].grad.data_mut();
            for (d, s) in dst.iter_mut().zip(g) {
                *d += *s * weight;
            }
        }
    }

    /// Copy of the store in another precision, gradients reset.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape()),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| {
                let g = g.to_f64_lossy();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }
}
