//! Named parameter storage shared by the model, the optimizer and checkpoints.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::scalar::Real;
use crate::tensor::{Tensor, TensorError};

/// Position of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Serialized form of one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
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

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Registers every parameter as a learnable leaf; the returned vector is indexed by [`ParamId`].
    pub fn bind(&self, graph: &mut Graph<T>) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| graph.param(t.clone()))
            .collect()
    }

    pub fn to_records(&self) -> Vec<ParamRecord> {
        self.iter()
            .map(|(name, t)| ParamRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|v| v.to_f64_lossy()).collect(),
            })
            .collect()
    }

    pub fn from_records(records: &[ParamRecord]) -> Result<Self, TensorError> {
        let mut store = ParamStore::new();
        for r in records {
            store.push(
                r.name.clone(),
                Tensor::from_f64(r.shape.clone(), &r.values)?,
            );
        }
        Ok(store)
    }
}
