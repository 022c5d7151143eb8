use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

/// Index of a [`Parameter`] inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Role of a parameter, used to select regularization targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Direction `v` of a weight-normalized kernel.
    Direction,
    /// Magnitude `g` of a weight-normalized kernel.
    WeightScale,
    /// Learned multiplier on the `tanh` of the scale head.
    OutputScale,
    Bias,
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
    pub requires_grad: bool,
}

/// Owns every parameter of a model. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        kind: ParamKind,
        tensor: Tensor,
    ) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Invalid {
                op: "ParamStore::add",
                reason: format!("duplicate parameter name `{name}`"),
            });
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            kind,
            tensor,
            requires_grad: true,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

/// Result of a backward pass.
///
/// Parameters the loss does not reach have no entry; [`Gradients::param`]
/// reports them as zero.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) params: BTreeMap<ParamId, Tensor>,
    pub(crate) leaves: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.params
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).tensor.shape()))
    }

    pub fn param_ref(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.params.get_mut(&id)
    }

    /// Gradient for every parameter of `store`, in id order.
    pub fn dense(&self, store: &ParamStore) -> Vec<Tensor> {
        store.ids().map(|id| self.param(id, store)).collect()
    }

    pub(crate) fn leaf(&self, node: usize) -> Option<&Tensor> {
        self.leaves.get(&node)
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.params.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}
