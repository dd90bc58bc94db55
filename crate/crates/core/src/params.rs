use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{GtrsError, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    #[serde(skip)]
    pub grad: Option<Tensor>,
}

impl Param {
    pub fn grad_or_zero(&self) -> Tensor {
        self.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.value.shape()))
    }
}

/// Named parameters in declaration order, each with a gradient slot.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable,
            grad: None,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of scalars the optimizer updates.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    /// Overwrites gradient slots. Non-trainable slots are always zero.
    pub fn set_grads(&mut self, grads: &Gradients) {
        self.zero_grads();
        self.accumulate_grads(grads, 1.0);
    }

    /// `grad += weight * grads` for every trainable parameter.
    pub fn accumulate_grads(&mut self, grads: &Gradients, weight: f64) {
        for (i, p) in self.params.iter_mut().enumerate() {
            let slot = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if !p.trainable {
                continue;
            }
            if let Some(Some(g)) = grads.0.get(i) {
                for (s, v) in slot.data_mut().iter_mut().zip(g.data()) {
                    *s += weight * v;
                }
            }
        }
    }

    /// Replaces parameter values by name, checking every shape.
    pub fn load_values<'a>(&mut self, values: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<usize> {
        let mut loaded = 0;
        for (name, value) in values {
            let id = self
                .id(name)
                .ok_or_else(|| GtrsError::Config(format!("unknown parameter {name}")))?;
            let slot = &mut self.params[id.0].value;
            if slot.shape() != value.shape() {
                return Err(GtrsError::shape("load parameter", slot.shape(), value.shape()));
            }
            *slot = value.clone();
            loaded += 1;
        }
        Ok(loaded)
    }
}

/// Per-parameter gradients produced by one backward pass, indexed by
/// [`ParamId`]. `None` means the parameter was not reached or is frozen.
#[derive(Clone, Debug, Default)]
pub struct Gradients(pub Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn add_scaled(&mut self, other: &Gradients, weight: f64) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), None);
        }
        for (slot, g) in self.0.iter_mut().zip(&other.0) {
            let Some(g) = g else { continue };
            match slot {
                Some(s) => {
                    for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                        *a += weight * b;
                    }
                }
                None => *slot = Some(g.scale(weight)),
            }
        }
    }
}
