use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::shape::{numel, Shape};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Shape,
    pub value: Vec<T>,
    /// Running statistics and frozen tensors are stored with `trainable = false`.
    pub trainable: bool,
}

/// Flat, named storage for every tensor a network owns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Shape, value: Vec<T>, trainable: bool) -> ParamId {
        assert_eq!(numel(shape), value.len(), "parameter value does not match its shape");
        self.params.push(Param { name: name.into(), shape, value, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape,
                    value: p.value.iter().map(|v| U::of(v.as_f64())).collect(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Overwrites the value of the parameter `name`, checking its length.
    pub fn assign(&mut self, name: &str, value: Vec<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| TensorError::Usage(format!("unknown parameter `{name}`")))?;
        let p = &mut self.params[id.0];
        if p.value.len() != value.len() {
            return Err(TensorError::Shape {
                op: "assign",
                detail: format!("`{name}` expects {} values, got {}", p.value.len(), value.len()),
            });
        }
        p.value = value;
        Ok(())
    }
}
