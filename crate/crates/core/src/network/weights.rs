use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{IqtError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Trainable,
    RunningMean,
    RunningVar,
    Mask,
}

impl ParamKind {
    pub(crate) fn code(self) -> u8 {
        match self {
            ParamKind::Trainable => 0,
            ParamKind::RunningMean => 1,
            ParamKind::RunningVar => 2,
            ParamKind::Mask => 3,
        }
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => ParamKind::Trainable,
            1 => ParamKind::RunningMean,
            2 => ParamKind::RunningVar,
            3 => ParamKind::Mask,
            _ => return Err(IqtError::Format(format!("unknown parameter kind {c}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

/// Named parameters in construction order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ModelWeights<T> {
    pub fn new() -> Self {
        ModelWeights { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(IqtError::Spec(format!("duplicate parameter `{name}`")));
        }
        self.params.push(Param { name, kind, tensor });
        Ok(self.params.len() - 1)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.params[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.params[i].tensor)
    }

    /// Indices of trainable parameters in order.
    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| self.params[i].kind == ParamKind::Trainable)
            .collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }

    /// SHA-256 over all mask parameters (names and values).
    pub fn mask_digest(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.kind == ParamKind::Mask) {
            h.update(p.name.as_bytes());
            for v in p.tensor.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }
}
