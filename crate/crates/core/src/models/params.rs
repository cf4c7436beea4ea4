use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What a named tensor is used for. Drives optimizer grouping, quantization
/// and size accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Kernel,
    Bias,
    /// Per-channel normalization scale; the pruning variable.
    Gamma,
    /// Per-channel normalization shift.
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn tag(self) -> u8 {
        match self {
            ParamRole::Kernel => 0,
            ParamRole::Bias => 1,
            ParamRole::Gamma => 2,
            ParamRole::Beta => 3,
            ParamRole::RunningMean => 4,
            ParamRole::RunningVar => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ParamRole::Kernel,
            1 => ParamRole::Bias,
            2 => ParamRole::Gamma,
            3 => ParamRole::Beta,
            4 => ParamRole::RunningMean,
            5 => ParamRole::RunningVar,
            _ => return None,
        })
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, role: ParamRole, tensor: Tensor) -> usize {
        let name = name.into();
        let id = self.entries.len();
        let previous = self.index.insert(name.clone(), id);
        assert!(previous.is_none(), "duplicate parameter name {name}");
        self.entries.push(Param { name, role, tensor });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param] {
        &mut self.entries
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(move |i| &mut self.entries[i].tensor)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Unknown {
            kind: "parameter",
            name: name.to_string(),
        })
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.entries[id].tensor
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].tensor
    }

    /// Same names, roles and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for p in &self.entries {
            out.push(p.name.clone(), p.role, Tensor::zeros(p.tensor.shape()));
        }
        out
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn count_role(&self, role: ParamRole) -> usize {
        self.entries
            .iter()
            .filter(|p| p.role == role)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.role == b.role && a.tensor.shape() == b.tensor.shape())
    }

    pub fn check_finite(&self) -> Result<()> {
        for p in &self.entries {
            p.tensor.check_finite("parameter")?;
        }
        Ok(())
    }
}
