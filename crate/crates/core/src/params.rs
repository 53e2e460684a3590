//! Named parameter tensors and frozen parameter snapshots.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named, shaped, flat parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor<T = f32> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

impl<T> ParamTensor<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Argument(format!(
                "parameter {name}: shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            name,
            shape,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl<T: Float> ParamTensor<T> {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            values: vec![T::zero(); n],
        }
    }

    /// Lossless widening used by double-precision checks.
    pub fn to_f64(&self) -> ParamTensor<f64> {
        ParamTensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| v.to_f64().unwrap()).collect(),
        }
    }
}

/// Frozen copy of a model's trainable parameters (the anchor for weight
/// consolidation). Entries keep the model's parameter order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSnapshot<T = f32> {
    entries: Vec<ParamTensor<T>>,
}

impl<T> ParameterSnapshot<T> {
    pub fn new(entries: Vec<ParamTensor<T>>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Argument(format!(
                    "duplicate parameter name {}",
                    e.name
                )));
            }
            let expected: usize = e.shape.iter().product();
            if expected != e.values.len() {
                return Err(Error::Argument(format!(
                    "parameter {}: shape {:?} needs {expected} values, got {}",
                    e.name,
                    e.shape,
                    e.values.len()
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ParamTensor<T>] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<ParamTensor<T>> {
        self.entries
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.entries.iter().find(|e| e.name == name)
    }
}

impl<T: Float> ParameterSnapshot<T> {
    pub fn to_f64(&self) -> ParameterSnapshot<f64> {
        ParameterSnapshot {
            entries: self.entries.iter().map(ParamTensor::to_f64).collect(),
        }
    }
}

/// Checks that `theta` has the same names, shapes and order as `anchor`.
/// The error names the first entry that differs.
pub fn check_structure<A, B>(theta: &[ParamTensor<A>], anchor: &[ParamTensor<B>]) -> Result<()> {
    for (i, (a, b)) in theta.iter().zip(anchor).enumerate() {
        if a.name != b.name {
            return Err(Error::Argument(format!(
                "parameter #{i}: name {} does not match snapshot entry {}",
                a.name, b.name
            )));
        }
        if a.shape != b.shape || a.values.len() != b.values.len() {
            return Err(Error::Argument(format!(
                "parameter #{i} ({}): shape {:?} does not match snapshot shape {:?}",
                a.name, a.shape, b.shape
            )));
        }
    }
    if theta.len() != anchor.len() {
        let i = theta.len().min(anchor.len());
        let name = theta
            .get(i)
            .map(|p| p.name.clone())
            .or_else(|| anchor.get(i).map(|p| p.name.clone()))
            .unwrap_or_default();
        return Err(Error::Argument(format!(
            "parameter #{i} ({name}): model has {} entries, snapshot has {}",
            theta.len(),
            anchor.len()
        )));
    }
    Ok(())
}
