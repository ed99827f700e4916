use std::collections::BTreeMap;

use crate::error::{Result, TamError};
use crate::tensor::{Real, Tensor};

/// Role of a stored tensor; decides trainability and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Convolution / fully connected weights (decayed).
    Weight,
    Bias,
    /// Batch-norm affine parameters.
    Norm,
    /// Non-trainable state such as running statistics.
    State,
}

impl ParamKind {
    pub fn tag(self) -> u8 {
        match self {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
            ParamKind::Norm => 2,
            ParamKind::State => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            2 => ParamKind::Norm,
            3 => ParamKind::State,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<F> {
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub kind: ParamKind,
}

impl<F: Real> ParamEntry<F> {
    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::State
    }

    pub fn decays(&self) -> bool {
        self.kind == ParamKind::Weight
    }
}

/// Named tensors with gradient accumulators, iterated in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    entries: BTreeMap<String, ParamEntry<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TamError::config(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name, ParamEntry { value, grad, kind });
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<F>> {
        self.entries.get(name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry<F>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<F>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| TamError::MissingParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<F>> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| TamError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set_value(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TamError::MissingParam(name.to_string()))?;
        if e.value.shape() != value.shape() {
            return Err(TamError::shape(
                "set_value",
                format!("`{name}`: {:?} vs {:?}", e.value.shape(), value.shape()),
            ));
        }
        e.value = value;
        Ok(())
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor<F>) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TamError::MissingParam(name.to_string()))?;
        if e.grad.shape() != g.shape() {
            return Err(TamError::shape(
                "accumulate_grad",
                format!("`{name}`: {:?} vs {:?}", e.grad.shape(), g.shape()),
            ));
        }
        e.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|v| *v = F::zero());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable())
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            grad: e.grad.cast(),
                            kind: e.kind,
                        },
                    )
                })
                .collect(),
        }
    }
}
