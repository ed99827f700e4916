//! Layer plumbing shared by the temporal module and the networks: forward
//! context, parameter registration and initializers.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::params::{ParamKind, ParamStore};
use crate::tape::{BnState, Mode, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Values forced into every temporal adaptive module of a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Overrides<F> {
    /// Replaces every generated kernel row with this length-K row.
    pub theta: Option<Vec<F>>,
    /// Replaces every importance weight with this value.
    pub importance: Option<F>,
}

/// Kernels observed during a forward pass, keyed by temporal layer name.
#[derive(Debug, Clone, Default)]
pub struct KernelProbe<F> {
    pub layers: BTreeMap<String, ProbeRecord<F>>,
}

#[derive(Debug, Clone)]
pub struct ProbeRecord<F> {
    /// `(N, C, K)` aggregation kernels.
    pub theta: Tensor<F>,
    /// `(N, C, T)` importance map when the layer has a local branch.
    pub importance: Option<Tensor<F>>,
}

pub struct Ctx<'a, F: Real> {
    pub tape: &'a mut Tape<F>,
    pub store: &'a ParamStore<F>,
    pub mode: Mode,
    pub overrides: Overrides<F>,
    pub probe: Option<&'a mut KernelProbe<F>>,
}

impl<'a, F: Real> Ctx<'a, F> {
    pub fn new(tape: &'a mut Tape<F>, store: &'a ParamStore<F>, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            overrides: Overrides::default(),
            probe: None,
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.tape.param(self.store, name)
    }

    /// Batch norm using `{name}.gamma/beta/running_mean/running_var`.
    pub fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let mean_name = format!("{name}.running_mean");
        let var_name = format!("{name}.running_var");
        let store = self.store;
        let state = BnState {
            mean: store.value(&mean_name)?,
            var: store.value(&var_name)?,
            mean_name: &mean_name,
            var_name: &var_name,
        };
        self.tape.batch_norm(x, gamma, beta, state, self.mode)
    }

    pub fn record(&mut self, layer: &str, theta: Tensor<F>, importance: Option<Tensor<F>>) {
        if let Some(probe) = self.probe.as_deref_mut() {
            probe
                .layers
                .insert(layer.to_string(), ProbeRecord { theta, importance });
        }
    }
}

/// Normal samples with standard deviation `sqrt(2 / fan_in)`.
pub fn kaiming<F: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<F> {
    normal(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

pub fn normal<F: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<F> {
    let dist = Normal::new(0.0, std.max(f64::MIN_POSITIVE)).expect("finite std");
    Tensor::from_fn(shape, |_| F::cst(dist.sample(rng)))
}

pub fn add_batch_norm<F: Real>(store: &mut ParamStore<F>, name: &str, c: usize, gamma: f64) -> Result<()> {
    store.insert(format!("{name}.gamma"), Tensor::full(&[c], F::cst(gamma)), ParamKind::Norm)?;
    store.insert(format!("{name}.beta"), Tensor::zeros(&[c]), ParamKind::Norm)?;
    store.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]), ParamKind::State)?;
    store.insert(format!("{name}.running_var"), Tensor::ones(&[c]), ParamKind::State)?;
    Ok(())
}
