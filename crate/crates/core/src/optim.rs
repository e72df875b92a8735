//! Named parameter storage and the Adam optimizer.

use std::collections::HashMap;
use std::ops::Index;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Arc<Tensor>,
    grad: Option<Tensor>,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }
}

/// Ordered collection of learnable tensors addressed by name or [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
            grad: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        self.set_value(id, value)
    }

    /// Puts every parameter on `tape` as a leaf. Values are shared, not copied.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf_shared(Arc::clone(&p.value), trainable))
            .collect();
        Bound { vars }
    }

    /// Adds the gradients of the bound leaves to the stored gradients.
    pub fn accumulate_grads(&mut self, bound: &Bound<'_>, grads: &mut Gradients) {
        for (p, var) in self.params.iter_mut().zip(&bound.vars) {
            let Some(g) = grads.take(*var) else { continue };
            match &mut p.grad {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// Parameters placed on a tape, indexable by [`ParamId`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments, one buffer pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Tensor::zeros(p.value().shape().to_vec()))
                .collect()
        };
        Self {
            config,
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    /// Applies one update from the stored gradients and clears them.
    /// Fails without touching anything if some parameter has no gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.first_moment.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first_moment.len(),
                store.len()
            )));
        }
        let missing: Vec<&str> = store
            .iter()
            .filter(|p| p.grad.is_none())
            .map(Parameter::name)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingGradient(missing.join(", ")));
        }

        self.step_count += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step_count as i32);
        let c2 = 1.0 - b2.powi(self.step_count as i32);
        for (i, p) in store.params.iter_mut().enumerate() {
            let g = p.grad.take().expect("checked above");
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let w = Arc::make_mut(&mut p.value).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
