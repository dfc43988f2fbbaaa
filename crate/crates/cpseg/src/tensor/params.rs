//! Named, persistent model parameters.
//!
//! Parameters live outside any [`Tape`]; each forward pass binds them onto a
//! fresh tape as `requires_grad` leaves, and the optimizer reads gradients
//! back through the same binding after `backward`.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use super::{Tape, TensorId};
use crate::error::{CpSegError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(default = "default_trainable")]
    pub trainable: bool,
}

fn default_trainable() -> bool {
    true
}

/// Initialization scheme for a freshly registered parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in +/- 1/sqrt(fan_in).
    ScaledUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut Rng) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(CpSegError::Config(format!("duplicate parameter name {name}")));
        }
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::ScaledUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..numel).map(|_| rng.uniform_in(-bound, bound)).collect()
            }
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
        };
        let idx = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), idx);
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].data
    }

    /// Mark every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = false;
            }
        }
    }

    /// Place every parameter on the tape as a leaf. Frozen parameters are
    /// bound without gradient tracking.
    pub fn bind_all(&self, tape: &mut Tape) -> Result<Binding> {
        let mut ids = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            ids.push(tape.leaf(e.data.clone(), e.shape.clone(), e.trainable)?);
        }
        Ok(Binding { ids })
    }

    /// Replace all parameter values from a flat checkpoint listing, matching
    /// by name and validating shapes.
    pub fn load_values(&mut self, values: &[ParamEntry]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(CpSegError::Validation(format!(
                "checkpoint has {} parameters, model expects {}",
                values.len(),
                self.entries.len()
            )));
        }
        for v in values {
            let idx = *self.by_name.get(&v.name).ok_or_else(|| {
                CpSegError::Validation(format!("checkpoint parameter {} unknown to model", v.name))
            })?;
            let e = &mut self.entries[idx];
            if e.shape != v.shape {
                return Err(CpSegError::Validation(format!(
                    "parameter {} has shape {:?} in checkpoint but {:?} in model",
                    v.name, v.shape, e.shape
                )));
            }
            let expected: usize = v.shape.iter().product();
            if v.data.len() != expected {
                return Err(CpSegError::Validation(format!(
                    "parameter {} data length {} does not match shape {:?}",
                    v.name,
                    v.data.len(),
                    v.shape
                )));
            }
            e.data = v.data.clone();
        }
        Ok(())
    }

    pub fn export(&self) -> Vec<ParamEntry> {
        self.entries.clone()
    }
}

/// Map from [`ParamId`] to the tape leaf holding its current value.
#[derive(Debug, Clone)]
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn get(&self, id: ParamId) -> TensorId {
        self.ids[id.0]
    }
}
