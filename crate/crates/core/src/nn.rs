//! Parameter storage and the per-forward recording context shared by the layers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named trainable parameters plus non-trainable buffers (running moments).
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    decay: Vec<bool>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            decay: Vec::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
        }
    }

    /// Registers a parameter. `decay` marks it as subject to weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        self.decay.push(decay);
        ParamId(self.values.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffer_names.push(name.into());
        self.buffers.push(value);
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn decay_mask(&self) -> &[bool] {
        &self.decay
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.find(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let idx = self
            .buffer_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown buffer `{name}`")))?;
        if self.buffers[idx].shape() != value.shape() {
            return Err(Error::Checkpoint(format!("buffer `{name}` shape mismatch")));
        }
        self.buffers[idx] = value;
        Ok(())
    }

    pub fn apply_moment_updates(&mut self, updates: Vec<(BufferId, Tensor<T>)>) {
        for (id, value) in updates {
            self.buffers[id.0] = value;
        }
    }
}

/// Normal-distributed tensor with the given standard deviation.
pub fn normal_init<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

/// Correlation values captured during a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionRecord<T> {
    pub label: String,
    /// `(batch, frames, nodes)`.
    pub values: Tensor<T>,
}

/// Recording context for one forward pass: the tape, every parameter as a
/// leaf, the norm mode and side outputs (moment updates, attention dumps).
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    params: Vec<Var>,
    pub mode: Mode,
    pub moment_updates: Vec<(BufferId, Tensor<T>)>,
    attention: Option<Vec<AttentionRecord<T>>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        let params = store.values.iter().map(|v| tape.leaf(v.clone())).collect();
        Ctx { tape, store, params, mode, moment_updates: Vec::new(), attention: None }
    }

    /// Context whose parameters are the given tape variables, in store order.
    pub fn with_params(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, params: Vec<Var>, mode: Mode) -> Result<Self> {
        if params.len() != store.len() {
            return Err(Error::shape(format!("{} parameter variables for {} parameters", params.len(), store.len())));
        }
        for (v, value) in params.iter().zip(&store.values) {
            if tape.shape(*v) != value.shape() {
                return Err(Error::shape("parameter variable shape differs from the store"));
            }
        }
        Ok(Ctx { tape, store, params, mode, moment_updates: Vec::new(), attention: None })
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        self.store.buffer(id)
    }

    /// Records a constant (non-trainable) tensor.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.tape.leaf(value)
    }

    pub fn capture_attention(&mut self) {
        self.attention = Some(Vec::new());
    }

    pub fn record_attention(&mut self, label: &str, r: Var) {
        if let Some(records) = &mut self.attention {
            records.push(AttentionRecord { label: label.to_string(), values: self.tape.value(r).clone() });
        }
    }

    pub fn take_attention(&mut self) -> Vec<AttentionRecord<T>> {
        self.attention.take().unwrap_or_default()
    }
}
