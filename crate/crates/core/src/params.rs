//! Named parameter collections.

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered set of named tensors. Order is insertion order and is the order
/// used by checkpoints and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Tape leaves for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps vars created elsewhere, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Binding {
        let vars = self.params.iter().map(|p| tape.param_ref(&p.value)).collect();
        Binding { vars }
    }

    /// Binds every parameter as a constant (decoding, evaluation).
    pub fn bind_frozen<'p>(&'p self, tape: &mut Tape<'p>) -> Binding {
        let vars = self.params.iter().map(|p| tape.constant_ref(&p.value)).collect();
        Binding { vars }
    }

    /// Gradients after `tape.backward`, zeros for untouched parameters.
    pub fn grads(&self, tape: &Tape<'_>, binding: &Binding) -> Vec<Tensor> {
        binding.vars.iter().map(|&v| tape.grad_tensor(v)).collect()
    }

    /// Overwrites values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::invalid(format!("missing parameter `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "load parameter",
                    left: p.value.shape(),
                    right: src.value.shape(),
                });
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

/// Uniform `(-s, s)` with `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rows, cols, s, rng)
}

pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}
