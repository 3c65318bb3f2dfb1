use crate::error::{Error, Result};
use crate::numerics::tape::{Gradients, Tape, Var};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

/// Tape variables for every parameter of one store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Pulls this store's gradients out of `grads`, in store order.
    pub fn collect(&self, grads: &mut Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&store.values)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound { vars: self.values.iter().map(|t| tape.leaf(t.clone(), trainable)).collect() }
    }

    /// Replaces all values, keeping names; shapes must match one-to-one.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for (old, new) in self.values.iter().zip(&values) {
            old.check_same_shape(new)?;
        }
        self.values = values;
        Ok(())
    }
}
