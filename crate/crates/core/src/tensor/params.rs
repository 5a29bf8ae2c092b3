//! Named, trainable parameters and their binding onto a tape.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, TensorError, Var};

/// A named tensor; `trainable` decides whether the optimizer touches it.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters. Iteration order is
/// insertion order, which keeps serialization and optimizer sweeps
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            trainable: true,
        });
        Ok(())
    }

    /// Uniform init in `(-1/sqrt(fan_in), +1/sqrt(fan_in))`.
    pub fn insert_uniform(
        &mut self,
        name: &str,
        shape: [usize; 2],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let values = (0..shape[0] * shape[1])
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::new(shape, values)?)
    }

    pub fn insert_full(&mut self, name: &str, shape: [usize; 2], value: f64) -> Result<()> {
        self.insert(name, Tensor::new(shape, vec![value; shape[0] * shape[1]])?)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(TensorError::UnknownParameter(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.values().len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }
}

/// Parameter values copied onto a tape as gradient-carrying leaves, one per
/// name. Binding the whole set up front means a parameter used in several
/// places (e.g. a shared embedding) maps to a single node, so its gradients
/// accumulate within the graph.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ParameterSet) -> Self {
        let mut vars = HashMap::with_capacity(params.len());
        for p in params.iter() {
            let var = if p.trainable {
                tape.leaf(Tensor::new(p.tensor.shape(), p.tensor.values().to_vec()).expect("shape"))
            } else {
                tape.constant(
                    Tensor::new(p.tensor.shape(), p.tensor.values().to_vec()).expect("shape"),
                )
            };
            vars.insert(p.name.clone(), var);
        }
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    /// Adds the tape gradients of every bound parameter into the parameter
    /// set's gradient buffers.
    pub fn accumulate_grads(&self, tape: &Tape, params: &mut ParameterSet) -> Result<()> {
        for (name, &var) in &self.vars {
            if let Some(grad) = tape.grad(var) {
                let grad = grad.to_vec();
                params.get_mut(name)?.tensor.accumulate_grad(&grad);
            }
        }
        Ok(())
    }
}
