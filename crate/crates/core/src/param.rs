//! Named, trainable parameter tensors.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered parameter collection with unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    /// Adds a parameter drawn uniformly from `[-bound, bound]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let t = Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..=bound)));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad))
                .collect(),
        }
    }

    /// Adds the tape gradients of the bound leaves to the stored accumulators.
    /// A parameter the backward pass never reached is a training error.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            let g = tape
                .grad(v)
                .ok_or_else(|| Error::Training(format!("no gradient reached parameter {}", p.name)))?;
            p.grad
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a += b);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn scale_grads(&mut self, s: T) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Overwrites values from `other`, matching by name and shape.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        let mut problems = Vec::new();
        for p in &self.params {
            match other.by_name(&p.name) {
                None => problems.push(format!("{} missing", p.name)),
                Some(o) if o.value.shape() != p.value.shape() => problems.push(format!(
                    "{} has shape {:?}, expected {:?}",
                    p.name,
                    o.value.shape(),
                    p.value.shape()
                )),
                Some(_) => {}
            }
        }
        for o in &other.params {
            if !self.index.contains_key(&o.name) {
                problems.push(format!("{} unexpected", o.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        for p in &mut self.params {
            p.value = other.by_name(&p.name).unwrap().value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add_zeros("a", &[2]).unwrap();
        assert!(s.add_zeros("a", &[3]).is_err());
    }

    #[test]
    fn load_values_names_offenders() {
        let mut a = ParamStore::<f64>::new();
        a.add_zeros("w", &[2, 2]).unwrap();
        a.add_zeros("b", &[2]).unwrap();
        let mut b = ParamStore::<f64>::new();
        b.add_zeros("w", &[2, 3]).unwrap();
        let err = a.load_values(&b).unwrap_err().to_string();
        assert!(err.contains("w has shape") && err.contains("b missing"), "{err}");
    }
}
