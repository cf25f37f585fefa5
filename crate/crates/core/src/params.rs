//! Named, ordered parameter storage shared by layers, optimiser and checkpoints.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F: Scalar> {
    /// Hierarchical name, e.g. `mlp_encoder.0.weight`.
    pub name: String,
    pub value: Tensor<F>,
    pub frozen: bool,
}

/// Parameters in registration order with unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F: Scalar = f32> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, frozen: false });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<F>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Marks every parameter whose name starts with `prefix.` as frozen.
    /// Returns how many were affected.
    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let dotted = format!("{prefix}.");
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(&dotted) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    /// Overwrites a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::config(name, "no such parameter"))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim(
                "param_set",
                format!("{name}: stored {:?}, given {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Sets every value to zero (used by wiring tests).
    pub fn zero_prefix(&mut self, prefix: &str) {
        let dotted = format!("{prefix}.");
        for p in &mut self.params {
            if p.name.starts_with(&dotted) || p.name == prefix {
                p.value.data_mut().iter_mut().for_each(|v| *v = F::zero());
            }
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), frozen: p.frozen })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Xavier/Glorot uniform sample of the given shape.
pub fn xavier_uniform<F: Scalar, R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64_lossy(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape matches sample count")
}
