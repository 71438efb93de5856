use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Puts every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect();
        BoundParams {
            vars,
            index: &self.index,
        }
    }

    /// Names existing tape handles, one per tensor in store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<BoundParams<'_>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Contract(format!("{} handles for {} parameters", vars.len(), self.tensors.len())));
        }
        Ok(BoundParams {
            vars,
            index: &self.index,
        })
    }

    /// Rounds every value through `f32`, the checkpoint storage precision.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Tape handles for a [`ParamStore`], looked up by name.
pub struct BoundParams<'a> {
    vars: Vec<Var>,
    index: &'a HashMap<String, usize>,
}

impl BoundParams<'_> {
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter `{name}` missing from the store"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Glorot-uniform matrix `fan_in x fan_out`.
pub(crate) fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

pub(crate) fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = rand_distr::Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}
