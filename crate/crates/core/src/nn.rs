//! Named parameter storage and the binding context used by every forward.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Name -> tensor map. Names are unique; iteration order is sorted.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelWeights<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelWeights<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate weight {name}")));
        }
        self.map.insert(name, t);
        Ok(())
    }

    /// Insert or overwrite.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        match self.map.get_mut(name) {
            Some(slot) if slot.shape() == t.shape() => {
                *slot = t;
                Ok(())
            }
            Some(slot) => Err(dim_err!("{name}: {:?} vs {:?}", slot.shape(), t.shape())),
            None => Err(Error::Contract(format!("unknown weight {name}"))),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing weight {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn num_params(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation.
pub fn init_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

pub fn init_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = rand_distr::Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

/// Helper that appends initialised layers to a weight map.
pub struct Builder<'r, T, R: ?Sized> {
    pub weights: ModelWeights<T>,
    rng: &'r mut R,
}

impl<'r, T: Scalar, R: Rng + ?Sized> Builder<'r, T, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Self {
            weights: ModelWeights::new(),
            rng,
        }
    }

    pub fn rng(&mut self) -> &mut R {
        self.rng
    }

    pub fn tensor(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        self.weights.insert(name, t)
    }

    pub fn linear(&mut self, prefix: &str, din: usize, dout: usize) -> Result<()> {
        let w = init_uniform(&[din, dout], din, self.rng);
        let b = init_uniform(&[dout], din, self.rng);
        self.tensor(format!("{prefix}.w"), w)?;
        self.tensor(format!("{prefix}.b"), b)
    }

    /// Weight only, no bias.
    pub fn matrix(&mut self, name: &str, din: usize, dout: usize) -> Result<()> {
        let w = init_uniform(&[din, dout], din, self.rng);
        self.tensor(name, w)
    }

    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
        let fan = cin * k * k;
        let w = init_uniform(&[cout, cin, k, k], fan, self.rng);
        let b = init_uniform(&[cout], fan, self.rng);
        self.tensor(format!("{prefix}.w"), w)?;
        self.tensor(format!("{prefix}.b"), b)
    }

    pub fn norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.tensor(format!("{prefix}.g"), Tensor::ones(&[c]))?;
        self.tensor(format!("{prefix}.b"), Tensor::zeros(&[c]))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn finish(self) -> ModelWeights<T> {
        self.weights
    }
}

/// Binds weights onto a tape on first use and exposes layer helpers.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    weights: &'a ModelWeights<T>,
    vars: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, weights: &'a ModelWeights<T>, trainable: bool) -> Self {
        Self {
            tape,
            weights,
            vars: BTreeMap::new(),
            trainable,
        }
    }

    pub fn weights(&self) -> &ModelWeights<T> {
        self.weights
    }

    /// The tape variable for weight `name`.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let t = self.weights.get(name)?.clone();
        let v = if self.trainable {
            self.tape.leaf(t, true)
        } else {
            self.tape.constant(t)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Pre-binds `name` to an existing tape variable.
    pub fn bind(&mut self, name: &str, v: Var) -> Result<()> {
        let want = self.weights.get(name)?.shape();
        if self.tape.shape(v) != want {
            return Err(dim_err!("{name}: bound {:?} vs {:?}", self.tape.shape(v), want));
        }
        self.vars.insert(name.to_string(), v);
        Ok(())
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Gradients for every bound weight, by name.
    pub fn collect_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get(*v)))
            .collect()
    }

    /// `x @ W + b` over the trailing axis.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_bias(y, b)
    }

    pub fn conv(&mut self, x: Var, prefix: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.tape.conv2d(x, w, b, stride, pad)
    }

    pub fn norm(&mut self, x: Var, prefix: &str, groups: usize) -> Result<Var> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.tape.group_norm(x, groups, g, b, 1e-5)
    }
}
