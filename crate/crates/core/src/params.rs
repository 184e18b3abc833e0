//! Named parameter storage and the binding of parameters into a graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Replaces every value with the equally named one from `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "archive holds {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let j = other
                .find(name)
                .ok_or_else(|| Error::Format(format!("archive lacks parameter `{name}`")))?;
            if other.values[j.0].shape() != self.values[i].shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    other.values[j.0].shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = other.values[j.0].clone();
        }
        Ok(())
    }

    /// Binds every parameter as a trainable leaf (`train`) or a constant.
    pub fn bind(&self, train: bool) -> Params<T> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if train {
                    Var::leaf(v.clone())
                } else {
                    Var::constant(v.clone())
                }
            })
            .collect();
        Params { vars }
    }
}

/// Parameters bound into one computation.
#[derive(Clone, Debug)]
pub struct Params<T: Real> {
    vars: Vec<Var<T>>,
}

impl<T: Real> Params<T> {
    pub fn get(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    /// Substitutes one bound parameter, e.g. to differentiate through it alone.
    pub fn replace(&mut self, id: ParamId, var: Var<T>) {
        self.vars[id.0] = var;
    }

    pub fn vars(&self) -> &[Var<T>] {
        &self.vars
    }

    /// Gradients after a backward pass, zeros for untouched parameters.
    pub fn grads(&self) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape().to_vec())))
            .collect()
    }
}

/// Seeded parameter initializer.
pub struct ParamBuilder<T: Real> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<T: Real> ParamBuilder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Runs `f` with `scope` appended to every parameter name.
    pub fn scoped<R>(&mut self, scope: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(scope.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let name = self.full_name(name);
        self.store.push(name, value)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform(name, shape, bound)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape.to_vec(), |_| T::from_f64(rng.random_range(-bound..=bound)));
        self.tensor(name, value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::ones(shape.to_vec()))
    }
}

/// `x·W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(b: &mut ParamBuilder<T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        b.scoped(name, |b| Linear {
            weight: b.fan_in("weight", &[d_in, d_out], d_in),
            bias: bias.then(|| b.zeros("bias", &[d_out])),
        })
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Var<T>) -> Result<Var<T>> {
        let y = x.matmul(p.get(self.weight))?;
        match self.bias {
            Some(b) => y.add_row(p.get(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: Option<ParamId>,
    pub bias: Option<ParamId>,
}

pub const NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Real>(b: &mut ParamBuilder<T>, name: &str, d: usize, bias: bool) -> Self {
        b.scoped(name, |b| LayerNorm {
            gain: Some(b.ones("weight", &[d])),
            bias: bias.then(|| b.zeros("bias", &[d])),
        })
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Var<T>) -> Result<Var<T>> {
        x.layer_norm(self.gain.map(|g| p.get(g)), self.bias.map(|b| p.get(b)), NORM_EPS)
    }
}
