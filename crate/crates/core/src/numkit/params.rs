use std::ops::Index;

use rand::Rng;

use super::checkpoint::Checkpoint;
use super::tape::Var;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight initialised uniformly in ±sqrt(6 / (fan_in + fan_out)).
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add(name, Tensor::uniform(shape, bound, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, T::one()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }

    /// `self ← decay·self + (1−decay)·online`, used for slow-moving target copies.
    pub fn ema_from(&mut self, online: &ParamStore<T>, decay: f64) {
        let d = T::c(decay);
        let od = T::one() - d;
        for (dst, src) in self.tensors.iter_mut().zip(&online.tensors) {
            for (a, &b) in dst.data_mut().iter_mut().zip(src.data()) {
                *a = d * *a + od * b;
            }
        }
    }

    pub fn write_into(&self, prefix: &str, ckpt: &mut Checkpoint) {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            ckpt.insert(format!("{prefix}/{n}"), t.cast());
        }
    }

    /// Overwrite every tensor from a checkpoint; names and shapes must match.
    pub fn load_from(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}/{n}");
            let src = ckpt
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key}: stored shape {:?}, model expects {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.cast();
        }
        Ok(())
    }
}

/// Parameters of one store recorded on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn new(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
