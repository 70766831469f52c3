//! Named parameter collections, initialization and the Adam optimizer.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Grads, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered, named parameter collection. Order is part of the architecture: two
/// stores built from the same configuration list identical names and shapes.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±scale/√fan_in`.
    FanIn(f64),
    Zero,
    Const(f64),
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let value = match init {
            Init::Zero => Tensor::zeros(shape),
            Init::Const(c) => Tensor::full(shape, T::lit(c)),
            Init::FanIn(scale) => {
                let bound = scale / (fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
            }
        };
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Inserts every parameter into `g`, as gradient leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.input(p.value.clone(), trainable)).collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian `f32` values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update((p.value.rank() as u64).to_le_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                h.update(x.as_f32().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Overwrites every value with uniform noise in `±scale/√fan_in`, zero-initialized
    /// parameters included. Fan-in is the product of all axes after the first.
    pub fn randomize<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        for p in &mut self.params {
            let fan_in = p.value.shape().iter().skip(1).product::<usize>().max(1);
            let bound = scale / (fan_in as f64).sqrt();
            for x in p.value.data_mut() {
                *x = T::lit(rng.random_range(-bound..=bound));
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect(),
        }
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout<U: Real>(&self, other: &ParamStore<U>) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }
}

/// Graph variables for one bound [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collects the gradient of every parameter, zero-filled where absent.
    pub fn gradients<T: Real>(&self, store: &ParamStore<T>, grads: &mut Grads<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(store.iter())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u32,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { cfg, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.step += 1;
        let b1 = T::lit(self.cfg.beta1);
        let b2 = T::lit(self.cfg.beta2);
        let c1 = T::one() - b1.powi(self.step as i32);
        let c2 = T::one() - b2.powi(self.step as i32);
        let lr = T::lit(self.cfg.lr);
        let eps = T::lit(self.cfg.eps);
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in
                p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
