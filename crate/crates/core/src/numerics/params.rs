//! Named parameter storage and per-parameter gradient maps.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Uniform on `[-a, a]`.
    Uniform(f64),
    /// Glorot-style uniform bound from the last two dimensions.
    Xavier,
    Normal(f64),
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters act as constants on the tape and receive no gradient.
    pub requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            requires_grad: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn init<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Uniform(a) => sample_uniform(n, a, rng),
            Init::Xavier => {
                let fan_out = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
                let fan_in = *shape.last().unwrap_or(&1);
                sample_uniform(n, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        self.params[id.0].requires_grad = flag;
    }

    /// Freeze every parameter whose name does not satisfy `keep`.
    pub fn freeze_except(&mut self, keep: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.requires_grad = keep(&p.name);
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.requires_grad = true;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replace every value from another store with the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Invalid(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::shape("load_values", dst.value.shape(), src.value.shape()));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// FNV-1a over names, shapes and value bits; used for determinism checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for &d in p.value.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

fn sample_uniform<R: Rng>(n: usize, a: f64, rng: &mut R) -> Vec<f64> {
    if a == 0.0 {
        return vec![0.0; n];
    }
    let dist = Uniform::new_inclusive(-a, a).expect("valid bound");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Gradient of a scalar with respect to every parameter of a store.
/// Parameters the loss never reached hold `None` and read as zero.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(num_params: usize) -> Self {
        Self {
            grads: vec![None; num_params],
        }
    }

    pub(crate) fn from_vec(grads: Vec<Option<Tensor>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// The gradient for `id`, zero-filled with the parameter's shape if unreached.
    pub fn get_or_zero(&self, store: &ParamStore, id: ParamId) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.add_assign(src),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}
