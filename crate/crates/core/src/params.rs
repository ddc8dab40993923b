//! Named learnable parameters, their AdaGrad accumulators, and gradient maps.

use std::collections::HashMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    /// Slash-separated path such as `cafu_item/w1`.
    pub name: String,
    pub value: Tensor,
    /// Running sum of squared gradients. Same shape as `value`.
    pub accumulator: Tensor,
    /// Frozen parameters never receive gradient.
    pub frozen: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter, or replaces the value of an existing one with the same name.
    pub fn insert(&mut self, name: &str, value: Tensor, frozen: bool) -> usize {
        let accumulator = Tensor::zeros(value.shape());
        let param = Parameter {
            name: name.to_string(),
            value,
            accumulator,
            frozen,
        };
        match self.index.get(name) {
            Some(&id) => {
                self.params[id] = param;
                id
            }
            None => {
                self.params.push(param);
                self.index.insert(name.to_string(), self.params.len() - 1);
                self.params.len() - 1
            }
        }
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<usize, TensorError> {
        self.id(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| &self.params[id])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.id(name).map(move |id| &mut self.params[id])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Ids of every non-frozen parameter, in insertion order.
    pub fn trainable(&self) -> Vec<usize> {
        (0..self.params.len())
            .filter(|&i| !self.params[i].frozen)
            .collect()
    }

    /// Total number of scalar entries across trainable parameters.
    pub fn trainable_entries(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Gradient for each parameter id; `None` where nothing flowed.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn empty(n: usize) -> Self {
        Gradients {
            grads: vec![None; n],
        }
    }

    pub(crate) fn set(&mut self, id: usize, grad: Tensor) {
        self.grads[id] = Some(grad);
    }

    pub fn get(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn by_name(&self, store: &ParamStore, name: &str) -> Option<&Tensor> {
        store.id(name).and_then(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// `self += other`, entry by entry.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.grads.iter_mut().flatten() {
            t.scale_assign(c);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }
}

/// Stable 64-bit FNV-1a, used to derive per-parameter seeds.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG private to one parameter name, so every variant that shares a
/// parameter also shares its initial value.
pub(crate) fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

/// Glorot-uniform matrix `[fan_in × fan_out]`.
pub fn glorot(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = param_rng(seed, name);
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("sized by construction")
}
