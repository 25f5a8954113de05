//! Named parameter storage, deterministic initialization, and tape binding.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, TensorId};

/// Ordered name -> tensor map holding every learnable parameter of a model.
/// BTreeMap keeps iteration order stable, which the optimizer, checkpoint
/// format and determinism guarantees all rely on.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    /// Insert a fresh parameter; duplicate names are a wiring bug.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), t);
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Absorb another store; name collisions are a wiring bug.
    pub fn merge(&mut self, other: ParamStore<T>) {
        for (name, t) in other.map {
            self.insert(name, t);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast::<U>())).collect() }
    }

    pub fn bits_eq(&self, other: &ParamStore<T>) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(other.map.iter())
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.bits_eq(tb))
    }
}

/// Name -> tape id map produced by binding a store onto a tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    map: BTreeMap<String, TensorId>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<TensorId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn insert(&mut self, name: impl Into<String>, id: TensorId) {
        self.map.insert(name.into(), id);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &TensorId)> {
        self.map.iter()
    }
}

/// Bind every parameter onto the tape, as grad-tracked leaves when
/// `trainable`.
pub fn bind_all<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, trainable: bool) -> Bound {
    bind_with_overrides(tape, store, trainable, &BTreeMap::new())
}

/// Like [`bind_all`], but names present in `overrides` use the given
/// already-placed tape ids instead. Gradient checks route hand-placed leaf
/// tensors into chosen parameter slots this way.
pub fn bind_with_overrides<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    trainable: bool,
    overrides: &BTreeMap<String, TensorId>,
) -> Bound {
    let mut bound = Bound::default();
    for (name, t) in store.iter() {
        let id = match overrides.get(name) {
            Some(&id) => id,
            None if trainable => tape.param(t.clone()),
            None => tape.constant(t.clone()),
        };
        bound.insert(name.clone(), id);
    }
    bound
}

fn fnv1a64(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic per-purpose RNG stream. Distinct labels decorrelate the
/// streams, so adding parameters to one group never shifts another group's
/// draws (keeps shared groups bitwise-identical across model variants).
pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15) ^ fnv1a64(label))
}

/// Truncated normal init: N(0, std²) with draws beyond 2 std resampled.
/// Samples in f64 so f32 and f64 stores initialize to the same values.
pub fn trunc_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0f64, std).expect("std must be positive");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            loop {
                let v = dist.sample(rng);
                if v.abs() <= 2.0 * std {
                    return T::from_f64(v);
                }
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data length agree by construction")
}

/// He (Kaiming) normal init for conv/relu layers: std = sqrt(2 / fan_in).
pub fn he_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0f64, std).expect("fan_in must be positive");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape/data length agree by construction")
}

/// Overwrite a store with values suited to finite-difference checks: the
/// training init is a degenerate point for them (attention logits so small
/// that softmax gradients drown in FD noise, zero biases parking relu
/// pre-activations exactly on their kinks). Moderate random weights and
/// biases bounded away from zero avoid both.
pub fn randomize_for_grad_check<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    for (name, t) in store.iter_mut() {
        let last = name.rsplit('.').next().unwrap_or("");
        let range = match last {
            "g" => (0.9, 1.1),
            "wq" | "wk" | "wv" | "wo" => (-0.08, 0.08),
            _ if last.starts_with('b') => (0.02, 0.1),
            _ => (-0.15, 0.15),
        };
        for v in t.data_mut() {
            *v = T::from_f64(rng.random_range(range.0..range.1));
        }
    }
}
