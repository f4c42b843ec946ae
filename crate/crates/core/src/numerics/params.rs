use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Gradients, Real, Tensor};

/// Parameter initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Clone, Debug)]
struct Param<T> {
    value: Tensor<T>,
    grad: Tensor<T>,
    trainable: bool,
}

/// Named parameter tensors with additive gradient accumulators.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

/// Stable 64-bit FNV-1a, used to derive one RNG stream per parameter name.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Truncated-normal sample stream seeded from `(seed, name)`.
pub fn trunc_normal<T: Real>(seed: u64, name: &str, n: usize, std: f64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(&mut rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect()
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    /// Register (or overwrite) a parameter. Initial values depend only on
    /// `(seed, name)`, not on registration order.
    pub fn init(&mut self, seed: u64, name: &str, shape: &[usize], init: Init) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::TruncNormal(std) => trunc_normal(seed, name, n, std),
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Const(c) => vec![T::of(c); n],
        };
        self.insert(name, Tensor::from_vec(shape, data));
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(
            name.to_string(),
            Param {
                value,
                grad,
                trainable: true,
            },
        );
    }

    /// Register a fixed tensor that is never updated.
    pub fn insert_frozen(&mut self, name: &str, value: Tensor<T>) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(
            name.to_string(),
            Param {
                value,
                grad,
                trainable: false,
            },
        );
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(p) = self.params.get_mut(name) {
            p.trainable = trainable;
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).map(|p| p.trainable).unwrap_or(false)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter().map(|(k, p)| (k, &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across trainable parameters.
    pub fn scalar_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Add a backward pass's gradients to the accumulators of matching parameters.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (name, g) in grads.iter() {
            if let Some(p) = self.params.get_mut(name) {
                if p.trainable && p.grad.shape() == g.shape() {
                    p.grad.add_assign(g);
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub(crate) fn for_each_trainable(
        &mut self,
        mut f: impl FnMut(&str, &mut Tensor<T>, &Tensor<T>),
    ) {
        for (name, p) in self.params.iter_mut() {
            if p.trainable {
                f(name, &mut p.value, &p.grad);
            }
        }
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Merge all entries of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore<T>) {
        for (k, p) in &other.params {
            self.params.insert(format!("{prefix}{k}"), p.clone());
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn sub_store(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter_map(|(k, p)| k.strip_prefix(prefix).map(|s| (s.to_string(), p.clone())))
                .collect(),
        }
    }

    /// Bitwise equality of all values.
    pub fn values_equal(&self, other: &ParamStore<T>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| {
                    ka == kb
                        && a.value.shape() == b.value.shape()
                        && a.value
                            .data()
                            .iter()
                            .zip(b.value.data())
                            .all(|(x, y)| x.to_bits_eq(y))
                })
    }
}

trait BitsEq {
    fn to_bits_eq(&self, other: &Self) -> bool;
}

impl<T: Real> BitsEq for T {
    fn to_bits_eq(&self, other: &Self) -> bool {
        // Real has no to_bits; compare through f64 which is exact for f32 and f64.
        let (a, b) = (self.as_f64(), other.as_f64());
        a.to_bits() == b.to_bits()
    }
}
