use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// How a freshly declared parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
    /// Uniform in ±1/sqrt(fan_in), the usual conv default.
    FanIn(usize),
    /// Uniform in ±sqrt(6/fan_in), variance-preserving under (G)ELU.
    He(usize),
    Normal(f64),
}

/// Named parameter tensors, kept in lexicographic name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<R> {
    tensors: BTreeMap<String, Tensor<R>>,
    frozen: BTreeSet<String>,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<R>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<R>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        let names: Vec<_> = self
            .tensors
            .keys()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect();
        self.frozen.extend(names);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// Copies values for every name in `other` that also exists here with the
    /// same shape. Returns the names that were copied.
    pub fn load_matching(&mut self, other: &ParamStore<R>) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        for (name, t) in &other.tensors {
            if let Some(dst) = self.tensors.get_mut(name) {
                if dst.shape() != t.shape() {
                    return Err(Error::invalid(format!(
                        "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                        dst.shape(),
                        t.shape()
                    )));
                }
                *dst = t.clone();
                copied.push(name.clone());
            }
        }
        Ok(copied)
    }
}

/// Collects parameter declarations and fills them from a single seed.
/// Values depend only on (seed, declared names, shapes, inits), never on
/// declaration order.
#[derive(Default)]
pub struct ParamBuilder {
    specs: BTreeMap<String, (Vec<usize>, Init)>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.specs.insert(name.into(), (shape.to_vec(), init));
    }

    pub fn build<R: Real>(&self, seed: u64) -> ParamStore<R> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, (shape, init)) in &self.specs {
            let n: usize = shape.iter().product();
            let data: Vec<R> = match *init {
                Init::Zeros => vec![R::zero(); n],
                Init::Ones => vec![R::one(); n],
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    uniform(&mut rng, n, a)
                }
                Init::FanIn(fan_in) => uniform(&mut rng, n, 1.0 / (fan_in as f64).sqrt()),
                Init::He(fan_in) => uniform(&mut rng, n, (6.0 / fan_in as f64).sqrt()),
                Init::Normal(std) => (0..n)
                    .map(|_| {
                        let v: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                        R::of((v * std) as f32 as f64)
                    })
                    .collect(),
            };
            store.insert(name.clone(), Tensor::new(shape.clone(), data).expect("declared shape"));
        }
        store
    }
}

fn uniform<R: Real>(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<R> {
    // Rounded through f32 so f32 and f64 builds start from identical values.
    (0..n)
        .map(|_| R::of(rng.random_range(-a..a) as f32 as f64))
        .collect()
}
