use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Truncated normal (cut at two standard deviations) with variance
    /// `scale / fan_in` after truncation.
    VarianceScaling {
        fan_in: usize,
        scale: f64,
    },
}

impl Init {
    pub fn unit_variance(fan_in: usize) -> Self {
        Init::VarianceScaling { fan_in, scale: 1.0 }
    }
}

// Standard deviation of a unit normal truncated to [-2, 2].
const TRUNCATED_NORMAL_STD: f64 = 0.879_625_661_034_239_8;

/// Named learnable tensors. Iteration is lexicographic by path.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    seed: u64,
    params: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Creates `path` with a value that depends only on `(shape, path, seed)`.
    pub fn init(&mut self, path: &str, shape: &[usize], init: Init) -> Result<&Tensor> {
        if self.params.contains_key(path) {
            return Err(Error::Contract(format!("parameter `{path}` initialized twice")));
        }
        let value = initial_value(path, shape, init, self.seed);
        Ok(self.params.entry(path.to_string()).or_insert(value))
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) {
        self.params.insert(path.into(), value);
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.params.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}

fn initial_value(path: &str, shape: &[usize], init: Init, seed: u64) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::VarianceScaling { fan_in, scale } => {
            let std = (scale / fan_in.max(1) as f64).sqrt() / TRUNCATED_NORMAL_STD;
            let mut rng = ChaCha8Rng::seed_from_u64(path_seed(path, seed));
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| loop {
                    let z: f64 = rng.sample(StandardNormal);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect();
            Tensor::from_vec(shape, data)
        }
    }
}

/// FNV-1a over the path, mixed with the store seed through splitmix64.
fn path_seed(path: &str, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in path.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
