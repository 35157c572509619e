use std::collections::BTreeMap;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tensor};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// N(0, 2/fan_in), fan_in = rows.
    Kaiming,
    /// N(0, 2/(fan_in + fan_out)).
    Xavier,
    Zeros,
    Ones,
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kaiming" => Ok(InitScheme::Kaiming),
            "xavier" => Ok(InitScheme::Xavier),
            "zeros" => Ok(InitScheme::Zeros),
            "ones" => Ok(InitScheme::Ones),
            other => Err(Error::Config(format!("unknown init scheme `{other}`"))),
        }
    }
}

/// Initializes a `(rows, cols)` tensor; weight matrices are stored as
/// `fan_in × fan_out`.
pub fn init_parameters<R: Rng>(shape: (usize, usize), scheme: InitScheme, rng: &mut R) -> Tensor {
    let (fan_in, fan_out) = shape;
    let std = match scheme {
        InitScheme::Zeros => return Array2::zeros(shape),
        InitScheme::Ones => return Array2::ones(shape),
        InitScheme::Kaiming => (2.0 / fan_in as f64).sqrt(),
        InitScheme::Xavier => (2.0 / (fan_in + fan_out) as f64).sqrt(),
    };
    Array2::from_shape_simple_fn(shape, || std * rng.sample::<f64, _>(StandardNormal))
}

/// Named tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    /// Inserts a freshly initialized tensor. Its random stream depends only
    /// on `(seed, name)`, so adding tensors never shifts other tensors.
    pub fn init(&mut self, name: &str, shape: (usize, usize), scheme: InitScheme, seed: u64) {
        let mut rng = rng::stream(seed, name, 0);
        self.insert(name, init_parameters(shape, scheme, &mut rng));
    }

    /// Inserts a tensor drawn from U(-bound, bound), keyed like [`Self::init`].
    pub fn init_uniform(&mut self, name: &str, shape: (usize, usize), bound: f64, seed: u64) {
        let mut rng = rng::stream(seed, name, 0);
        self.insert(name, Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound)));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
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

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Removes every tensor whose name starts with `prefix`.
    pub fn drop_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|name, _| !name.starts_with(prefix));
    }

    /// Copies all tensors of `other` into `self`, overwriting on collision.
    pub fn merge(&mut self, other: &ParameterStore) {
        for (name, t) in &other.tensors {
            self.tensors.insert(name.clone(), t.clone());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn check_grads(&self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .get(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.dim() != g.dim() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeros_scheme() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = init_parameters((2, 2), InitScheme::Zeros, &mut rng);
        assert!(t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kaiming_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = init_parameters((128, 80), InitScheme::Kaiming, &mut rng);
        assert!(t.len() >= 10_000);
        let mean = t.mean().unwrap();
        let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.len() as f64;
        let expected = 2.0 / 128.0;
        assert!((var - expected).abs() / expected < 0.1, "variance {var}");
    }

    #[test]
    fn same_seed_same_tensor() {
        let mut a = ParameterStore::new();
        let mut b = ParameterStore::new();
        a.init("w", (4, 3), InitScheme::Kaiming, 9);
        b.init("w", (4, 3), InitScheme::Kaiming, 9);
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_scheme_is_config_error() {
        assert!(matches!("he".parse::<InitScheme>(), Err(Error::Config(_))));
    }
}
