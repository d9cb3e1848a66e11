//! Named trainable parameters and the SGD update.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{numel_of, Tensor};

/// Parameters keyed by dot-separated path. Iteration is lexicographic.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a trainable leaf. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        let tensor = if tensor.requires_grad() && tensor.is_leaf() {
            tensor
        } else {
            tensor.to_parameter()
        };
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Overwrite an existing entry's values, keeping its shape.
    pub fn set_values(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        let current = self.get(name)?;
        let shape = current.shape().to_vec();
        self.entries
            .insert(name.to_string(), Tensor::parameter(values, &shape)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&self) {
        self.entries.values().for_each(Tensor::zero_grad);
    }

    /// Constant copies for inference; forward passes record no graph.
    pub fn frozen(&self) -> ParameterSet {
        ParameterSet {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.detach())).collect(),
        }
    }

    /// `p <- p - lr * grad(p)` for every entry; the returned set holds fresh
    /// leaves, so gradients start from zero.
    pub fn sgd_step(&self, learning_rate: f64) -> Result<ParameterSet> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Contract(format!("learning rate {learning_rate} must be finite and >= 0")));
        }
        let mut entries = BTreeMap::new();
        for (name, p) in &self.entries {
            let g = p
                .grad()
                .ok_or_else(|| Error::Contract(format!("parameter {name} has no gradient")))?;
            let data = p
                .data()
                .iter()
                .zip(&g)
                .map(|(v, gi)| v - learning_rate * gi)
                .collect();
            entries.insert(name.clone(), Tensor::parameter(data, p.shape())?);
        }
        self.zero_grad();
        Ok(ParameterSet { entries })
    }

    /// Copy values for every name present in both sets, shapes permitting.
    pub fn copy_shared_from(&mut self, other: &ParameterSet) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in other.iter() {
            if let Some(mine) = self.entries.get(name) {
                if mine.shape() != t.shape() {
                    return Err(Error::dim(format!(
                        "parameter {name}: {:?} vs {:?}",
                        mine.shape(),
                        t.shape()
                    )));
                }
                self.entries.insert(name.to_string(), t.to_parameter());
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// How a parameter's initial values are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    /// Glorot normal over `(fan_in, fan_out)`.
    Xavier { fan_in: usize, fan_out: usize },
    /// He normal, for layers followed by a ReLU.
    Kaiming { fan_in: usize },
}

/// Registers parameters in call order, drawing values from one seeded stream.
pub struct ParamBuilder<'a> {
    rng: &'a mut ChaCha8Rng,
    params: ParameterSet,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            rng,
            params: ParameterSet::new(),
        }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        let n = numel_of(shape);
        let normal = |rng: &mut ChaCha8Rng, std: f64| -> Vec<f64> {
            let d = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| d.sample(rng)).collect()
        };
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal { std } => normal(self.rng, std),
            Init::Xavier { fan_in, fan_out } => normal(self.rng, (2.0 / (fan_in + fan_out) as f64).sqrt()),
            Init::Kaiming { fan_in } => normal(self.rng, (2.0 / fan_in as f64).sqrt()),
        };
        self.params.insert(name, Tensor::parameter(data, shape)?)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn finish(self) -> ParameterSet {
        self.params
    }
}

/// Uniform draw helper for tests and data generation.
pub fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use rand::SeedableRng;

    fn single(name: &str, v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert(name, Tensor::parameter(vec![v], &[1]).unwrap()).unwrap();
        p
    }

    #[test]
    fn sgd_arithmetic() {
        let p = single("w", 1.0);
        let w = p.get("w").unwrap();
        ops::sum(&ops::scale(w, 2.0)).backward().unwrap();
        let next = p.sgd_step(0.5).unwrap();
        assert_eq!(next.get("w").unwrap().data(), &[0.0]);
        assert!(p.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn sgd_zero_lr_keeps_values() {
        let p = single("w", 1.25);
        ops::sum(p.get("w").unwrap()).backward().unwrap();
        assert_eq!(p.sgd_step(0.0).unwrap().get("w").unwrap().data(), &[1.25]);
    }

    #[test]
    fn sgd_missing_grad_names_parameter() {
        let mut p = single("a.b", 1.0);
        p.insert("c", Tensor::parameter(vec![1.0], &[1]).unwrap()).unwrap();
        ops::sum(p.get("c").unwrap()).backward().unwrap();
        let err = p.sgd_step(0.1).unwrap_err().to_string();
        assert!(err.contains("a.b"), "{err}");
    }

    #[test]
    fn sgd_reduces_quadratic() {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::parameter(vec![3.0, -2.0, 0.5], &[3]).unwrap())
            .unwrap();
        let loss = |p: &ParameterSet| {
            let x = p.get("x").unwrap();
            ops::sum(&ops::mul(x, x).unwrap())
        };
        let before = loss(&p);
        before.backward().unwrap();
        let next = p.sgd_step(0.1).unwrap();
        assert!(loss(&next).item() < before.item());
    }

    #[test]
    fn duplicate_names_rejected_and_order_is_lexicographic() {
        let mut p = single("b", 0.0);
        assert!(p.insert("b", Tensor::zeros(&[1])).is_err());
        p.insert("a", Tensor::zeros(&[1])).unwrap();
        p.insert("c.x", Tensor::zeros(&[1])).unwrap();
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["a", "b", "c.x"]);
        assert!(p.iter().all(|(_, t)| t.requires_grad()));
    }

    #[test]
    fn builder_is_seed_deterministic() {
        let build = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut b = ParamBuilder::new(&mut rng);
            b.add("w", &[4, 4], Init::Xavier { fan_in: 4, fan_out: 4 }).unwrap();
            b.finish().get("w").unwrap().data().to_vec()
        };
        assert_eq!(build(3), build(3));
        assert_ne!(build(3), build(4));
    }
}
