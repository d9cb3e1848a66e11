//! Invisible-mask embedding: an MLP over the concatenated visible and amodal
//! query embeddings.

use crate::error::{Error, Result};
use crate::nn;
use crate::ops;
use crate::params::{Init, ParamBuilder, ParameterSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct InvisibleEmbedding {
    /// Length-C embedding.
    pub embedding: Tensor,
}

/// `2C → C → C → C`, ReLU after the two hidden layers only.
pub fn register(b: &mut ParamBuilder<'_>, c: usize) -> Result<()> {
    nn::register_linear(b, "invisible.fc1", 2 * c, c, Init::Kaiming { fan_in: 2 * c })?;
    nn::register_linear(b, "invisible.fc2", c, c, Init::Kaiming { fan_in: c })?;
    nn::register_linear(b, "invisible.fc3", c, c, Init::Xavier { fan_in: c, fan_out: c })
}

pub fn invisible_embed(q_visible: &Tensor, q_amodal: &Tensor, p: &ParameterSet) -> Result<InvisibleEmbedding> {
    let c = q_visible.numel();
    if q_amodal.numel() != c {
        return Err(Error::dim(format!(
            "visible query has {c} entries, amodal has {}",
            q_amodal.numel()
        )));
    }
    let joined = ops::concat(&[ops::reshape(q_visible, &[1, c])?, ops::reshape(q_amodal, &[1, c])?], 1)?;
    let h = ops::relu(&nn::linear(p, "invisible.fc1", &joined)?);
    let h = ops::relu(&nn::linear(p, "invisible.fc2", &h)?);
    let out = nn::linear(p, "invisible.fc3", &h)?;
    Ok(InvisibleEmbedding {
        embedding: ops::reshape(&out, &[c])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(c: usize, seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut rng);
        register(&mut b, c).unwrap();
        b.finish()
    }

    fn v(x: &[f64]) -> Tensor {
        Tensor::new(x.to_vec(), &[x.len()]).unwrap()
    }

    #[test]
    fn zero_weights_zero_output() {
        let mut p = params(4, 0);
        let names: Vec<String> = p.names().map(str::to_string).collect();
        for n in names {
            let len = p.get(&n).unwrap().numel();
            p.set_values(&n, vec![0.0; len]).unwrap();
        }
        let out = invisible_embed(&v(&[1.0, 2.0, 3.0, 4.0]), &v(&[-1.0, 0.5, 2.0, 1.0]), &p).unwrap();
        assert_eq!(out.embedding.data(), &[0.0; 4]);
    }

    #[test]
    fn hand_computed_two_dim_case() {
        // fc1 picks the visible half, fc2 = identity, fc3 = [[1, 0], [1, 1]] (x·W).
        let mut p = params(2, 0);
        p.set_values("invisible.fc1.weight", vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        p.set_values("invisible.fc1.bias", vec![0.0, 0.5]).unwrap();
        p.set_values("invisible.fc2.weight", vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        p.set_values("invisible.fc2.bias", vec![0.0, 0.0]).unwrap();
        p.set_values("invisible.fc3.weight", vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        p.set_values("invisible.fc3.bias", vec![0.25, 0.0]).unwrap();
        // h1 = relu([3, -1 + 0.5]) = [3, 0]; h2 = [3, 0]; out = [3 + 0 + 0.25, 0]
        let out = invisible_embed(&v(&[3.0, -1.0]), &v(&[7.0, 9.0]), &p).unwrap();
        assert_eq!(out.embedding.data(), &[3.25, 0.0]);
        // with visible [1, 2]: h1 = [1, 2.5]; out = [1 + 2.5 + 0.25, 2.5]
        let out = invisible_embed(&v(&[1.0, 2.0]), &v(&[7.0, 9.0]), &p).unwrap();
        assert_eq!(out.embedding.data(), &[3.75, 2.5]);
    }

    #[test]
    fn order_of_inputs_matters() {
        let p = params(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = v(&crate::params::uniform_vec(&mut rng, 6, -1.0, 1.0));
        let b = v(&crate::params::uniform_vec(&mut rng, 6, -1.0, 1.0));
        let ab = invisible_embed(&a, &b, &p).unwrap();
        let ba = invisible_embed(&b, &a, &p).unwrap();
        assert_eq!(ab.embedding.numel(), 6);
        assert_ne!(ab.embedding.data(), ba.embedding.data());
    }

    #[test]
    fn mismatched_lengths() {
        let p = params(2, 0);
        assert!(matches!(
            invisible_embed(&v(&[1.0, 2.0]), &v(&[1.0]), &p),
            Err(Error::Dimension(_))
        ));
    }
}
