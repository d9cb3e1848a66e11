//! Transformer building blocks over token-major `[tokens × channels]` tensors.
//!
//! Layers are plain functions over a [`ParameterSet`] and a name prefix; the
//! matching `register_*` functions create those parameters.

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Init, ParamBuilder, ParameterSet};
use crate::tensor::Tensor;

pub fn register_linear(b: &mut ParamBuilder<'_>, prefix: &str, fan_in: usize, fan_out: usize, init: Init) -> Result<()> {
    b.add(&format!("{prefix}.weight"), &[fan_in, fan_out], init)?;
    b.add(&format!("{prefix}.bias"), &[fan_out], Init::Zeros)
}

/// `x · W + b` with `W` stored `[in × out]`.
pub fn linear(p: &ParameterSet, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    ops::add(&ops::matmul(x, w)?, b)
}

pub fn register_layer_norm(b: &mut ParamBuilder<'_>, prefix: &str, dim: usize) -> Result<()> {
    b.add(&format!("{prefix}.gain"), &[dim], Init::Ones)?;
    b.add(&format!("{prefix}.bias"), &[dim], Init::Zeros)
}

pub fn layer_norm(p: &ParameterSet, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let dim = *x.shape().last().expect("rank >= 1");
    ops::layer_norm(
        x,
        dim,
        p.get(&format!("{prefix}.gain"))?,
        p.get(&format!("{prefix}.bias"))?,
    )
}

pub fn register_attention(b: &mut ParamBuilder<'_>, prefix: &str, dim: usize) -> Result<()> {
    for proj in ["q", "k", "v", "out"] {
        register_linear(b, &format!("{prefix}.{proj}"), dim, dim, Init::Xavier { fan_in: dim, fan_out: dim })?;
    }
    Ok(())
}

/// Scaled dot-product attention with `heads` heads.
///
/// `query` is `[Nq × C]`; `key` and `value` are `[Nk × C]` (they differ when
/// positional terms ride on the keys only). Returns the projected output
/// `[Nq × C]` and each head's `[Nq × Nk]` weight matrix.
pub fn attention(
    p: &ParameterSet,
    prefix: &str,
    query: &Tensor,
    key: &Tensor,
    value: &Tensor,
    heads: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let dim = query.shape()[1];
    if key.shape()[1] != dim || value.shape() != key.shape() {
        return Err(Error::dim(format!(
            "attention: query {:?}, key {:?}, value {:?}",
            query.shape(),
            key.shape(),
            value.shape()
        )));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
    }
    let q = linear(p, &format!("{prefix}.q"), query)?;
    let k = linear(p, &format!("{prefix}.k"), key)?;
    let v = linear(p, &format!("{prefix}.v"), value)?;
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q.clone(), k.clone(), v.clone())
        } else {
            (
                ops::slice(&q, 1, h * head_dim, head_dim)?,
                ops::slice(&k, 1, h * head_dim, head_dim)?,
                ops::slice(&v, 1, h * head_dim, head_dim)?,
            )
        };
        let scores = ops::scale(&ops::matmul(&qh, &ops::transpose(&kh)?)?, scale);
        let attn = ops::softmax(&scores, 1)?;
        outputs.push(ops::matmul(&attn, &vh)?);
        weights.push(attn);
    }
    let merged = if heads == 1 {
        outputs.pop().expect("one head")
    } else {
        ops::concat(&outputs, 1)?
    };
    Ok((linear(p, &format!("{prefix}.out"), &merged)?, weights))
}

pub fn register_ffn(b: &mut ParamBuilder<'_>, prefix: &str, dim: usize, hidden: usize) -> Result<()> {
    register_linear(b, &format!("{prefix}.fc1"), dim, hidden, Init::Kaiming { fan_in: dim })?;
    register_linear(b, &format!("{prefix}.fc2"), hidden, dim, Init::Xavier { fan_in: hidden, fan_out: dim })
}

pub fn ffn(p: &ParameterSet, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let h = ops::relu(&linear(p, &format!("{prefix}.fc1"), x)?);
    linear(p, &format!("{prefix}.fc2"), &h)
}

/// `LayerNorm(x + sublayer)`, or just the residual sum when normalization is off.
pub fn residual_norm(p: &ParameterSet, norm_prefix: &str, x: &Tensor, sub: &Tensor, use_norm: bool) -> Result<Tensor> {
    let s = ops::add(x, sub)?;
    if use_norm {
        layer_norm(p, norm_prefix, &s)
    } else {
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attn_params(dim: usize, seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut rng);
        register_attention(&mut b, "a", dim).unwrap();
        b.finish()
    }

    #[test]
    fn attention_rows_are_distributions() {
        let p = attn_params(8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::new(crate::params::uniform_vec(&mut rng, 5 * 8, -2.0, 2.0), &[5, 8]).unwrap();
        let kv = Tensor::new(crate::params::uniform_vec(&mut rng, 7 * 8, -2.0, 2.0), &[7, 8]).unwrap();
        for heads in [1, 2, 4] {
            let (out, w) = attention(&p, "a", &x, &kv, &kv, heads).unwrap();
            assert_eq!(out.shape(), &[5, 8]);
            assert_eq!(w.len(), heads);
            for m in &w {
                assert_eq!(m.shape(), &[5, 7]);
                for row in m.data().chunks(7) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let p = attn_params(6, 1);
        let x = Tensor::ones(&[2, 6]);
        assert!(matches!(attention(&p, "a", &x, &x, &x, 4), Err(Error::Config(_))));
    }
}
