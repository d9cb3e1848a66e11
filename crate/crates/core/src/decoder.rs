//! Mask transformer decoding: the learnable occluder/visible/amodal queries
//! pass through self-attention among themselves, then cross-attention over
//! the encoded ROI tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{HeadConfig, MaskKind, QueryFlags};
use crate::encoder::EncodedTokens;
use crate::error::{Error, Result};
use crate::nn;
use crate::ops;
use crate::params::{Init, ParamBuilder, ParameterSet};
use crate::tensor::Tensor;

pub const QUERY_INIT_STD: f64 = 0.02;

pub fn query_param_name(kind: MaskKind) -> String {
    format!("decoder.query.{}", kind.name())
}

/// The mask query embeddings, each of length C. Disabled queries are `None`;
/// the amodal query always exists.
#[derive(Debug, Clone)]
pub struct MaskQuerySet {
    pub occluder: Option<Tensor>,
    pub visible: Option<Tensor>,
    pub amodal: Tensor,
}

impl MaskQuerySet {
    pub fn from_params(p: &ParameterSet, flags: &QueryFlags) -> Result<Self> {
        let get = |k| p.get(&query_param_name(k)).cloned();
        Ok(Self {
            occluder: flags.occluder.then(|| get(MaskKind::Occluder)).transpose()?,
            visible: flags.visible.then(|| get(MaskKind::Visible)).transpose()?,
            amodal: get(MaskKind::Amodal)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.amodal.numel()
    }

    /// Present queries in `(occluder, visible, amodal)` order.
    pub fn entries(&self) -> Vec<(MaskKind, &Tensor)> {
        let mut v = Vec::with_capacity(3);
        if let Some(q) = &self.occluder {
            v.push((MaskKind::Occluder, q));
        }
        if let Some(q) = &self.visible {
            v.push((MaskKind::Visible, q));
        }
        v.push((MaskKind::Amodal, &self.amodal));
        v
    }

    pub fn get(&self, kind: MaskKind) -> Option<&Tensor> {
        match kind {
            MaskKind::Occluder => self.occluder.as_ref(),
            MaskKind::Visible => self.visible.as_ref(),
            MaskKind::Amodal => Some(&self.amodal),
            MaskKind::Invisible => None,
        }
    }

    /// Stacked `[K × C]` matrix, one row per query.
    pub fn stacked(&self) -> Result<Tensor> {
        let c = self.dim();
        let rows = self
            .entries()
            .into_iter()
            .map(|(kind, q)| {
                if q.numel() != c {
                    return Err(Error::dim(format!("{} query has {} entries, expected {c}", kind.name(), q.numel())));
                }
                ops::reshape(q, &[1, c])
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.len() == 1 {
            return Ok(rows.into_iter().next().expect("one row"));
        }
        ops::concat(&rows, 0)
    }

    fn from_rows(stacked: &Tensor, kinds: &[MaskKind]) -> Result<Self> {
        let c = stacked.shape()[1];
        let mut occluder = None;
        let mut visible = None;
        let mut amodal = None;
        for (i, kind) in kinds.iter().enumerate() {
            let row = ops::reshape(&ops::slice(stacked, 0, i, 1)?, &[c])?;
            match kind {
                MaskKind::Occluder => occluder = Some(row),
                MaskKind::Visible => visible = Some(row),
                MaskKind::Amodal => amodal = Some(row),
                MaskKind::Invisible => unreachable!("invisible is not a decoder query"),
            }
        }
        Ok(Self {
            occluder,
            visible,
            amodal: amodal.ok_or_else(|| Error::Contract("amodal query missing".into()))?,
        })
    }
}

/// Attention weights kept for inspection.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    /// Last decoder layer's cross-attention, averaged over heads, `[K × N]`.
    pub cross_attention_weights: Tensor,
    pub query_kinds: Vec<MaskKind>,
    /// Every decoder attention matrix: `(label, [rows × cols])`.
    pub decoder_weights: Vec<(String, Tensor)>,
}

impl AttentionRecord {
    pub fn row(&self, kind: MaskKind) -> Option<&[f64]> {
        let i = self.query_kinds.iter().position(|k| *k == kind)?;
        let n = self.cross_attention_weights.shape()[1];
        Some(&self.cross_attention_weights.data()[i * n..(i + 1) * n])
    }
}

fn register_query(b: &mut ParamBuilder<'_>, kind: MaskKind, c: usize) -> Result<()> {
    b.add(&query_param_name(kind), &[c], Init::Normal { std: QUERY_INIT_STD })
}

/// Draw the three queries i.i.d. from N(0, 0.02²) with a dedicated seed and
/// register them in a fresh parameter set.
pub fn init_queries(c: usize, rng_seed: u64) -> Result<(MaskQuerySet, ParameterSet)> {
    if c == 0 {
        return Err(Error::Config("query width must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut b = ParamBuilder::new(&mut rng);
    for kind in [MaskKind::Occluder, MaskKind::Visible, MaskKind::Amodal] {
        register_query(&mut b, kind, c)?;
    }
    let p = b.finish();
    let q = MaskQuerySet::from_params(&p, &QueryFlags::full())?;
    Ok((q, p))
}

pub fn register(b: &mut ParamBuilder<'_>, cfg: &HeadConfig) -> Result<()> {
    let c = cfg.embed_dim;
    for kind in cfg.queries.query_kinds() {
        register_query(b, kind, c)?;
    }
    for l in 0..cfg.decoder_layers {
        let p = format!("decoder.layer{l}");
        nn::register_attention(b, &format!("{p}.self_attn"), c)?;
        nn::register_attention(b, &format!("{p}.cross_attn"), c)?;
        if cfg.layer_norm {
            nn::register_layer_norm(b, &format!("{p}.norm1"), c)?;
            nn::register_layer_norm(b, &format!("{p}.norm2"), c)?;
        }
        if cfg.decoder_ffn {
            nn::register_ffn(b, &format!("{p}.ffn"), c, cfg.ffn_dim)?;
            if cfg.layer_norm {
                nn::register_layer_norm(b, &format!("{p}.norm3"), c)?;
            }
        }
    }
    Ok(())
}

fn mean_of(weights: &[Tensor]) -> Result<Tensor> {
    if weights.len() == 1 {
        return Ok(weights[0].detach());
    }
    let n = weights[0].numel();
    let mut acc = vec![0.0; n];
    for w in weights {
        acc.iter_mut().zip(w.data()).for_each(|(a, v)| *a += v);
    }
    let k = weights.len() as f64;
    Tensor::new(acc.into_iter().map(|v| v / k).collect(), weights[0].shape())
}

/// `Q' = Norm(SelfAttn(Q) + Q)`, then `Norm(CrossAttn(Q', F_e + pos, F_e) + Q')`,
/// repeated per decoder layer.
pub fn decode(
    queries: &MaskQuerySet,
    tokens: &EncodedTokens,
    p: &ParameterSet,
    cfg: &HeadConfig,
) -> Result<(MaskQuerySet, AttentionRecord)> {
    let c = queries.dim();
    if tokens.channels() != c {
        return Err(Error::dim(format!(
            "token width {} does not match query width {c}",
            tokens.channels()
        )));
    }
    let kinds: Vec<MaskKind> = queries.entries().into_iter().map(|(k, _)| k).collect();
    let mut q = queries.stacked()?;
    let keys = ops::add(&tokens.tokens, &tokens.positions)?;
    let mut decoder_weights = Vec::new();
    let mut last_cross = Vec::new();
    for l in 0..cfg.decoder_layers {
        let prefix = format!("decoder.layer{l}");
        let (sa, sw) = nn::attention(p, &format!("{prefix}.self_attn"), &q, &q, &q, cfg.heads)?;
        let q1 = nn::residual_norm(p, &format!("{prefix}.norm1"), &q, &sa, cfg.layer_norm)?;
        let (ca, cw) = nn::attention(p, &format!("{prefix}.cross_attn"), &q1, &keys, &tokens.tokens, cfg.heads)?;
        let mut q2 = nn::residual_norm(p, &format!("{prefix}.norm2"), &q1, &ca, cfg.layer_norm)?;
        if cfg.decoder_ffn {
            let f = nn::ffn(p, &format!("{prefix}.ffn"), &q2)?;
            q2 = nn::residual_norm(p, &format!("{prefix}.norm3"), &q2, &f, cfg.layer_norm)?;
        }
        for (h, w) in sw.iter().enumerate() {
            decoder_weights.push((format!("{prefix}.self.head{h}"), w.detach()));
        }
        for (h, w) in cw.iter().enumerate() {
            decoder_weights.push((format!("{prefix}.cross.head{h}"), w.detach()));
        }
        last_cross = cw;
        q = q2;
    }
    let record = AttentionRecord {
        cross_attention_weights: mean_of(&last_cross)?,
        query_kinds: kinds.clone(),
        decoder_weights,
    };
    Ok((MaskQuerySet::from_rows(&q, &kinds)?, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneKind;

    #[test]
    fn init_is_seeded() {
        let (a, pa) = init_queries(16, 7).unwrap();
        let (b, _) = init_queries(16, 7).unwrap();
        let (c, _) = init_queries(16, 8).unwrap();
        assert_eq!(a.amodal.data(), b.amodal.data());
        assert_ne!(a.amodal.data(), c.amodal.data());
        let names: Vec<&str> = pa.names().collect();
        assert_eq!(
            names,
            vec!["decoder.query.amodal", "decoder.query.occluder", "decoder.query.visible"]
        );
    }

    #[test]
    fn init_std_is_two_hundredths() {
        let (_, p) = init_queries(10_000, 1).unwrap();
        for (_, t) in p.iter() {
            let n = t.numel() as f64;
            let m = t.data().iter().sum::<f64>() / n;
            let sd = (t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            assert!((sd - 0.02).abs() < 0.005, "std {sd}");
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let cfg = HeadConfig {
            embed_dim: 8,
            backbone: BackboneKind::Identity,
            input_channels: 8,
            ..HeadConfig::default()
        };
        let (q, _) = init_queries(4, 0).unwrap();
        let tokens = EncodedTokens {
            tokens: Tensor::zeros(&[4, 8]),
            positions: Tensor::zeros(&[4, 8]),
            height: 2,
            width: 2,
        };
        assert!(matches!(decode(&q, &tokens, &ParameterSet::new(), &cfg), Err(Error::Dimension(_))));
    }
}
