//! Mask prediction: per-pixel ROI embeddings, dot products with the query
//! and invisible embeddings, and the training loss.

use crate::config::{HeadConfig, MaskKind};
use crate::decoder::{self, AttentionRecord, MaskQuerySet};
use crate::encoder::{self, EncodedTokens};
use crate::error::{Error, Result};
use crate::invisible::{invisible_embed, InvisibleEmbedding};
use crate::ops;
use crate::params::ParameterSet;
use crate::roi::{BoundingBox, RoiFeature};
use crate::tensor::Tensor;

/// `[C × H_m × W_m]` embedding of every mask pixel.
#[derive(Debug, Clone)]
pub struct PerPixelEmbeddings {
    pub e_roi: Tensor,
}

impl PerPixelEmbeddings {
    pub fn channels(&self) -> usize {
        self.e_roi.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.e_roi.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.e_roi.shape()[2]
    }
}

/// Flatten the ROI feature, add the encoder tokens, unflatten.
pub fn per_pixel_embeddings(roi_upsampled: &RoiFeature, tokens: &EncodedTokens) -> Result<PerPixelEmbeddings> {
    let (c, h, w) = (roi_upsampled.channels(), roi_upsampled.height(), roi_upsampled.width());
    if tokens.count() != h * w || tokens.tokens.shape()[0] != h * w {
        return Err(Error::dim(format!(
            "{} tokens cannot cover a {h}x{w} ROI",
            tokens.tokens.shape()[0]
        )));
    }
    if tokens.channels() != c {
        return Err(Error::dim(format!("token width {} vs ROI channels {c}", tokens.channels())));
    }
    let flat = ops::reshape(&roi_upsampled.values, &[c, h * w])?;
    let sum = ops::add(&flat, &tokens.channel_major()?)?;
    Ok(PerPixelEmbeddings {
        e_roi: ops::reshape(&sum, &[c, h, w])?,
    })
}

/// One predicted mask: logits `[H_m × W_m]`.
#[derive(Debug, Clone)]
pub struct MaskMap {
    pub kind: MaskKind,
    pub logits: Tensor,
}

impl MaskMap {
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.data().iter().map(|&x| ops::sigmoid_scalar(x)).collect()
    }
}

/// Output masks in `(occluder, visible, amodal, invisible)` order; disabled
/// heads are simply absent.
#[derive(Debug, Clone)]
pub struct MaskPredictionSet {
    pub masks: Vec<MaskMap>,
    pub height: usize,
    pub width: usize,
}

impl MaskPredictionSet {
    pub fn get(&self, kind: MaskKind) -> Option<&MaskMap> {
        self.masks.iter().find(|m| m.kind == kind)
    }

    pub fn amodal(&self) -> &MaskMap {
        self.get(MaskKind::Amodal).expect("amodal mask is always predicted")
    }

    pub fn kinds(&self) -> Vec<MaskKind> {
        self.masks.iter().map(|m| m.kind).collect()
    }
}

/// `logit_k[y, x] = Σ_c e[c, y, x] · embed_k[c]` for every present embedding.
pub fn predict_masks(
    e: &PerPixelEmbeddings,
    queries: &MaskQuerySet,
    inv: Option<&InvisibleEmbedding>,
) -> Result<MaskPredictionSet> {
    let (c, h, w) = (e.channels(), e.height(), e.width());
    let mut kinds = Vec::with_capacity(4);
    let mut rows = Vec::with_capacity(4);
    let mut push = |kind: MaskKind, t: &Tensor| -> Result<()> {
        if t.numel() != c {
            return Err(Error::dim(format!("{} embedding has {} entries, pixels have {c}", kind.name(), t.numel())));
        }
        kinds.push(kind);
        rows.push(ops::reshape(t, &[1, c])?);
        Ok(())
    };
    for (kind, q) in queries.entries() {
        push(kind, q)?;
    }
    if let Some(inv) = inv {
        push(MaskKind::Invisible, &inv.embedding)?;
    }
    let stacked = if rows.len() == 1 {
        rows.pop().expect("one row")
    } else {
        ops::concat(&rows, 0)?
    };
    let logits = ops::matmul(&stacked, &ops::reshape(&e.e_roi, &[c, h * w])?)?;
    let masks = kinds
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let row = if kinds.len() == 1 {
                logits.clone()
            } else {
                ops::slice(&logits, 0, i, 1)?
            };
            Ok(MaskMap {
                kind,
                logits: ops::reshape(&row, &[h, w])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskPredictionSet {
        masks,
        height: h,
        width: w,
    })
}

/// Binary ground truth at mask resolution, row-major `[H_m × W_m]` in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTargets {
    pub height: usize,
    pub width: usize,
    pub occluder: Vec<f64>,
    pub visible: Vec<f64>,
    pub amodal: Vec<f64>,
    pub invisible: Vec<f64>,
}

impl MaskTargets {
    pub fn get(&self, kind: MaskKind) -> &[f64] {
        match kind {
            MaskKind::Occluder => &self.occluder,
            MaskKind::Visible => &self.visible,
            MaskKind::Amodal => &self.amodal,
            MaskKind::Invisible => &self.invisible,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        for kind in MaskKind::ALL {
            let m = self.get(kind);
            if m.len() != n {
                return Err(Error::dim(format!(
                    "{} target has {} pixels, expected {n}",
                    kind.name(),
                    m.len()
                )));
            }
            if let Some(v) = m.iter().find(|v| **v != 0.0 && **v != 1.0) {
                return Err(Error::Input(format!("{} target holds non-binary value {v}", kind.name())));
            }
        }
        Ok(())
    }
}

/// Per-head binary cross-entropy terms, each a mean over pixels.
pub fn mask_loss_terms(pred: &MaskPredictionSet, gt: &MaskTargets) -> Result<Vec<(MaskKind, Tensor)>> {
    gt.validate()?;
    if (gt.height, gt.width) != (pred.height, pred.width) {
        return Err(Error::dim(format!(
            "targets {}x{} vs predictions {}x{}",
            gt.height, gt.width, pred.height, pred.width
        )));
    }
    pred.masks
        .iter()
        .map(|m| {
            let t = Tensor::new(gt.get(m.kind).to_vec(), &[gt.height, gt.width])?;
            Ok((m.kind, ops::bce_with_logits(&m.logits, &t)?))
        })
        .collect()
}

/// Sum of the per-head mean cross-entropies, equal weights.
pub fn mask_loss(pred: &MaskPredictionSet, gt: &MaskTargets) -> Result<Tensor> {
    let terms = mask_loss_terms(pred, gt)?;
    sum_terms(terms.iter().map(|(_, t)| t))
}

pub(crate) fn sum_terms<'a>(mut terms: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let first = terms
        .next()
        .ok_or_else(|| Error::Contract("no loss terms".into()))?
        .clone();
    terms.try_fold(first, |acc, t| ops::add(&acc, t))
}

/// Everything computed for one ROI.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub masks: MaskPredictionSet,
    pub attention: AttentionRecord,
    /// Encoder self-attention, `[layer][head]`.
    pub encoder_attention: Vec<Vec<Tensor>>,
}

/// Full head on one ROI of a feature map: encode → decode → invisible
/// embedding → per-pixel embeddings → masks. `bbox` is in feature-map pixels.
pub fn forward_full(feature_map: &Tensor, bbox: &BoundingBox, p: &ParameterSet, cfg: &HeadConfig) -> Result<HeadOutput> {
    let enc = encoder::encode(feature_map, bbox, p, cfg)?;
    let queries = MaskQuerySet::from_params(p, &cfg.queries)?;
    let (decoded, attention) = decoder::decode(&queries, &enc.tokens, p, cfg)?;
    let inv = if cfg.queries.invisible {
        let v = decoded
            .visible
            .as_ref()
            .ok_or_else(|| Error::Config("invisible embedding needs the visible query".into()))?;
        Some(invisible_embed(v, &decoded.amodal, p)?)
    } else {
        None
    };
    let e = per_pixel_embeddings(&enc.roi, &enc.tokens)?;
    let masks = predict_masks(&e, &decoded, inv.as_ref())?;
    Ok(HeadOutput {
        masks,
        attention,
        encoder_attention: enc.attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::init_queries;

    fn tokens_from(c: usize, h: usize, w: usize, data: Vec<f64>) -> EncodedTokens {
        EncodedTokens {
            tokens: Tensor::new(data, &[h * w, c]).unwrap(),
            positions: Tensor::zeros(&[h * w, c]),
            height: h,
            width: w,
        }
    }

    #[test]
    fn zero_tokens_or_zero_roi() {
        let roi = RoiFeature::new(Tensor::new((0..12).map(f64::from).collect(), &[3, 2, 2]).unwrap()).unwrap();
        let zero_tokens = tokens_from(3, 2, 2, vec![0.0; 12]);
        let e = per_pixel_embeddings(&roi, &zero_tokens).unwrap();
        assert_eq!(e.e_roi.data(), roi.values.data());

        let zero_roi = RoiFeature::new(Tensor::zeros(&[3, 2, 2])).unwrap();
        let toks = tokens_from(3, 2, 2, (0..12).map(f64::from).collect());
        let e = per_pixel_embeddings(&zero_roi, &toks).unwrap();
        // token-major rows become channel-major planes
        let expect = crate::ops::transpose_data(toks.tokens.data(), 4, 3);
        assert_eq!(e.e_roi.data(), expect.as_slice());

        let wrong = tokens_from(3, 1, 2, vec![0.0; 6]);
        assert!(matches!(per_pixel_embeddings(&roi, &wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_embedding_gives_half_probability() {
        let e = PerPixelEmbeddings {
            e_roi: Tensor::zeros(&[4, 3, 3]),
        };
        let (q, _) = init_queries(4, 0).unwrap();
        let pred = predict_masks(&e, &q, None).unwrap();
        assert_eq!(pred.kinds(), vec![MaskKind::Occluder, MaskKind::Visible, MaskKind::Amodal]);
        for m in &pred.masks {
            assert!(m.logits.data().iter().all(|v| *v == 0.0));
            assert!(m.probabilities().iter().all(|p| *p == 0.5));
        }
    }

    #[test]
    fn scalar_product_case() {
        let e = PerPixelEmbeddings {
            e_roi: Tensor::ones(&[1, 2, 2]),
        };
        let q = MaskQuerySet {
            occluder: None,
            visible: None,
            amodal: Tensor::new(vec![3.0], &[1]).unwrap(),
        };
        let pred = predict_masks(&e, &q, None).unwrap();
        assert_eq!(pred.masks.len(), 1);
        assert_eq!(pred.amodal().logits.data(), &[3.0; 4]);
    }

    #[test]
    fn loss_examples() {
        let (h, w) = (2, 2);
        let amodal = vec![1.0, 1.0, 0.0, 1.0];
        let visible = vec![1.0, 0.0, 0.0, 1.0];
        let gt = MaskTargets {
            height: h,
            width: w,
            occluder: vec![0.0, 1.0, 1.0, 0.0],
            invisible: vec![0.0, 1.0, 0.0, 0.0],
            visible,
            amodal,
        };
        let saturated = MaskPredictionSet {
            masks: MaskKind::ALL
                .iter()
                .map(|&k| MaskMap {
                    kind: k,
                    logits: Tensor::new(gt.get(k).iter().map(|t| if *t > 0.5 { 20.0 } else { -20.0 }).collect(), &[h, w])
                        .unwrap(),
                })
                .collect(),
            height: h,
            width: w,
        };
        assert!(mask_loss(&saturated, &gt).unwrap().item() < 1e-6);

        let zeros = MaskPredictionSet {
            masks: MaskKind::ALL
                .iter()
                .map(|&k| MaskMap {
                    kind: k,
                    logits: Tensor::zeros(&[h, w]),
                })
                .collect(),
            height: h,
            width: w,
        };
        let l = mask_loss(&zeros, &gt).unwrap().item();
        assert!((l - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let mut bad = gt.clone();
        bad.amodal[0] = 0.5;
        assert!(matches!(mask_loss(&zeros, &bad), Err(Error::Input(_))));
    }
}
