//! SGD over ground-truth-box ROIs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{HeadConfig, MaskKind};
use crate::data::{derive_seed, gt_at_mask_resolution, Dataset, Image};
use crate::error::{Error, Result};
use crate::head::{mask_loss_terms, sum_terms, MaskTargets};
use crate::model::AisFormer;
use crate::ops;
use crate::params::ParameterSet;
use crate::roi::BoundingBox;
use crate::tensor::Tensor;

/// One training ROI: the image it lives on, its box in image pixels and the
/// targets at mask resolution.
#[derive(Debug, Clone)]
pub struct RoiSample {
    pub image: usize,
    pub image_id: u64,
    pub instance_id: u64,
    pub category_id: u64,
    pub bbox: BoundingBox,
    pub targets: MaskTargets,
}

#[derive(Debug, Clone)]
pub struct TrainSet {
    pub images: Vec<Tensor>,
    pub rois: Vec<RoiSample>,
}

impl TrainSet {
    /// `images[i]` holds the pixels of `dataset.images[i]`.
    pub fn build(dataset: &Dataset, images: &[Image], cfg: &HeadConfig) -> Result<TrainSet> {
        if images.len() != dataset.images.len() {
            return Err(Error::Config(format!(
                "{} image payloads for {} dataset images",
                images.len(),
                dataset.images.len()
            )));
        }
        let mut rois = Vec::new();
        let mut tensors = Vec::with_capacity(images.len());
        for (i, (entry, img)) in dataset.images.iter().zip(images).enumerate() {
            if img.channels != cfg.input_channels {
                return Err(Error::Config(format!(
                    "image {} has {} channels, model expects {}",
                    entry.info.id, img.channels, cfg.input_channels
                )));
            }
            if (img.height, img.width) != (entry.info.height, entry.info.width) {
                return Err(Error::Config(format!(
                    "image {} is {}x{}, annotations say {}x{}",
                    entry.info.id, img.height, img.width, entry.info.height, entry.info.width
                )));
            }
            tensors.push(img.to_tensor());
            for inst in &entry.instances {
                rois.push(RoiSample {
                    image: i,
                    image_id: inst.image_id,
                    instance_id: inst.id,
                    category_id: inst.category_id,
                    bbox: inst.bbox,
                    targets: gt_at_mask_resolution(inst, &inst.bbox, cfg.mask_h(), cfg.mask_w())?,
                });
            }
        }
        Ok(TrainSet { images: tensors, rois })
    }

    /// Keep only the listed ROIs (images stay shared).
    pub fn with_rois(&self, keep: &[usize]) -> TrainSet {
        TrainSet {
            images: self.images.clone(),
            rois: keep.iter().map(|&i| self.rois[i].clone()).collect(),
        }
    }
}

/// Visiting order of `n` ROIs in `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    order
}

/// ROI indices used by `iteration` with batches of `batch` ROIs.
pub fn batch_indices(seed: u64, n: usize, iteration: u64, batch: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for b in 0..batch as u64 {
        let pos = iteration * batch as u64 + b;
        let epoch = pos / n as u64;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            cached = Some((epoch, epoch_order(seed, epoch, n)));
        }
        out.push(cached.as_ref().expect("just set").1[(pos % n as u64) as usize]);
    }
    out
}

/// Losses of one step, averaged over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss {
    pub per_head: Vec<(MaskKind, f64)>,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "iteration,occluder,visible,amodal,invisible,total";

impl StepLoss {
    pub fn head(&self, kind: MaskKind) -> Option<f64> {
        self.per_head.iter().find(|(k, _)| *k == kind).map(|(_, v)| *v)
    }

    /// Disabled heads leave their column empty.
    pub fn csv_row(&self, iteration: u64) -> String {
        let mut s = iteration.to_string();
        for kind in [MaskKind::Occluder, MaskKind::Visible, MaskKind::Amodal, MaskKind::Invisible] {
            s.push(',');
            if let Some(v) = self.head(kind) {
                let _ = write!(s, "{v:.17e}");
            }
        }
        let _ = write!(s, ",{:.17e}", self.total);
        s
    }
}

/// Forward, backward and one SGD update on the ROIs at `indices`.
pub fn train_step(
    model: &AisFormer,
    params: &ParameterSet,
    set: &TrainSet,
    indices: &[usize],
    learning_rate: f64,
    iteration: u64,
) -> Result<(ParameterSet, StepLoss)> {
    if indices.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut features: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut totals = Vec::with_capacity(indices.len());
    let mut heads: Vec<(MaskKind, f64)> = Vec::new();
    for &i in indices {
        let roi = &set.rois[i];
        if !features.contains_key(&roi.image) {
            features.insert(roi.image, model.features(params, &set.images[roi.image])?);
        }
        let out = model.forward_roi(params, &features[&roi.image], &roi.bbox)?;
        let terms = mask_loss_terms(&out.masks, &roi.targets)?;
        for (kind, t) in &terms {
            match heads.iter_mut().find(|(k, _)| k == kind) {
                Some(slot) => slot.1 += t.item(),
                None => heads.push((*kind, t.item())),
            }
        }
        totals.push(sum_terms(terms.iter().map(|(_, t)| t))?);
    }
    let scale = 1.0 / indices.len() as f64;
    let loss = ops::scale(&sum_terms(totals.iter())?, scale);
    let total = loss.item();
    if !total.is_finite() {
        return Err(Error::Diverged { iteration });
    }
    loss.backward()?;
    let next = params.sgd_step(learning_rate)?;
    for h in heads.iter_mut() {
        h.1 *= scale;
    }
    Ok((next, StepLoss { per_head: heads, total }))
}

/// Iterations `start..end`. `on_step` sees each iteration's pre-update loss
/// and the parameters after its update.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &AisFormer,
    mut params: ParameterSet,
    set: &TrainSet,
    seed: u64,
    learning_rate: f64,
    batch: usize,
    start: u64,
    end: u64,
    mut on_step: impl FnMut(u64, &ParameterSet, &StepLoss) -> Result<()>,
) -> Result<ParameterSet> {
    if set.rois.is_empty() {
        return Err(Error::Config("no training ROIs".into()));
    }
    for it in start..end {
        let idx = batch_indices(seed, set.rois.len(), it, batch);
        let (next, loss) = train_step(model, &params, set, &idx, learning_rate, it)?;
        params = next;
        on_step(it, &params, &loss)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epochs_are_permutations() {
        for e in 0..4 {
            let mut o = epoch_order(3, e, 7);
            o.sort_unstable();
            assert_eq!(o, (0..7).collect::<Vec<_>>());
        }
        assert_eq!(epoch_order(3, 1, 7), epoch_order(3, 1, 7));
    }

    #[test]
    fn batches_walk_the_epoch_stream() {
        let n = 5;
        let flat: Vec<usize> = (0..4u64).flat_map(|e| epoch_order(1, e, n)).collect();
        for it in 0..6u64 {
            assert_eq!(batch_indices(1, n, it, 3), flat[it as usize * 3..it as usize * 3 + 3].to_vec());
        }
    }

    #[test]
    fn csv_rows_leave_disabled_heads_empty() {
        let l = StepLoss {
            per_head: vec![(MaskKind::Amodal, 0.5)],
            total: 0.5,
        };
        let row = l.csv_row(3);
        assert_eq!(row.split(',').count(), LOSS_CSV_HEADER.split(',').count());
        assert!(row.starts_with("3,,,5.0"));
    }
}
