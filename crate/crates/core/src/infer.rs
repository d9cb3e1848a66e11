//! Inference over ground-truth boxes: mask-resolution IoU and image-level
//! detections for AP/AR.

use rayon::prelude::*;

use crate::config::MaskKind;
use crate::data::{paste_mask, rle_encode, Dataset};
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::model::AisFormer;
use crate::params::ParameterSet;
use crate::train::TrainSet;

/// IoU of two binary maps; two empty maps agree perfectly.
pub fn binary_iou(pred: &[f64], target: &[f64]) -> f64 {
    let (mut inter, mut uni) = (0usize, 0usize);
    for (p, t) in pred.iter().zip(target) {
        let (p, t) = (*p >= 0.5, *t >= 0.5);
        inter += usize::from(p && t);
        uni += usize::from(p || t);
    }
    if uni == 0 {
        1.0
    } else {
        inter as f64 / uni as f64
    }
}

/// Amodal IoU per ROI at mask resolution, predictions thresholded at 0.5.
pub fn roi_mask_ious(model: &AisFormer, params: &ParameterSet, set: &TrainSet, kind: MaskKind) -> Result<Vec<f64>> {
    let frozen = params.frozen();
    let mut feats: Vec<Option<crate::tensor::Tensor>> = vec![None; set.images.len()];
    let mut out = Vec::with_capacity(set.rois.len());
    for roi in &set.rois {
        if feats[roi.image].is_none() {
            feats[roi.image] = Some(model.features(&frozen, &set.images[roi.image])?);
        }
        let f = feats[roi.image].as_ref().expect("just computed");
        let res = model.forward_roi(&frozen, f, &roi.bbox)?;
        let m = res
            .masks
            .get(kind)
            .ok_or_else(|| Error::Config(format!("{} head is disabled", kind.name())))?;
        out.push(binary_iou(&m.probabilities(), roi.targets.get(kind)));
    }
    Ok(out)
}

/// Worker count from `AISF_THREADS`, falling back to rayon's default.
pub fn thread_limit() -> Option<usize> {
    std::env::var("AISF_THREADS").ok()?.trim().parse().ok().filter(|n| *n > 0)
}

/// One amodal detection per ground-truth box, pasted back at image
/// resolution. The score is the mean probability over the predicted mask
/// (or the peak probability when nothing crosses 0.5).
pub fn detect(model: &AisFormer, params: &ParameterSet, dataset: &Dataset, set: &TrainSet, threads: Option<usize>) -> Result<Vec<Detection>> {
    let frozen = params.frozen();
    let per_image = |i: usize| -> Result<Vec<Detection>> {
        let entry = &dataset.images[i];
        let f = model.features(&frozen, &set.images[i])?;
        let mut dets = Vec::with_capacity(entry.instances.len());
        for inst in &entry.instances {
            let out = model.forward_roi(&frozen, &f, &inst.bbox)?;
            let probs = out.masks.amodal().probabilities();
            let on: Vec<f64> = probs.iter().copied().filter(|p| *p >= 0.5).collect();
            let score = if on.is_empty() {
                probs.iter().copied().fold(0.0, f64::max)
            } else {
                on.iter().sum::<f64>() / on.len() as f64
            };
            let mask = paste_mask(&probs, out.masks.height, out.masks.width, &inst.bbox, entry.info.height, entry.info.width)?;
            dets.push(Detection {
                image_id: inst.image_id,
                category_id: inst.category_id,
                score,
                mask: rle_encode(&mask),
            });
        }
        Ok(dets)
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let nested: Vec<Result<Vec<Detection>>> =
        pool.install(|| (0..dataset.images.len()).into_par_iter().map(per_image).collect());
    let mut out = Vec::new();
    for r in nested {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_binary_maps() {
        assert_eq!(binary_iou(&[1.0, 0.0, 1.0], &[1.0, 1.0, 0.0]), 1.0 / 3.0);
        assert_eq!(binary_iou(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert_eq!(binary_iou(&[0.7, 0.2], &[1.0, 0.0]), 1.0);
    }
}
