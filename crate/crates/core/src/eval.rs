//! COCO-style mask AP/AR.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{rle_encode, rle_intersection_union, AmodalInstance, RleMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub score: f64,
    pub mask: RleMask,
}

/// `|a ∧ b| / |a ∨ b|`, zero when both masks are empty.
pub fn mask_iou(a: &RleMask, b: &RleMask) -> Result<f64> {
    let (i, u) = rle_intersection_union(a, b)?;
    Ok(if u == 0 { 0.0 } else { i as f64 / u as f64 })
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

pub const DEFAULT_MAX_DETS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category_id: u64,
    pub gt_count: usize,
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "AR")]
    pub ar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    /// Recall at `max_dets` averaged over the IoU ladder.
    #[serde(rename = "AR")]
    pub ar: f64,
    pub iou_thresholds: Vec<f64>,
    pub max_dets: usize,
    pub per_category: Vec<CategoryReport>,
    /// Free-form run label, e.g. the query flag set of an ablation row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>7} {:>7} {:>7} {:>7}", "category", "AP", "AP50", "AP75", "AR@100");
        for c in &self.per_category {
            let _ = writeln!(
                s,
                "{:<12} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
                c.category_id,
                100.0 * c.ap,
                100.0 * c.ap50,
                100.0 * c.ap75,
                100.0 * c.ar
            );
        }
        let _ = writeln!(
            s,
            "{:<12} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            "all",
            100.0 * self.ap,
            100.0 * self.ap50,
            100.0 * self.ap75,
            100.0 * self.ar
        );
        s
    }
}

struct GtMask {
    image_id: u64,
    category_id: u64,
    mask: RleMask,
}

/// Per category: `(AP, recall)` at one IoU threshold, `None` without GT.
type ThresholdResult = BTreeMap<u64, Option<(f64, f64)>>;

struct Prepared<'a> {
    // (image, category) -> (gt masks, detections sorted by score, top max_dets)
    groups: BTreeMap<(u64, u64), (Vec<&'a RleMask>, Vec<&'a Detection>)>,
    // per group: IoU matrix [det][gt]
    ious: BTreeMap<(u64, u64), Vec<Vec<f64>>>,
    gt_counts: BTreeMap<u64, usize>,
}

fn prepare<'a>(dets: &'a [Detection], gts: &'a [GtMask], max_dets: usize) -> Result<Prepared<'a>> {
    if let Some(d) = dets.iter().find(|d| !d.score.is_finite()) {
        return Err(Error::Input(format!("non-finite detection score {} on image {}", d.score, d.image_id)));
    }
    let mut groups: BTreeMap<(u64, u64), (Vec<&RleMask>, Vec<&Detection>)> = BTreeMap::new();
    let mut gt_counts: BTreeMap<u64, usize> = BTreeMap::new();
    for g in gts {
        groups.entry((g.image_id, g.category_id)).or_default().0.push(&g.mask);
        *gt_counts.entry(g.category_id).or_default() += 1;
    }
    for d in dets {
        groups.entry((d.image_id, d.category_id)).or_default().1.push(d);
    }
    let mut ious = BTreeMap::new();
    for (key, (g, d)) in groups.iter_mut() {
        d.sort_by(|a, b| b.score.total_cmp(&a.score));
        d.truncate(max_dets);
        let m = d
            .iter()
            .map(|det| g.iter().map(|gm| mask_iou(&det.mask, gm)).collect::<Result<Vec<f64>>>())
            .collect::<Result<Vec<_>>>()?;
        ious.insert(*key, m);
    }
    Ok(Prepared { groups, ious, gt_counts })
}

/// Greedy matching: in score order each detection takes the unmatched GT
/// with the highest IoU, provided that IoU reaches `threshold`.
pub fn greedy_match(ious: &[Vec<f64>], gt_count: usize, threshold: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gt_count];
    ious.iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &iou) in row.iter().enumerate() {
                if taken[g] || iou < threshold {
                    continue;
                }
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            best.map(|(g, _)| {
                taken[g] = true;
                g
            })
        })
        .collect()
}

/// 101-point interpolated AP from score-sorted TP flags.
pub fn interpolated_ap(tp_flags: &[bool], gt_count: usize) -> (f64, f64) {
    if gt_count == 0 {
        return (0.0, 0.0);
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    for (i, &t) in tp_flags.iter().enumerate() {
        tp += usize::from(t);
        recall.push(tp as f64 / gt_count as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = f64::from(k) / 100.0;
        let idx = recall.partition_point(|v| *v < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    (sum / 101.0, recall.last().copied().unwrap_or(0.0))
}

fn at_threshold(p: &Prepared<'_>, threshold: f64) -> ThresholdResult {
    // per category: (score, is_tp, original order) across images
    let mut per_cat: BTreeMap<u64, Vec<(f64, bool)>> = BTreeMap::new();
    for (key, (g, d)) in &p.groups {
        let matches = greedy_match(&p.ious[key], g.len(), threshold);
        let entry = per_cat.entry(key.1).or_default();
        for (det, m) in d.iter().zip(matches) {
            entry.push((det.score, m.is_some()));
        }
    }
    let mut out = ThresholdResult::new();
    for (&cat, &n) in &p.gt_counts {
        let mut scored = per_cat.remove(&cat).unwrap_or_default();
        // stable: ties keep image order
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let flags: Vec<bool> = scored.iter().map(|s| s.1).collect();
        out.insert(cat, Some(interpolated_ap(&flags, n)));
    }
    out
}

pub fn evaluate(dets: &[Detection], gts: &[AmodalInstance], iou_thresholds: &[f64], max_dets: usize) -> Result<EvalReport> {
    let gt_masks: Vec<GtMask> = gts
        .iter()
        .map(|g| GtMask {
            image_id: g.image_id,
            category_id: g.category_id,
            mask: rle_encode(&g.amodal),
        })
        .collect();
    evaluate_masks(dets, &gt_masks, iou_thresholds, max_dets)
}

fn evaluate_masks(dets: &[Detection], gts: &[GtMask], iou_thresholds: &[f64], max_dets: usize) -> Result<EvalReport> {
    let p = prepare(dets, gts, max_dets)?;
    let ladder: Vec<ThresholdResult> = iou_thresholds.iter().map(|t| at_threshold(&p, *t)).collect();
    let lookup = |t: f64| -> ThresholdResult {
        match iou_thresholds.iter().position(|v| (v - t).abs() < 1e-12) {
            Some(i) => ladder[i].clone(),
            None => at_threshold(&p, t),
        }
    };
    let (r50, r75) = (lookup(0.5), lookup(0.75));

    let mut per_category = Vec::new();
    for (&cat, &n) in &p.gt_counts {
        let mean = |f: &dyn Fn(&(f64, f64)) -> f64| {
            if ladder.is_empty() {
                0.0
            } else {
                ladder.iter().map(|r| r[&cat].as_ref().map_or(0.0, f)).sum::<f64>() / ladder.len() as f64
            }
        };
        per_category.push(CategoryReport {
            category_id: cat,
            gt_count: n,
            ap: mean(&|v| v.0),
            ap50: r50[&cat].map_or(0.0, |v| v.0),
            ap75: r75[&cat].map_or(0.0, |v| v.0),
            ar: mean(&|v| v.1),
        });
    }
    let avg = |f: fn(&CategoryReport) -> f64| {
        if per_category.is_empty() {
            0.0
        } else {
            per_category.iter().map(f).sum::<f64>() / per_category.len() as f64
        }
    };
    Ok(EvalReport {
        ap: avg(|c| c.ap),
        ap50: avg(|c| c.ap50),
        ap75: avg(|c| c.ap75),
        ar: avg(|c| c.ar),
        iou_thresholds: iou_thresholds.to_vec(),
        max_dets,
        per_category,
        label: None,
    })
}
