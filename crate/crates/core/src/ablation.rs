//! The six query-set configurations, trained and scored side by side.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{HeadConfig, MaskKind, QueryFlags};
use crate::data::Dataset;
use crate::error::Result;
use crate::eval::{coco_iou_thresholds, evaluate, EvalReport, DEFAULT_MAX_DETS};
use crate::infer::{detect, roi_mask_ious};
use crate::model::AisFormer;
use crate::train::{train, TrainSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationOptions {
    pub iterations: u64,
    pub learning_rate: f64,
    pub batch: usize,
    pub seed: u64,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub experiment: u8,
    pub flags: QueryFlags,
    pub heads: String,
    /// Mean amodal IoU at mask resolution on the evaluation ROIs.
    pub amodal_iou: f64,
    /// Mean total loss over the last tenth of training.
    pub final_loss: f64,
    pub report: EvalReport,
}

/// Train one configuration and score it.
pub fn run_one(
    experiment: u8,
    flags: QueryFlags,
    base: &HeadConfig,
    train_set: &TrainSet,
    eval_set: &TrainSet,
    eval_data: &Dataset,
    opts: &AblationOptions,
) -> Result<AblationRow> {
    let cfg = HeadConfig {
        queries: flags,
        ..base.clone()
    };
    let model = AisFormer::new(cfg)?;
    let params = model.init_params(opts.seed)?;
    let tail_start = opts.iterations - opts.iterations / 10;
    let (mut tail_sum, mut tail_n) = (0.0, 0usize);
    let params = train(
        &model,
        params,
        train_set,
        opts.seed,
        opts.learning_rate,
        opts.batch,
        0,
        opts.iterations,
        |it, _, loss| {
            if it >= tail_start {
                tail_sum += loss.total;
                tail_n += 1;
            }
            Ok(())
        },
    )?;
    let ious = roi_mask_ious(&model, &params, eval_set, MaskKind::Amodal)?;
    let dets = detect(&model, &params, eval_data, eval_set, opts.threads)?;
    let gts: Vec<_> = eval_data.instances().cloned().collect();
    let mut report = evaluate(&dets, &gts, &coco_iou_thresholds(), DEFAULT_MAX_DETS)?;
    report.label = Some(format!("#{experiment} {}", flags.label()));
    Ok(AblationRow {
        experiment,
        flags,
        heads: flags.label(),
        amodal_iou: if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 },
        final_loss: if tail_n == 0 { f64::NAN } else { tail_sum / tail_n as f64 },
        report,
    })
}

/// All six rows in order, from one shared initialization seed.
pub fn run_ablation(
    base: &HeadConfig,
    train_set: &TrainSet,
    eval_set: &TrainSet,
    eval_data: &Dataset,
    opts: &AblationOptions,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(6);
    for (exp, flags) in QueryFlags::ablation_grid() {
        let row = run_one(exp, flags, base, train_set, eval_set, eval_data, opts)?;
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn rows_to_json(rows: &[AblationRow]) -> String {
    serde_json::to_string_pretty(rows).expect("rows serialize")
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<4} {:>3} {:>3} {:>3} {:>3}  {:>8} {:>7} {:>7} {:>7} {:>7}",
        "exp", "occ", "vis", "amo", "inv", "mIoU", "AP", "AP50", "AP75", "AR"
    );
    let mark = |b: bool| if b { "x" } else { "-" };
    for r in rows {
        let _ = writeln!(
            s,
            "#{:<3} {:>3} {:>3} {:>3} {:>3}  {:>8.4} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            r.experiment,
            mark(r.flags.occluder),
            mark(r.flags.visible),
            "x",
            mark(r.flags.invisible),
            r.amodal_iou,
            100.0 * r.report.ap,
            100.0 * r.report.ap50,
            100.0 * r.report.ap75,
            100.0 * r.report.ar
        );
    }
    s
}
