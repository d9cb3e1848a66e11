//! Ground truth at mask resolution and prediction paste-back.

use super::{box_pixel_range, AmodalInstance, Bitmap};
use crate::error::{Error, Result};
use crate::head::MaskTargets;
use crate::roi::BoundingBox;

fn bilinear_clamped(values: impl Fn(usize, usize) -> f64, h: usize, w: usize, u: f64, v: f64) -> f64 {
    let cx = u.clamp(0.0, (w - 1) as f64);
    let cy = v.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (cx.floor() as usize, cy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (cx - x0 as f64, cy - y0 as f64);
    (1.0 - fy) * ((1.0 - fx) * values(y0, x0) + fx * values(y0, x1)) + fy * ((1.0 - fx) * values(y1, x0) + fx * values(y1, x1))
}

/// Bilinear samples of `mask` at the `h × w` bin centers of `bbox`,
/// thresholded at 0.5. Sample points past the image edge clamp to it.
pub fn resample_bitmap(mask: &Bitmap, bbox: &BoundingBox, h: usize, w: usize) -> Result<Vec<f64>> {
    bbox.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::Input("mask resolution must be positive".into()));
    }
    if mask.height == 0 || mask.width == 0 {
        return Ok(vec![0.0; h * w]);
    }
    let (bw, bh) = (bbox.width() / w as f64, bbox.height() / h as f64);
    let px = |y: usize, x: usize| f64::from(mask.data[y * mask.width + x]);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let v = bbox.y0 + (i as f64 + 0.5) * bh - 0.5;
        for j in 0..w {
            let u = bbox.x0 + (j as f64 + 0.5) * bw - 0.5;
            let s = bilinear_clamped(px, mask.height, mask.width, u, v);
            out.push(if s >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    Ok(out)
}

pub fn gt_at_mask_resolution(inst: &AmodalInstance, bbox: &BoundingBox, h_m: usize, w_m: usize) -> Result<MaskTargets> {
    Ok(MaskTargets {
        height: h_m,
        width: w_m,
        occluder: resample_bitmap(&inst.occluder, bbox, h_m, w_m)?,
        visible: resample_bitmap(&inst.visible, bbox, h_m, w_m)?,
        amodal: resample_bitmap(&inst.amodal, bbox, h_m, w_m)?,
        invisible: resample_bitmap(&inst.invisible, bbox, h_m, w_m)?,
    })
}

/// Inverse of [`resample_bitmap`]: spread a `h × w` probability map over the
/// image pixels whose centers lie in `bbox`, then threshold at 0.5.
pub fn paste_mask(probs: &[f64], h: usize, w: usize, bbox: &BoundingBox, img_h: usize, img_w: usize) -> Result<Bitmap> {
    bbox.validate()?;
    if probs.len() != h * w || h == 0 || w == 0 {
        return Err(Error::dim(format!("{} mask values for a {h}x{w} map", probs.len())));
    }
    let binary: Vec<f64> = probs.iter().map(|p| if *p >= 0.5 { 1.0 } else { 0.0 }).collect();
    let (x0, y0, x1, y1) = box_pixel_range(bbox, img_w, img_h);
    let (sx, sy) = (w as f64 / bbox.width(), h as f64 / bbox.height());
    let mut out = Bitmap::zeros(img_h, img_w);
    for y in y0..y1 {
        let v = (y as f64 + 0.5 - bbox.y0) * sy - 0.5;
        for x in x0..x1 {
            let u = (x as f64 + 0.5 - bbox.x0) * sx - 0.5;
            if bilinear_clamped(|i, j| binary[i * w + j], h, w, u, v) >= 0.5 {
                out.set(y, x, true);
            }
        }
    }
    Ok(out)
}
