//! ROI extraction: ROIAlign, the stride-2 deconvolution and the 1×1 convolution.
//!
//! Continuous coordinates follow the half-pixel convention: pixel `(i, j)`
//! covers `[j, j+1) × [i, i+1)` and its value sits at the center
//! `(j + 0.5, i + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::gemm;
use crate::params::{Init, ParamBuilder, ParameterSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    /// From COCO `[x, y, w, h]`.
    pub fn from_xywh(xywh: [f64; 4]) -> Result<Self> {
        Self::new(xywh[0], xywh[1], xywh[0] + xywh[2], xywh[1] + xywh[3])
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite());
        if !finite || self.x1 <= self.x0 || self.y1 <= self.y0 {
            return Err(Error::Input(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x0, self.y0, self.width(), self.height()]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            x0: self.x0 * s,
            y0: self.y0 * s,
            x1: self.x1 * s,
            y1: self.y1 * s,
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    /// Area of the part inside `[0, w] × [0, h]`.
    pub fn clamped_area(&self, w: f64, h: f64) -> f64 {
        let cw = self.x1.min(w) - self.x0.max(0.0);
        let ch = self.y1.min(h) - self.y0.max(0.0);
        cw.max(0.0) * ch.max(0.0)
    }
}

/// Per-ROI feature volume `[C × H × W]`.
#[derive(Debug, Clone)]
pub struct RoiFeature {
    pub values: Tensor,
}

impl RoiFeature {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(Error::dim(format!("ROI feature must be [C x H x W], got {:?}", values.shape())));
        }
        Ok(Self { values })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Bilinear taps `(flat index, weight)` for a point in continuous coordinates;
/// pixels outside the plane contribute nothing.
fn bilinear_taps(x: f64, y: f64, h: usize, w: usize, out: &mut Vec<(usize, f64)>, scale: f64) {
    let px = x - 0.5;
    let py = y - 0.5;
    let x_lo = px.floor();
    let y_lo = py.floor();
    let fx = px - x_lo;
    let fy = py - y_lo;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let (xi, yi) = (x_lo as i64 + dx, y_lo as i64 + dy);
            let wgt = wx * wy;
            if wgt == 0.0 || xi < 0 || yi < 0 || xi >= w as i64 || yi >= h as i64 {
                continue;
            }
            out.push((yi as usize * w + xi as usize, wgt * scale));
        }
    }
}

/// Resample `feature_map` `[C × H × W]` inside `bbox` to `[C × out_h × out_w]`.
///
/// Each output bin averages `samples_per_bin²` bilinear samples on a regular
/// grid inside the bin. `bbox` is in feature-map pixel units.
pub fn roi_align(
    feature_map: &Tensor,
    bbox: &BoundingBox,
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
) -> Result<RoiFeature> {
    let &[c, h, w] = feature_map.shape() else {
        return Err(Error::dim(format!("feature map must be [C x H x W], got {:?}", feature_map.shape())));
    };
    if out_h == 0 || out_w == 0 || samples_per_bin == 0 {
        return Err(Error::Config(format!(
            "roi_align output {out_h}x{out_w} with {samples_per_bin} samples per bin"
        )));
    }
    bbox.validate()?;
    if bbox.clamped_area(w as f64, h as f64) <= 0.0 {
        return Err(Error::Input(format!("box {bbox:?} does not overlap the {w}x{h} feature map")));
    }

    let s = samples_per_bin;
    let bin_w = bbox.width() / out_w as f64;
    let bin_h = bbox.height() / out_h as f64;
    let norm = 1.0 / (s * s) as f64;
    let mut taps: Vec<Vec<(usize, f64)>> = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        for j in 0..out_w {
            let mut bin = Vec::with_capacity(4 * s * s);
            for si in 0..s {
                let y = bbox.y0 + (i as f64 + (si as f64 + 0.5) / s as f64) * bin_h;
                for sj in 0..s {
                    let x = bbox.x0 + (j as f64 + (sj as f64 + 0.5) / s as f64) * bin_w;
                    bilinear_taps(x, y, h, w, &mut bin, norm);
                }
            }
            taps.push(bin);
        }
    }

    let plane = h * w;
    let bins = out_h * out_w;
    let fm = feature_map.data();
    let mut out = vec![0.0; c * bins];
    for ch in 0..c {
        let src = &fm[ch * plane..(ch + 1) * plane];
        for (b, bin) in taps.iter().enumerate() {
            out[ch * bins + b] = bin.iter().map(|&(idx, wgt)| src[idx] * wgt).sum();
        }
    }
    let values = Tensor::from_op(
        "roi_align",
        out,
        vec![c, out_h, out_w],
        vec![feature_map.clone()],
        Box::new(move |g, _| {
            let mut gx = vec![0.0; c * plane];
            for ch in 0..c {
                for (b, bin) in taps.iter().enumerate() {
                    let gv = g[ch * bins + b];
                    for &(idx, wgt) in bin {
                        gx[ch * plane + idx] += gv * wgt;
                    }
                }
            }
            vec![Some(gx)]
        }),
    );
    RoiFeature::new(values)
}

pub fn register_deconv(b: &mut ParamBuilder<'_>, prefix: &str, c_in: usize, c_out: usize) -> Result<()> {
    b.add(&format!("{prefix}.weight"), &[c_in, c_out, 2, 2], Init::Kaiming { fan_in: c_in })?;
    b.add(&format!("{prefix}.bias"), &[c_out], Init::Zeros)
}

/// Transposed convolution with a 2×2 kernel and stride 2:
/// `out[o, 2y+dy, 2x+dx] = bias[o] + Σ_i in[i, y, x] · weight[i, o, dy, dx]`.
pub fn upsample_deconv(roi: &RoiFeature, weight: &Tensor, bias: &Tensor) -> Result<RoiFeature> {
    let (c_in, h, w) = (roi.channels(), roi.height(), roi.width());
    let &[wi, c_out, 2, 2] = weight.shape() else {
        return Err(Error::dim(format!("deconv weight must be [C_in x C_out x 2 x 2], got {:?}", weight.shape())));
    };
    if wi != c_in || bias.numel() != c_out {
        return Err(Error::dim(format!(
            "deconv weight {:?} / bias {:?} do not fit input {:?}",
            weight.shape(),
            bias.shape(),
            roi.values.shape()
        )));
    }
    let (oh, ow) = (2 * h, 2 * w);
    let x = roi.values.data();
    let wd = weight.data();
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        out[o * oh * ow..(o + 1) * oh * ow].fill(bias.data()[o]);
    }
    for i in 0..c_in {
        for o in 0..c_out {
            let k = &wd[(i * c_out + o) * 4..(i * c_out + o) * 4 + 4];
            for y in 0..h {
                for xx in 0..w {
                    let v = x[(i * h + y) * w + xx];
                    for dy in 0..2 {
                        let row = (o * oh + 2 * y + dy) * ow + 2 * xx;
                        out[row] += v * k[dy * 2];
                        out[row + 1] += v * k[dy * 2 + 1];
                    }
                }
            }
        }
    }
    let (xc, wc) = (roi.values.clone(), weight.clone());
    let values = Tensor::from_op(
        "upsample_deconv",
        out,
        vec![c_out, oh, ow],
        vec![roi.values.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, need| {
            let x = xc.data();
            let wd = wc.data();
            let mut gx = need[0].then(|| vec![0.0; c_in * h * w]);
            let mut gw = need[1].then(|| vec![0.0; c_in * c_out * 4]);
            for i in 0..c_in {
                for o in 0..c_out {
                    let kbase = (i * c_out + o) * 4;
                    for y in 0..h {
                        for xx in 0..w {
                            let xi = (i * h + y) * w + xx;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let gv = g[(o * oh + 2 * y + dy) * ow + 2 * xx + dx];
                                    if let Some(gx) = gx.as_mut() {
                                        gx[xi] += gv * wd[kbase + dy * 2 + dx];
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        gw[kbase + dy * 2 + dx] += gv * x[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let gb = need[2].then(|| g.chunks(oh * ow).map(|p| p.iter().sum()).collect());
            vec![gx, gw, gb]
        }),
    );
    RoiFeature::new(values)
}

pub fn register_pointwise(b: &mut ParamBuilder<'_>, prefix: &str, c_in: usize, c_out: usize) -> Result<()> {
    b.add(&format!("{prefix}.weight"), &[c_out, c_in], Init::Xavier { fan_in: c_in, fan_out: c_out })?;
    b.add(&format!("{prefix}.bias"), &[c_out], Init::Zeros)
}

/// 1×1 stride-1 convolution: a per-pixel linear map across channels with
/// `weight` shaped `[C_out × C_in]`.
pub fn pointwise_conv(roi: &RoiFeature, weight: &Tensor, bias: &Tensor) -> Result<RoiFeature> {
    let (c_in, h, w) = (roi.channels(), roi.height(), roi.width());
    let &[c_out, wi] = weight.shape() else {
        return Err(Error::dim(format!("1x1 conv weight must be [C_out x C_in], got {:?}", weight.shape())));
    };
    if wi != c_in || bias.numel() != c_out {
        return Err(Error::dim(format!(
            "1x1 conv weight {:?} / bias {:?} do not fit {c_in} input channels",
            weight.shape(),
            bias.shape()
        )));
    }
    let hw = h * w;
    let mut out = vec![0.0; c_out * hw];
    for o in 0..c_out {
        out[o * hw..(o + 1) * hw].fill(bias.data()[o]);
    }
    gemm(c_out, c_in, hw, weight.data(), false, roi.values.data(), false, &mut out, 1.0);
    let (xc, wc) = (roi.values.clone(), weight.clone());
    let values = Tensor::from_op(
        "pointwise_conv",
        out,
        vec![c_out, h, w],
        vec![roi.values.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = vec![0.0; c_in * hw];
                gemm(c_in, c_out, hw, wc.data(), true, g, false, &mut gx, 0.0);
                gx
            });
            let gw = need[1].then(|| {
                let mut gw = vec![0.0; c_out * c_in];
                gemm(c_out, hw, c_in, g, false, xc.data(), true, &mut gw, 0.0);
                gw
            });
            let gb = need[2].then(|| g.chunks(hw).map(|p| p.iter().sum()).collect());
            vec![gx, gw, gb]
        }),
    );
    RoiFeature::new(values)
}

/// Convenience lookup for the deconv/1×1 pair registered under `prefix`.
pub fn conv_params<'a>(p: &'a ParameterSet, prefix: &str) -> Result<(&'a Tensor, &'a Tensor)> {
    Ok((p.get(&format!("{prefix}.weight"))?, p.get(&format!("{prefix}.bias"))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    #[test]
    fn constant_map_gives_constant_output() {
        let fm = Tensor::full(&[2, 10, 10], 3.25);
        let b = BoundingBox::new(2.3, 1.7, 7.9, 8.2).unwrap();
        let r = roi_align(&fm, &b, 5, 4, 2).unwrap();
        assert_eq!(r.values.shape(), &[2, 5, 4]);
        for v in r.values.data() {
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn integer_box_one_sample_is_a_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fm = rand_tensor(&mut rng, &[1, 8, 8]);
        let b = BoundingBox::new(2.0, 3.0, 6.0, 6.0).unwrap();
        let r = roi_align(&fm, &b, 3, 4, 1).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let expect = fm.data()[(3 + i) * 8 + 2 + j];
                assert!((r.values.data()[i * 4 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_boxes_rejected() {
        let fm = Tensor::ones(&[1, 4, 4]);
        assert!(matches!(BoundingBox::new(1.0, 1.0, 1.0, 3.0), Err(Error::Input(_))));
        let outside = BoundingBox { x0: 5.0, y0: 0.0, x1: 7.0, y1: 2.0 };
        assert!(matches!(roi_align(&fm, &outside, 2, 2, 2), Err(Error::Input(_))));
    }

    #[test]
    fn deconv_impulse_response() {
        let mut x = vec![0.0; 9];
        x[0] = 1.0;
        let roi = RoiFeature::new(Tensor::new(x, &[1, 3, 3]).unwrap()).unwrap();
        let w = Tensor::ones(&[1, 1, 2, 2]);
        let out = upsample_deconv(&roi, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out.values.shape(), &[1, 6, 6]);
        let d = out.values.data();
        for y in 0..6 {
            for xx in 0..6 {
                let expect = if y < 2 && xx < 2 { 1.0 } else { 0.0 };
                assert_eq!(d[y * 6 + xx], expect);
            }
        }
    }

    #[test]
    fn deconv_single_tap_replicates_into_that_phase() {
        let roi = RoiFeature::new(Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2]).unwrap()).unwrap();
        let w = Tensor::new(vec![0.0, 0.0, 1.0, 0.0], &[1, 1, 2, 2]).unwrap();
        let out = upsample_deconv(&roi, &w, &Tensor::zeros(&[1])).unwrap();
        let d = out.values.data();
        // tap (dy=1, dx=0): value (y, x) lands on (2y+1, 2x)
        assert_eq!(d[4], 1.0);
        assert_eq!(d[6], 2.0);
        assert_eq!(d[3 * 4], 3.0);
        assert_eq!(d[3 * 4 + 2], 4.0);
        assert_eq!(d.iter().filter(|v| **v != 0.0).count(), 4);
    }

    #[test]
    fn deconv_matches_scatter_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (ci, co, h, w) = (3, 2, 3, 4);
        let x = rand_tensor(&mut rng, &[ci, h, w]);
        let wt = rand_tensor(&mut rng, &[ci, co, 2, 2]);
        let bias = rand_tensor(&mut rng, &[co]);
        let out = upsample_deconv(&RoiFeature::new(x.clone()).unwrap(), &wt, &bias).unwrap();
        let mut oracle = vec![0.0; co * 2 * h * 2 * w];
        for o in 0..co {
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    oracle[(o * 2 * h + oy) * 2 * w + ox] = bias.data()[o];
                }
            }
        }
        for i in 0..ci {
            for y in 0..h {
                for xx in 0..w {
                    for o in 0..co {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                oracle[(o * 2 * h + 2 * y + ky) * 2 * w + 2 * xx + kx] +=
                                    x.data()[(i * h + y) * w + xx] * wt.data()[((i * co + o) * 2 + ky) * 2 + kx];
                            }
                        }
                    }
                }
            }
        }
        for (a, b) in out.values.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deconv_wrong_weight_shape() {
        let roi = RoiFeature::new(Tensor::ones(&[2, 2, 2])).unwrap();
        assert!(matches!(
            upsample_deconv(&roi, &Tensor::ones(&[3, 2, 2, 2]), &Tensor::zeros(&[2])),
            Err(Error::Dimension(_))
        ));
        assert!(upsample_deconv(&roi, &Tensor::ones(&[2, 2, 3, 3]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn pointwise_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 3, 3]);
        let roi = RoiFeature::new(x.clone()).unwrap();
        let eye = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let same = pointwise_conv(&roi, &eye, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(same.values.data(), x.data());

        let one = RoiFeature::new(Tensor::new(vec![1.0, -2.0, 0.5, 4.0], &[1, 2, 2]).unwrap()).unwrap();
        let doubled = pointwise_conv(&one, &Tensor::full(&[1, 1], 2.0), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(doubled.values.data(), &[2.0, -4.0, 1.0, 8.0]);

        let w = rand_tensor(&mut rng, &[3, 2]);
        let b = rand_tensor(&mut rng, &[3]);
        let out = pointwise_conv(&roi, &w, &b).unwrap();
        for o in 0..3 {
            for p in 0..9 {
                let expect: f64 = b.data()[o] + (0..2).map(|i| w.data()[o * 2 + i] * x.data()[i * 9 + p]).sum::<f64>();
                assert!((out.values.data()[o * 9 + p] - expect).abs() < 1e-12);
            }
        }
        assert!(matches!(
            pointwise_conv(&roi, &Tensor::ones(&[3, 3]), &b),
            Err(Error::Dimension(_))
        ));
    }
}
