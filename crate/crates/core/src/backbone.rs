//! Stand-in feature extractor: a three-layer convolution stack with total
//! stride 4, or the identity when feature maps are supplied directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, gemm};
use crate::params::{Init, ParamBuilder, ParameterSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// conv3x3/s2 → ReLU → conv3x3/s2 → ReLU → conv1x1, output stride 4.
    Conv,
    /// Inputs already are `[C × H × W]` feature maps.
    Identity,
}

impl BackboneKind {
    pub fn stride(self) -> usize {
        match self {
            BackboneKind::Conv => 4,
            BackboneKind::Identity => 1,
        }
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(BackboneKind::Conv),
            "identity" => Ok(BackboneKind::Identity),
            other => Err(Error::Config(format!("unknown backbone {other:?} (conv | identity)"))),
        }
    }
}

const HIDDEN: [usize; 2] = [16, 32];

pub fn register(b: &mut ParamBuilder<'_>, kind: BackboneKind, in_channels: usize, out_channels: usize) -> Result<()> {
    if kind == BackboneKind::Identity {
        return Ok(());
    }
    let [h1, h2] = HIDDEN;
    b.add("backbone.conv1.weight", &[h1, in_channels, 3, 3], Init::Kaiming { fan_in: in_channels * 9 })?;
    b.add("backbone.conv1.bias", &[h1], Init::Zeros)?;
    b.add("backbone.conv2.weight", &[h2, h1, 3, 3], Init::Kaiming { fan_in: h1 * 9 })?;
    b.add("backbone.conv2.bias", &[h2], Init::Zeros)?;
    b.add("backbone.conv3.weight", &[out_channels, h2, 1, 1], Init::Kaiming { fan_in: h2 })?;
    b.add("backbone.conv3.bias", &[out_channels], Init::Zeros)
}

pub fn forward(p: &ParameterSet, kind: BackboneKind, image: &Tensor) -> Result<Tensor> {
    match kind {
        BackboneKind::Identity => Ok(image.clone()),
        BackboneKind::Conv => {
            let conv = |x: &Tensor, name: &str, stride: usize, pad: usize| -> Result<Tensor> {
                conv2d(
                    x,
                    p.get(&format!("backbone.{name}.weight"))?,
                    p.get(&format!("backbone.{name}.bias"))?,
                    stride,
                    pad,
                )
            };
            let x = ops::relu(&conv(image, "conv1", 2, 1)?);
            let x = ops::relu(&conv(&x, "conv2", 2, 1)?);
            conv(&x, "conv3", 1, 0)
        }
    }
}

/// Unfold `[C × H × W]` into `[(C·k·k) × (Ho·Wo)]` patches, zero padded.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        cols[row * ho * wo + oy * wo + ox] = x[(ch * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let mut x = vec![0.0; c * h * w];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        x[(ch * h + iy as usize) * w + ix as usize] += cols[row * ho * wo + oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}

/// Square-kernel 2-D convolution, weight `[C_out × C_in × k × k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::dim(format!("conv2d input must be [C x H x W], got {:?}", x.shape())));
    };
    let &[c_out, wc, k, k2] = weight.shape() else {
        return Err(Error::dim(format!("conv2d weight must be 4-D, got {:?}", weight.shape())));
    };
    if wc != c || k != k2 || bias.numel() != c_out || stride == 0 {
        return Err(Error::dim(format!(
            "conv2d weight {:?} / bias {:?} do not fit input {:?}",
            weight.shape(),
            bias.shape(),
            x.shape()
        )));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::dim(format!("conv2d kernel {k} larger than padded input {:?}", x.shape())));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let patch = c * k * k;
    let n = ho * wo;
    let cols = im2col(x.data(), c, h, w, k, stride, pad, ho, wo);
    let mut out = vec![0.0; c_out * n];
    for o in 0..c_out {
        out[o * n..(o + 1) * n].fill(bias.data()[o]);
    }
    gemm(c_out, patch, n, weight.data(), false, &cols, false, &mut out, 1.0);
    let wt = weight.clone();
    Ok(Tensor::from_op(
        "conv2d",
        out,
        vec![c_out, ho, wo],
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, need| {
            let gx = need[0].then(|| {
                let mut gcols = vec![0.0; patch * n];
                gemm(patch, c_out, n, wt.data(), true, g, false, &mut gcols, 0.0);
                col2im(&gcols, c, h, w, k, stride, pad, ho, wo)
            });
            let gw = need[1].then(|| {
                let mut gw = vec![0.0; c_out * patch];
                gemm(c_out, n, patch, g, false, &cols, true, &mut gw, 0.0);
                gw
            });
            let gb = need[2].then(|| g.chunks(n).map(|p| p.iter().sum()).collect());
            vec![gx, gw, gb]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (c, h, w, co, k) = (2, 5, 6, 3, 3);
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let x = Tensor::new(r(c * h * w), &[c, h, w]).unwrap();
        let wt = Tensor::new(r(co * c * k * k), &[co, c, k, k]).unwrap();
        let b = Tensor::new(r(co), &[co]).unwrap();
        for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
            let y = conv2d(&x, &wt, &b, stride, pad).unwrap();
            let (ho, wo) = (y.shape()[1], y.shape()[2]);
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[o];
                        for i in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as i64 - pad as i64;
                                    let ix = (ox * stride + kx) as i64 - pad as i64;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.data()[(i * h + iy as usize) * w + ix as usize]
                                            * wt.data()[((o * c + i) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        assert!((y.data()[(o * ho + oy) * wo + ox] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_stack_has_stride_four() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut rng);
        register(&mut b, BackboneKind::Conv, 3, 8).unwrap();
        let p = b.finish();
        let img = Tensor::full(&[3, 32, 24], 0.5);
        let f = forward(&p, BackboneKind::Conv, &img).unwrap();
        assert_eq!(f.shape(), &[8, 8, 6]);
    }
}
