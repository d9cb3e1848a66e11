//! Feature encoding: ROIAlign → stride-2 deconvolution → 1×1 convolution →
//! flatten → positional encodings → transformer encoder.

use crate::config::HeadConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::ops;
use crate::params::{ParamBuilder, ParameterSet};
use crate::posenc::positional_tokens;
use crate::roi::{self, roi_align, BoundingBox, RoiFeature};
use crate::tensor::Tensor;

/// Encoder output. Tokens are stored token-major, `[(H_m·W_m) × C]`, one row
/// per mask pixel in row-major pixel order.
#[derive(Debug, Clone)]
pub struct EncodedTokens {
    pub tokens: Tensor,
    /// The positional table that was added before the encoder, same layout.
    pub positions: Tensor,
    pub height: usize,
    pub width: usize,
}

impl EncodedTokens {
    pub fn count(&self) -> usize {
        self.height * self.width
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Channel-major `[C × (H_m·W_m)]` view.
    pub fn channel_major(&self) -> Result<Tensor> {
        ops::transpose(&self.tokens)
    }
}

/// Everything the later stages need from one ROI.
#[derive(Debug, Clone)]
pub struct EncodedRoi {
    /// Upsampled, 1×1-projected ROI feature `[C × H_m × W_m]` (before positions).
    pub roi: RoiFeature,
    pub tokens: EncodedTokens,
    /// Self-attention weights, `[layer][head]`, each `[N × N]`.
    pub attention: Vec<Vec<Tensor>>,
}

pub fn register(b: &mut ParamBuilder<'_>, cfg: &HeadConfig) -> Result<()> {
    let c = cfg.embed_dim;
    roi::register_deconv(b, "roi.deconv", c, c)?;
    roi::register_pointwise(b, "roi.conv1x1", c, c)?;
    for l in 0..cfg.encoder_layers {
        let p = format!("encoder.layer{l}");
        nn::register_attention(b, &format!("{p}.attn"), c)?;
        if cfg.layer_norm {
            nn::register_layer_norm(b, &format!("{p}.norm1"), c)?;
            nn::register_layer_norm(b, &format!("{p}.norm2"), c)?;
        }
        nn::register_ffn(b, &format!("{p}.ffn"), c, cfg.ffn_dim)?;
    }
    Ok(())
}

/// One post-norm block: attention, residual, norm, feed-forward, residual, norm.
pub fn encoder_layer(p: &ParameterSet, prefix: &str, x: &Tensor, cfg: &HeadConfig) -> Result<(Tensor, Vec<Tensor>)> {
    let (a, weights) = nn::attention(p, &format!("{prefix}.attn"), x, x, x, cfg.heads)?;
    let x = nn::residual_norm(p, &format!("{prefix}.norm1"), x, &a, cfg.layer_norm)?;
    let f = nn::ffn(p, &format!("{prefix}.ffn"), &x)?;
    let x = nn::residual_norm(p, &format!("{prefix}.norm2"), &x, &f, cfg.layer_norm)?;
    Ok((x, weights))
}

/// Upsample and project an already-aligned ROI: `[C × H_r × W_r] → [C × H_m × W_m]`.
pub fn lift_roi(p: &ParameterSet, aligned: &RoiFeature) -> Result<RoiFeature> {
    let (w, b) = roi::conv_params(p, "roi.deconv")?;
    let up = roi::upsample_deconv(aligned, w, b)?;
    let (w, b) = roi::conv_params(p, "roi.conv1x1")?;
    roi::pointwise_conv(&up, w, b)
}

/// Run the transformer encoder over a lifted ROI.
pub fn encode_roi(p: &ParameterSet, roi: RoiFeature, cfg: &HeadConfig) -> Result<EncodedRoi> {
    let (c, h, w) = (roi.channels(), roi.height(), roi.width());
    if c != cfg.embed_dim {
        return Err(Error::dim(format!("ROI has {c} channels, config expects {}", cfg.embed_dim)));
    }
    let flat = ops::transpose(&ops::reshape(&roi.values, &[c, h * w])?)?;
    let positions = positional_tokens(h, w, c)?;
    let mut x = ops::add(&flat, &positions)?;
    let mut attention = Vec::with_capacity(cfg.encoder_layers);
    for l in 0..cfg.encoder_layers {
        let (next, weights) = encoder_layer(p, &format!("encoder.layer{l}"), &x, cfg)?;
        x = next;
        attention.push(weights);
    }
    Ok(EncodedRoi {
        roi,
        tokens: EncodedTokens {
            tokens: x,
            positions,
            height: h,
            width: w,
        },
        attention,
    })
}

/// Encode one box of a backbone feature map. `bbox` is in feature-map pixels.
pub fn encode(feature_map: &Tensor, bbox: &BoundingBox, p: &ParameterSet, cfg: &HeadConfig) -> Result<EncodedRoi> {
    let aligned = roi_align(feature_map, bbox, cfg.roi_h, cfg.roi_w, cfg.samples_per_bin)?;
    let roi = lift_roi(p, &aligned)?;
    encode_roi(p, roi, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> HeadConfig {
        HeadConfig {
            embed_dim: 8,
            roi_h: 3,
            roi_w: 2,
            ffn_dim: 12,
            backbone: BackboneKind::Identity,
            input_channels: 8,
            ..HeadConfig::default()
        }
    }

    fn params(cfg: &HeadConfig, seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut rng);
        register(&mut b, cfg).unwrap();
        b.finish()
    }

    #[test]
    fn token_count_is_four_roi_cells() {
        let cfg = small_cfg();
        let p = params(&cfg, 1);
        let fm = Tensor::full(&[8, 10, 10], 0.3);
        let enc = encode(&fm, &BoundingBox::new(1.0, 2.0, 7.0, 9.0).unwrap(), &p, &cfg).unwrap();
        assert_eq!(enc.tokens.count(), 4 * 3 * 2);
        assert_eq!(enc.tokens.tokens.shape(), &[24, 8]);
        assert_eq!(enc.roi.values.shape(), &[8, 6, 4]);
        assert_eq!(enc.tokens.channel_major().unwrap().shape(), &[8, 24]);
    }

    #[test]
    fn zero_sublayers_leave_normalized_residual() {
        let cfg = small_cfg();
        let mut p = params(&cfg, 2);
        let zero_names: Vec<String> = p
            .names()
            .filter(|n| n.contains(".attn.") || n.contains(".ffn."))
            .map(str::to_string)
            .collect();
        for n in &zero_names {
            let len = p.get(n).unwrap().numel();
            p.set_values(n, vec![0.0; len]).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(crate::params::uniform_vec(&mut rng, 24 * 8, -1.0, 1.0), &[24, 8]).unwrap();
        let (y, _) = encoder_layer(&p, "encoder.layer0", &x, &cfg).unwrap();
        let g = Tensor::ones(&[8]);
        let b = Tensor::zeros(&[8]);
        let once = ops::layer_norm(&x, 8, &g, &b).unwrap();
        let twice = ops::layer_norm(&once, 8, &g, &b).unwrap();
        for (a, e) in y.data().iter().zip(twice.data()) {
            assert!((a - e).abs() < 1e-12);
        }

        let mut no_norm = cfg.clone();
        no_norm.layer_norm = false;
        let (y, _) = encoder_layer(&p, "encoder.layer0", &x, &no_norm).unwrap();
        assert_eq!(y.data(), x.data());
    }
}
