//! The assembled head: parameter layout plus image-level forward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone;
use crate::config::HeadConfig;
use crate::decoder;
use crate::encoder;
use crate::error::Result;
use crate::head::{forward_full, HeadOutput};
use crate::invisible;
use crate::params::{ParamBuilder, ParameterSet};
use crate::roi::BoundingBox;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AisFormer {
    pub config: HeadConfig,
}

impl AisFormer {
    pub fn new(config: HeadConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Fresh parameters; the same seed always yields the same values.
    pub fn init_params(&self, seed: u64) -> Result<ParameterSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.init_params_with(&mut rng)
    }

    pub fn init_params_with(&self, rng: &mut ChaCha8Rng) -> Result<ParameterSet> {
        let cfg = &self.config;
        let mut b = ParamBuilder::new(rng);
        backbone::register(&mut b, cfg.backbone, cfg.input_channels, cfg.embed_dim)?;
        encoder::register(&mut b, cfg)?;
        decoder::register(&mut b, cfg)?;
        if cfg.queries.invisible {
            invisible::register(&mut b, cfg.embed_dim)?;
        }
        Ok(b.finish())
    }

    /// Backbone features for an image `[channels × H × W]`.
    pub fn features(&self, p: &ParameterSet, image: &Tensor) -> Result<Tensor> {
        backbone::forward(p, self.config.backbone, image)
    }

    /// Box given in image pixels, mapped onto the feature map.
    pub fn feature_box(&self, bbox: &BoundingBox) -> BoundingBox {
        bbox.scaled(1.0 / self.config.backbone.stride() as f64)
    }

    /// Head output for one ROI of already computed features.
    pub fn forward_roi(&self, p: &ParameterSet, features: &Tensor, bbox: &BoundingBox) -> Result<HeadOutput> {
        forward_full(features, &self.feature_box(bbox), p, &self.config)
    }

    /// Backbone plus head for every box of one image (boxes in image pixels).
    pub fn forward_image(&self, p: &ParameterSet, image: &Tensor, boxes: &[BoundingBox]) -> Result<Vec<HeadOutput>> {
        let f = self.features(p, image)?;
        boxes.iter().map(|b| self.forward_roi(p, &f, b)).collect()
    }
}
