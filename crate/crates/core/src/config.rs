//! Mask-head architecture configuration.

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneKind;
use crate::error::{Error, Result};

/// One of the four output masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Occluder,
    Visible,
    Amodal,
    Invisible,
}

impl MaskKind {
    pub const ALL: [MaskKind; 4] = [MaskKind::Occluder, MaskKind::Visible, MaskKind::Amodal, MaskKind::Invisible];

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Occluder => "occluder",
            MaskKind::Visible => "visible",
            MaskKind::Amodal => "amodal",
            MaskKind::Invisible => "invisible",
        }
    }
}

/// Which optional embeddings take part. The amodal query is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFlags {
    pub occluder: bool,
    pub visible: bool,
    pub invisible: bool,
}

impl Default for QueryFlags {
    fn default() -> Self {
        Self::full()
    }
}

impl QueryFlags {
    pub const fn full() -> Self {
        Self {
            occluder: true,
            visible: true,
            invisible: true,
        }
    }

    pub const fn amodal_only() -> Self {
        Self {
            occluder: false,
            visible: false,
            invisible: false,
        }
    }

    /// The six query-set ablations, numbered 1..=6:
    /// amodal; +occluder; +visible; +visible+invisible; +occluder+visible; all.
    pub const fn ablation_grid() -> [(u8, QueryFlags); 6] {
        const fn f(occluder: bool, visible: bool, invisible: bool) -> QueryFlags {
            QueryFlags {
                occluder,
                visible,
                invisible,
            }
        }
        [
            (1, f(false, false, false)),
            (2, f(true, false, false)),
            (3, f(false, true, false)),
            (4, f(false, true, true)),
            (5, f(true, true, false)),
            (6, f(true, true, true)),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.invisible && !self.visible {
            return Err(Error::Config(
                "the invisible embedding is computed from the visible query; enable visible too".into(),
            ));
        }
        Ok(())
    }

    /// Decoder queries in their fixed order.
    pub fn query_kinds(&self) -> Vec<MaskKind> {
        let mut v = Vec::with_capacity(3);
        if self.occluder {
            v.push(MaskKind::Occluder);
        }
        if self.visible {
            v.push(MaskKind::Visible);
        }
        v.push(MaskKind::Amodal);
        v
    }

    /// Output masks in `(occluder, visible, amodal, invisible)` order.
    pub fn mask_kinds(&self) -> Vec<MaskKind> {
        let mut v = self.query_kinds();
        if self.invisible {
            v.push(MaskKind::Invisible);
        }
        v
    }

    pub fn label(&self) -> String {
        self.mask_kinds().iter().map(|k| k.name()).collect::<Vec<_>>().join("+")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Embedding width C.
    pub embed_dim: usize,
    /// ROIAlign output size; the mask is twice this in each direction.
    pub roi_h: usize,
    pub roi_w: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    /// Feed-forward sublayer after cross-attention in each decoder layer.
    pub decoder_ffn: bool,
    /// LayerNorm after every residual addition.
    pub layer_norm: bool,
    pub samples_per_bin: usize,
    pub queries: QueryFlags,
    pub backbone: BackboneKind,
    /// Channels of the backbone input (image channels, or C for identity).
    pub input_channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            roi_h: 14,
            roi_w: 14,
            heads: 1,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 128,
            decoder_ffn: false,
            layer_norm: true,
            samples_per_bin: 2,
            queries: QueryFlags::full(),
            backbone: BackboneKind::Conv,
            input_channels: 3,
        }
    }
}

impl HeadConfig {
    pub fn mask_h(&self) -> usize {
        2 * self.roi_h
    }

    pub fn mask_w(&self) -> usize {
        2 * self.roi_w
    }

    pub fn tokens(&self) -> usize {
        self.mask_h() * self.mask_w()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("roi_h", self.roi_h),
            ("roi_w", self.roi_w),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("ffn_dim", self.ffn_dim),
            ("samples_per_bin", self.samples_per_bin),
            ("input_channels", self.input_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::Config(format!("embed_dim {} must be a multiple of 4", self.embed_dim)));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide embed_dim {}", self.heads, self.embed_dim)));
        }
        if self.backbone == BackboneKind::Identity && self.input_channels != self.embed_dim {
            return Err(Error::Config(format!(
                "identity backbone needs {}-channel feature maps, configured {}",
                self.embed_dim, self.input_channels
            )));
        }
        self.queries.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_grid_shapes() {
        let grid = QueryFlags::ablation_grid();
        let counts: Vec<usize> = grid.iter().map(|(_, f)| f.mask_kinds().len()).collect();
        assert_eq!(counts, vec![1, 2, 2, 3, 3, 4]);
        assert!(grid.iter().all(|(_, f)| f.validate().is_ok()));
        assert_eq!(grid[0].1.mask_kinds(), vec![MaskKind::Amodal]);
        assert_eq!(grid[5].1, QueryFlags::full());
    }

    #[test]
    fn invisible_needs_visible() {
        let f = QueryFlags {
            occluder: true,
            visible: false,
            invisible: true,
        };
        assert!(f.validate().is_err());
    }

    #[test]
    fn default_is_valid() {
        HeadConfig::default().validate().unwrap();
        let mut c = HeadConfig::default();
        c.heads = 3;
        assert!(c.validate().is_err());
    }
}
