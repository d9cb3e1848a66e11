//! Transformer mask head for amodal instance segmentation.
//!
//! Given a feature map and a box, the head predicts four masks for the object
//! in the box: occluder, visible, amodal and invisible. The pipeline is
//! ROIAlign → deconvolution → 1×1 convolution → transformer encoder, then a
//! decoder that turns learnable occluder/visible/amodal queries into mask
//! embeddings, an MLP that derives the invisible embedding from the visible
//! and amodal ones, and per-pixel dot products.
//!
//! Everything runs on a small reverse-mode autodiff core ([`tensor`],
//! [`ops`]) in `f64`. The crate also carries the data side (RLE masks,
//! COCO-style amodal annotations, a synthetic occluded-shapes generator),
//! COCO-style mask AP/AR evaluation, checkpoints and the training loop.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod head;
pub mod infer;
pub mod invisible;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod posenc;
pub mod roi;
pub mod run;
pub mod tensor;
pub mod train;

pub use config::{HeadConfig, MaskKind, QueryFlags};
pub use error::{Error, Result};
pub use model::AisFormer;
pub use params::ParameterSet;
pub use roi::BoundingBox;
pub use tensor::Tensor;
