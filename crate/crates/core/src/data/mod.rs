//! Masks, annotations, synthetic scenes and ROI ground truth.

mod annotations;
mod bitmap;
mod gt;
mod pnm;
mod rle;
mod synth;

pub use annotations::{box_pixel_range, load_annotations, AmodalInstance, Category, Dataset, ImageEntry, ImageRecord};
pub use bitmap::Bitmap;
pub use gt::{gt_at_mask_resolution, paste_mask, resample_bitmap};
pub use pnm::{gray_from_values, Image};
pub use rle::{rle_decode, rle_encode, rle_intersection_union, RleMask};
pub use synth::{
    derive_seed, synth_categories, synth_dataset, synth_generate, SceneSpec, ShapeKind, ShapeSpec, SynthOptions,
    SynthScene,
};
