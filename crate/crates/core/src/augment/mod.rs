//! Seedable image augmentation and quarter-turn rotations.

pub mod color;
mod image;
mod pipeline;
mod rotation;

pub use image::{CropBox, Image};
pub use pipeline::{
    apply_pipeline, apply_pipeline_traced, AugmentError, AugmentKind, AugmentSpec, AugmentTrace,
    Blur, Jitter, ResizedCrop, MIN_CROP_SIZE,
};
pub use rotation::{rotate90, sample_rotation, RotationLabel};

use crate::tensor::{Element, Tensor};

/// Stacks equally sized images into a `[B, C, H, W]` tensor.
pub fn stack<E: Element>(images: &[Image]) -> Tensor<E> {
    let first = &images[0];
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        assert_eq!(
            (img.channels, img.height, img.width),
            (first.channels, first.height, first.width),
            "stack: ragged batch"
        );
        data.extend(img.data.iter().map(|&v| E::from_f32(v).unwrap()));
    }
    Tensor::from_vec(
        data,
        &[images.len(), first.channels, first.height, first.width],
    )
    .expect("nonempty batch")
}
