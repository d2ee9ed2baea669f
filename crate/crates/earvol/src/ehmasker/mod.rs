//! Patch-based binary segmentation of the vestibular cavity (SPACE-MRC) and
//! the endolymphatic space (REAL-IR).
//!
//! 96×96 patches centered on the detected (or annotated) ear are min-max
//! normalized and segmented by a U-Net; sigmoid probabilities are binarized
//! at a modality-specific threshold.

mod patch;
mod train;
mod unet;

pub use patch::{
    extract_patch, extract_patch_raw, flip_augment, read_mask_png, write_mask_png, Patch,
    PATCH_SIZE,
};
pub use train::{
    segment_patch, train_segmenter, BinarizationPolicy, SegSample, SegTrainConfig,
    SegTrainReport,
};
pub use unet::{build_unet, load_unet, save_unet, UNet, UNetConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EhMaskerError {
    #[error("crop center ({x}, {y}) outside the {w}x{h} slice")]
    OutOfBounds {
        x: f64,
        y: f64,
        w: usize,
        h: usize,
    },
    #[error("model was trained for {expected}, patch is {got}")]
    ModalityError { expected: String, got: String },
    #[error("invalid segmenter config: {0}")]
    ConfigError(String),
    #[error("need at least {needed} patients, got {got}")]
    InsufficientPatients { needed: usize, got: usize },
    #[error("patch/mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(String),
}
