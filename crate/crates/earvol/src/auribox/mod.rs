//! Inner-ear localization: annotation conversion, a compact single-shot
//! detector, non-maximum suppression, and detection evaluation.
//!
//! Boxes are axis-aligned and normalized by image width/height, one class
//! per side (left = 0, right = 1). The detector predicts at a single scale
//! with three anchors fit by k-means on the training boxes; at most one box
//! per class survives per slice (confidence ≥ 0.3, NMS at IoU 0.45).

mod augment;
mod boxes;
mod detector;
mod map;
mod nms;
mod train;

pub use augment::{mosaic_tile, random_perspective, random_scale_crop, AugmentConfig};
pub use boxes::{
    centroid_to_box, iou, parse_yolo_line, read_centroid_csv, read_yolo_file, write_centroid_csv,
    write_yolo_file, CentroidRow, NormalizedBox, Side,
};
pub use detector::{
    detect_ears, load_detector, save_detector, CompactDetector, DetectorConfig,
};
pub use map::{map_at_50, DetectionMetrics};
pub use nms::nms;
pub use train::{
    kmeans_anchors, train_detector, DetectorFoldOutcome, DetectorSample, DetectorTrainReport,
    SideAccuracy,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AuriBoxError {
    #[error("box ({w}x{h}) does not fit a {img_w}x{img_h} image")]
    BoxTooLarge {
        w: f64,
        h: f64,
        img_w: usize,
        img_h: usize,
    },
    #[error("centroid ({x}, {y}) outside the image")]
    CentroidOutside { x: f64, y: f64 },
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("missing annotation file: {0}")]
    MissingAnnotation(String),
    #[error("annotation parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("need at least {needed} patients, got {got}")]
    InsufficientPatients { needed: usize, got: usize },
    #[error("model was trained for {expected}, slice is {got}")]
    ModalityError { expected: String, got: String },
    #[error("invalid detector config: {0}")]
    ConfigError(String),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
