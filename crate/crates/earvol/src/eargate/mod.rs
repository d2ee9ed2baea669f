//! Slice-level ear / non-ear gating.
//!
//! A small CNN (or a 50-layer residual variant) labels every axial slice of a
//! volume, and a two-stage smoothing pass turns the raw labels into a single
//! contiguous ear segment. Training runs patient-level k-fold cross
//! validation with rotation/brightness augmentation.

mod labels;
mod metrics;
mod model;
mod smooth;
mod train;

pub use labels::{read_label_csv, write_label_csv, LabelRow};
pub use metrics::{classification_metrics, ClassificationMetrics};
pub use model::{
    build_classifier, classify_volume, load_classifier, save_classifier, Classifier,
    ClassifierConfig, ClassifierVariant,
};
pub use smooth::smooth_labels;
pub use train::{
    train_classifier, ClassifierSample, FoldOutcome, OptimizerKind, TrainConfig, TrainReport,
};

use thiserror::Error;

/// Ordered binary labels, one per axial slice of one volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence(pub Vec<u8>);

impl LabelSequence {
    pub fn new(labels: Vec<u8>) -> Result<LabelSequence, EarGateError> {
        if labels.iter().any(|&l| l > 1) {
            return Err(EarGateError::BadLabel);
        }
        Ok(LabelSequence(labels))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index range of the (single) run of 1s, if any: `[start, end)`.
    pub fn ear_segment(&self) -> Option<(usize, usize)> {
        let start = self.0.iter().position(|&l| l == 1)?;
        let end = self.0[start..]
            .iter()
            .position(|&l| l == 0)
            .map(|off| start + off)
            .unwrap_or(self.0.len());
        Some((start, end))
    }
}

#[derive(Debug, Error)]
pub enum EarGateError {
    #[error("labels must be 0 or 1")]
    BadLabel,
    #[error("prediction and truth lengths differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("model was trained for {expected}, volume is {got}")]
    ModalityError { expected: String, got: String },
    #[error("invalid classifier config: {0}")]
    ConfigError(String),
    #[error("need at least {needed} patients, got {got}")]
    InsufficientPatients { needed: usize, got: usize },
    #[error("csv parse error at line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
