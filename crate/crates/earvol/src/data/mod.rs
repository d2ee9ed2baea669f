//! Data model and on-disk layout shared by every pipeline stage.
//!
//! A dataset root holds one folder per MRI sequence, each with per-patient
//! subdirectories of grayscale slice images plus a `meta.txt` sidecar:
//!
//! ```text
//! <root>/SPACE-MRC/P001/P001_SPACE-MRC_0000.tif
//!                       ...
//!                       meta.txt        # spacing_z/y/x, expected_slices
//! <root>/REAL-IR/P001/...
//! ```
//!
//! Volumes are held in memory as `(slice, row, col)` f32 grids with physical
//! voxel spacing in millimeters. All types are immutable after construction
//! and safe to share across parallel workers.

mod imgops;
mod ingest;
mod naming;
mod normalize;
mod split;

pub use imgops::{flip_horizontal, resize_bilinear, rotate_bilinear};
pub use ingest::{export_stack, ingest_stack, ingest_stack_with_meta, IngestedStack, StackMeta};
pub use naming::{parse_filename, standardize_filename, SliceName};
pub use normalize::{minmax_normalize, normalize_per_volume};
pub use split::{assert_patient_partition, holdout_split, patient_folds, SplitError};

use ndarray::{Array2, Array3};
use std::fmt;
use std::path::PathBuf;
use thiserror::Error;

/// MRI sequence kind. The two sequences are processed independently and only
/// joined at the ratio step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    /// Heavily T2-weighted cisternographic sequence; the vestibular cavity is
    /// hyperintense. Isotropic 0.5 mm voxels.
    SpaceMrc,
    /// Inversion-recovery sequence separating endolymph from enhanced
    /// perilymph. 0.8 mm slices, 0.5 mm in-plane.
    RealIr,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::SpaceMrc, Modality::RealIr];

    /// Folder / filename token, e.g. `SPACE-MRC`.
    pub fn token(&self) -> &'static str {
        match self {
            Modality::SpaceMrc => "SPACE-MRC",
            Modality::RealIr => "REAL-IR",
        }
    }

    /// Default voxel spacing `(dz, dy, dx)` in millimeters; the slice axis is
    /// the thick one for REAL-IR.
    pub fn default_spacing(&self) -> (f64, f64, f64) {
        match self {
            Modality::SpaceMrc => (0.5, 0.5, 0.5),
            Modality::RealIr => (0.8, 0.5, 0.5),
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        match s {
            "SPACE-MRC" => Some(Modality::SpaceMrc),
            "REAL-IR" => Some(Modality::RealIr),
            _ => None,
        }
    }

    /// Lowercase key used in config files and CSV columns.
    pub fn key(&self) -> &'static str {
        match self {
            Modality::SpaceMrc => "space_mrc",
            Modality::RealIr => "real_ir",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Storage depth of the source images; preserved so export reproduces the
/// original bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    U8,
    U16,
}

/// A 3D scalar intensity grid with physical spacing.
///
/// Voxels are indexed `(slice, row, col)`; intensities keep the raw integer
/// values of the source images represented as f32.
#[derive(Debug, Clone)]
pub struct Volume {
    pub patient_id: String,
    pub modality: Modality,
    pub voxels: Array3<f32>,
    /// `(dz, dy, dx)` millimeters per voxel.
    pub spacing_mm: (f64, f64, f64),
    pub bit_depth: BitDepth,
}

impl Volume {
    pub fn new(
        patient_id: impl Into<String>,
        modality: Modality,
        voxels: Array3<f32>,
        spacing_mm: (f64, f64, f64),
    ) -> Result<Volume, DataError> {
        if voxels.is_empty() {
            return Err(DataError::InvalidVolume("volume has no voxels".into()));
        }
        if spacing_mm.0 <= 0.0 || spacing_mm.1 <= 0.0 || spacing_mm.2 <= 0.0 {
            return Err(DataError::InvalidVolume(format!(
                "non-positive spacing {spacing_mm:?}"
            )));
        }
        Ok(Volume {
            patient_id: patient_id.into(),
            modality,
            voxels,
            spacing_mm,
            bit_depth: BitDepth::U8,
        })
    }

    pub fn n_slices(&self) -> usize {
        self.voxels.shape()[0]
    }

    /// `(rows, cols)` of each axial slice.
    pub fn slice_shape(&self) -> (usize, usize) {
        (self.voxels.shape()[1], self.voxels.shape()[2])
    }

    /// Owned copy of one axial slice.
    pub fn slice(&self, index: usize) -> Array2<f32> {
        self.voxels
            .index_axis(ndarray::Axis(0), index)
            .to_owned()
    }

    /// Physical volume of a single voxel in mm³.
    pub fn voxel_mm3(&self) -> f64 {
        self.spacing_mm.0 * self.spacing_mm.1 * self.spacing_mm.2
    }
}

/// One labeled axial slice, the unit consumed by the slice classifier.
#[derive(Debug, Clone)]
pub struct SliceRecord {
    pub patient_id: String,
    pub modality: Modality,
    pub slice_index: usize,
    pub pixels: Array2<f32>,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no readable slice images in {0}")]
    NoSlices(PathBuf),
    #[error("slice {index} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        index: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("missing metadata: {0}")]
    MissingMetadata(String),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("filename does not follow <patient>_<MODALITY>_<index>: {0}")]
    BadFilename(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(String),
}
