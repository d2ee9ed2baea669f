//! earvol — fully automatic volumetric quantification of inner-ear fluid
//! spaces from paired MRI stacks.
//!
//! The pipeline chains three learned stages and a volumetric back end:
//!
//! 1. **eargate** – per-slice ear / non-ear gating of each axial stack,
//!    followed by label smoothing into a single contiguous ear segment.
//! 2. **auribox** – left/right inner-ear localization on the retained
//!    slices (compact single-shot detector + greedy NMS).
//! 3. **ehmasker** – binary segmentation of 96×96 ear patches with a
//!    U-Net (vestibular cavity on SPACE-MRC, endolymph on REAL-IR).
//! 4. **volumetrics** – 3D mask assembly, largest-component/hole-fill
//!    post-processing, physical volumes, and the endolymph-to-vestibule
//!    ratio (ELR) per ear.
//!
//! Training utilities (patient-level cross validation, the five
//! segmentation objectives with analytic gradients) and a synthetic
//! phantom generator with analytic ground truth live alongside the
//! inference path so the whole system can be exercised end-to-end on a
//! desk-scale cohort.
//!
//! Batch workloads (slice inference, per-patient processing, training
//! mini-batches) run data-parallel under the `parallel` feature (default)
//! and sequentially without it; both paths reduce in index order and
//! produce bit-identical results.

pub mod auribox;
pub mod data;
pub mod eargate;
pub mod ehmasker;
pub mod evaluation;
pub mod losses;
pub mod nn;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod volumetrics;

pub use data::{Modality, Volume};
pub use pipeline::{EarReport, PipelineConfig, RunReport};
