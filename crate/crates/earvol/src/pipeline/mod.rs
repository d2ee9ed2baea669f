//! End-to-end orchestration: classify → smooth → detect → crop → segment →
//! threshold → assemble → post-process → volumes → ELR → report.
//!
//! The two sequences run independently per patient and join only at the
//! ratio step. Any per-patient failure degrades to warnings on that
//! patient's rows; the cohort always finishes.

mod config;
mod evaluate;
mod overlay;
mod report;
mod run;
mod train;

pub use config::{PipelineConfig, StageTrainProfile, TrainProfiles};
pub use evaluate::{cmd_evaluate, EvalSummary};
pub use overlay::draw_overlay;
pub use report::{read_ear_reports, write_ear_reports, EarReport, RunReport, StageTiming};
pub use run::run_pipeline;
pub use train::{cmd_train, Stage, TrainMode, TrainOutcome};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing modality folder {modality} for patient {patient}")]
    MissingModality { patient: String, modality: String },
    #[error("prediction/ground-truth id mismatch: {0}")]
    IdMismatch(String),
    #[error("stage {stage} failed: {msg}")]
    Stage { stage: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
