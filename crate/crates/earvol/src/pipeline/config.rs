//! Pipeline configuration: a flat `key=value` file with dotted section
//! prefixes (no external config dependencies by design).
//!
//! ```text
//! data.root=/data/cohort
//! output.dir=/data/out
//! run.seed=7
//! run.parallelism=2
//! binarization.space_mrc=0.9
//! binarization.real_ir=0.8
//! checkpoint.eargate.space_mrc=/data/out/checkpoints/eargate_space_mrc.ckpt
//! ...
//! train.eargate.input_size=64
//! ```

use super::PipelineError;
use crate::data::Modality;
use crate::ehmasker::BinarizationPolicy;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Per-stage training knobs. Code defaults follow the shipped architecture
/// and schedules; a config file may override any of them (the phantom
/// template writes a desk-scale profile).
#[derive(Debug, Clone)]
pub struct StageTrainProfile {
    pub input_size: usize,
    pub max_epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub folds: usize,
    pub loss: String,
    /// EarGate: cap of ear/non-ear slices per patient (0 = use everything).
    pub slices_per_class: usize,
    /// AuriBox: negative slices added per patient.
    pub negatives_per_patient: usize,
    /// EHMasker: first-level channel width.
    pub base_channels: usize,
    /// AuriBox augmentation preset: full | light | none.
    pub augment: String,
}

#[derive(Debug, Clone)]
pub struct TrainProfiles {
    pub eargate: StageTrainProfile,
    pub auribox: StageTrainProfile,
    pub ehmasker: StageTrainProfile,
}

impl Default for TrainProfiles {
    fn default() -> Self {
        TrainProfiles {
            eargate: StageTrainProfile {
                input_size: 224,
                max_epochs: 50,
                lr: 1e-3,
                batch_size: 16,
                folds: 5,
                loss: "weighted_ce".into(),
                slices_per_class: 0,
                negatives_per_patient: 0,
                base_channels: 0,
                augment: "none".into(),
            },
            auribox: StageTrainProfile {
                input_size: 160,
                max_epochs: 50,
                lr: 0.01,
                batch_size: 8,
                folds: 5,
                loss: "yolo".into(),
                slices_per_class: 0,
                negatives_per_patient: 2,
                base_channels: 0,
                augment: "full".into(),
            },
            ehmasker: StageTrainProfile {
                input_size: 96,
                max_epochs: 100,
                lr: 1e-4,
                batch_size: 16,
                folds: 1,
                loss: "bce_dice".into(),
                slices_per_class: 0,
                negatives_per_patient: 0,
                base_channels: 32,
                augment: "flip".into(),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Worker limit for per-patient parallelism (0 = library default).
    pub parallelism: usize,
    pub overlays: bool,
    pub binarization: BinarizationPolicy,
    /// Checkpoint paths: [eargate, auribox, ehmasker] × modality.
    pub checkpoints: BTreeMap<(String, Modality), PathBuf>,
    /// Optional spacing overrides per modality (dz, dy, dx).
    pub spacing_override: BTreeMap<Modality, (f64, f64, f64)>,
    pub detector_conf_threshold: f64,
    pub detector_nms_iou: f64,
    pub train: TrainProfiles,
}

pub const STAGE_NAMES: [&str; 3] = ["eargate", "auribox", "ehmasker"];

impl PipelineConfig {
    /// A config rooted at `data_root` with checkpoints under
    /// `<output_dir>/checkpoints/`.
    pub fn with_roots(data_root: &Path, output_dir: &Path) -> PipelineConfig {
        let mut checkpoints = BTreeMap::new();
        for stage in STAGE_NAMES {
            for modality in Modality::ALL {
                checkpoints.insert(
                    (stage.to_string(), modality),
                    output_dir
                        .join("checkpoints")
                        .join(format!("{stage}_{}.ckpt", modality.key())),
                );
            }
        }
        PipelineConfig {
            data_root: data_root.to_path_buf(),
            output_dir: output_dir.to_path_buf(),
            seed: 7,
            parallelism: 0,
            overlays: false,
            binarization: BinarizationPolicy::default(),
            checkpoints,
            spacing_override: BTreeMap::new(),
            detector_conf_threshold: 0.3,
            detector_nms_iou: 0.45,
            train: TrainProfiles::default(),
        }
    }

    pub fn checkpoint(&self, stage: &str, modality: Modality) -> Result<&PathBuf, PipelineError> {
        self.checkpoints
            .get(&(stage.to_string(), modality))
            .ok_or_else(|| {
                PipelineError::Config(format!("no checkpoint path for {stage}/{modality}"))
            })
    }

    pub fn from_file(path: &Path) -> Result<PipelineConfig, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(PipelineError::Config(format!(
                    "{}:{}: expected key=value",
                    path.display(),
                    lineno + 1
                )));
            };
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let root = kv
            .get("data.root")
            .ok_or_else(|| PipelineError::Config("missing data.root".into()))?;
        let out = kv
            .get("output.dir")
            .ok_or_else(|| PipelineError::Config("missing output.dir".into()))?;
        let mut cfg = PipelineConfig::with_roots(Path::new(root), Path::new(out));

        let parse = |kv: &BTreeMap<String, String>, key: &str| -> Option<String> {
            kv.get(key).cloned()
        };
        if let Some(v) = parse(&kv, "run.seed") {
            cfg.seed = v
                .parse()
                .map_err(|_| PipelineError::Config(format!("bad run.seed {v}")))?;
        }
        if let Some(v) = parse(&kv, "run.parallelism") {
            cfg.parallelism = v
                .parse()
                .map_err(|_| PipelineError::Config(format!("bad run.parallelism {v}")))?;
        }
        if let Some(v) = parse(&kv, "run.overlays") {
            cfg.overlays = v == "true" || v == "1";
        }
        if let Some(v) = parse(&kv, "binarization.space_mrc") {
            cfg.binarization.threshold_space_mrc = parse_f64(&v, "binarization.space_mrc")?;
        }
        if let Some(v) = parse(&kv, "binarization.real_ir") {
            cfg.binarization.threshold_real_ir = parse_f64(&v, "binarization.real_ir")?;
        }
        if let Some(v) = parse(&kv, "detector.conf_threshold") {
            cfg.detector_conf_threshold = parse_f64(&v, "detector.conf_threshold")?;
        }
        if let Some(v) = parse(&kv, "detector.nms_iou") {
            cfg.detector_nms_iou = parse_f64(&v, "detector.nms_iou")?;
        }
        for stage in STAGE_NAMES {
            for modality in Modality::ALL {
                let key = format!("checkpoint.{stage}.{}", modality.key());
                if let Some(v) = kv.get(&key) {
                    cfg.checkpoints
                        .insert((stage.to_string(), modality), PathBuf::from(v));
                }
            }
        }
        for modality in Modality::ALL {
            let key = format!("spacing.{}", modality.key());
            if let Some(v) = kv.get(&key) {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|p| parse_f64(p.trim(), &key))
                    .collect::<Result<_, _>>()?;
                if parts.len() != 3 || parts.iter().any(|&s| s <= 0.0) {
                    return Err(PipelineError::Config(format!(
                        "{key} must be three positive numbers"
                    )));
                }
                cfg.spacing_override
                    .insert(modality, (parts[0], parts[1], parts[2]));
            }
        }
        for (stage, profile) in [
            ("eargate", &mut cfg.train.eargate),
            ("auribox", &mut cfg.train.auribox),
            ("ehmasker", &mut cfg.train.ehmasker),
        ] {
            let get_usize = |kv: &BTreeMap<String, String>, field: &str| -> Result<Option<usize>, PipelineError> {
                match kv.get(&format!("train.{stage}.{field}")) {
                    Some(v) => v
                        .parse::<usize>()
                        .map(Some)
                        .map_err(|_| PipelineError::Config(format!("bad train.{stage}.{field}"))),
                    None => Ok(None),
                }
            };
            if let Some(v) = get_usize(&kv, "input_size")? {
                profile.input_size = v;
            }
            if let Some(v) = get_usize(&kv, "max_epochs")? {
                profile.max_epochs = v;
            }
            if let Some(v) = get_usize(&kv, "batch_size")? {
                profile.batch_size = v;
            }
            if let Some(v) = get_usize(&kv, "folds")? {
                profile.folds = v;
            }
            if let Some(v) = get_usize(&kv, "slices_per_class")? {
                profile.slices_per_class = v;
            }
            if let Some(v) = get_usize(&kv, "negatives_per_patient")? {
                profile.negatives_per_patient = v;
            }
            if let Some(v) = get_usize(&kv, "base_channels")? {
                profile.base_channels = v;
            }
            if let Some(v) = kv.get(&format!("train.{stage}.lr")) {
                profile.lr = v
                    .parse()
                    .map_err(|_| PipelineError::Config(format!("bad train.{stage}.lr")))?;
            }
            if let Some(v) = kv.get(&format!("train.{stage}.loss")) {
                profile.loss = v.clone();
            }
            if let Some(v) = kv.get(&format!("train.{stage}.augment")) {
                profile.augment = v.clone();
            }
        }
        Ok(cfg)
    }

    /// Serialize to the flat key=value format.
    pub fn to_file_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "data.root={}", self.data_root.display());
        let _ = writeln!(s, "output.dir={}", self.output_dir.display());
        let _ = writeln!(s, "run.seed={}", self.seed);
        let _ = writeln!(s, "run.parallelism={}", self.parallelism);
        let _ = writeln!(s, "run.overlays={}", self.overlays);
        let _ = writeln!(s, "binarization.space_mrc={}", self.binarization.threshold_space_mrc);
        let _ = writeln!(s, "binarization.real_ir={}", self.binarization.threshold_real_ir);
        let _ = writeln!(s, "detector.conf_threshold={}", self.detector_conf_threshold);
        let _ = writeln!(s, "detector.nms_iou={}", self.detector_nms_iou);
        for ((stage, modality), path) in &self.checkpoints {
            let _ = writeln!(s, "checkpoint.{stage}.{}={}", modality.key(), path.display());
        }
        for (modality, (dz, dy, dx)) in &self.spacing_override {
            let _ = writeln!(s, "spacing.{}={dz},{dy},{dx}", modality.key());
        }
        for (stage, p) in [
            ("eargate", &self.train.eargate),
            ("auribox", &self.train.auribox),
            ("ehmasker", &self.train.ehmasker),
        ] {
            let _ = writeln!(s, "train.{stage}.input_size={}", p.input_size);
            let _ = writeln!(s, "train.{stage}.max_epochs={}", p.max_epochs);
            let _ = writeln!(s, "train.{stage}.lr={}", p.lr);
            let _ = writeln!(s, "train.{stage}.batch_size={}", p.batch_size);
            let _ = writeln!(s, "train.{stage}.folds={}", p.folds);
            let _ = writeln!(s, "train.{stage}.loss={}", p.loss);
            let _ = writeln!(s, "train.{stage}.slices_per_class={}", p.slices_per_class);
            let _ = writeln!(
                s,
                "train.{stage}.negatives_per_patient={}",
                p.negatives_per_patient
            );
            let _ = writeln!(s, "train.{stage}.base_channels={}", p.base_channels);
            let _ = writeln!(s, "train.{stage}.augment={}", p.augment);
        }
        s
    }

    pub fn write_file(&self, path: &Path) -> Result<(), PipelineError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_file_text())?;
        Ok(())
    }

    /// Effective spacing for a modality.
    pub fn spacing(&self, modality: Modality) -> Option<(f64, f64, f64)> {
        self.spacing_override.get(&modality).copied()
    }
}

fn parse_f64(v: &str, key: &str) -> Result<f64, PipelineError> {
    v.parse::<f64>()
        .map_err(|_| PipelineError::Config(format!("bad {key}: {v}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_through_text() {
        let dir = tempdir().unwrap();
        let mut cfg = PipelineConfig::with_roots(Path::new("/data/in"), Path::new("/data/out"));
        cfg.seed = 42;
        cfg.overlays = true;
        cfg.binarization.threshold_real_ir = 0.7;
        cfg.spacing_override
            .insert(Modality::RealIr, (0.8, 0.5, 0.5));
        cfg.train.eargate.input_size = 64;
        let path = dir.path().join("pipeline.conf");
        cfg.write_file(&path).unwrap();
        let back = PipelineConfig::from_file(&path).unwrap();
        assert_eq!(back.seed, 42);
        assert!(back.overlays);
        assert_eq!(back.binarization.threshold_real_ir, 0.7);
        assert_eq!(back.spacing(Modality::RealIr), Some((0.8, 0.5, 0.5)));
        assert_eq!(back.train.eargate.input_size, 64);
        assert_eq!(
            back.checkpoint("ehmasker", Modality::SpaceMrc).unwrap(),
            cfg.checkpoint("ehmasker", Modality::SpaceMrc).unwrap()
        );
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(
            &path,
            "# a comment\n\ndata.root=/r\noutput.dir=/o\nrun.seed=3\n",
        )
        .unwrap();
        let cfg = PipelineConfig::from_file(&path).unwrap();
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn missing_required_keys_fail() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "output.dir=/o\n").unwrap();
        assert!(matches!(
            PipelineConfig::from_file(&path),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn malformed_lines_fail() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "data.root=/r\noutput.dir=/o\nnot a kv line\n").unwrap();
        assert!(PipelineConfig::from_file(&path).is_err());
    }
}
