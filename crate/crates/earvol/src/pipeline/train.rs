//! Stage training from a dataset root: loads the on-disk cohort, trains the
//! requested stage per modality, writes fold-metric tables, and saves the
//! checkpoints the inference pipeline consumes.
//!
//! Two modes mirror the study protocol: `CrossValidation` runs the full
//! patient-level k-fold harness for model comparison; `Final` retrains one
//! model on the 80% side of the split (fold 0) for deployment. The
//! segmentation stage always uses its 80/20 + validation split.

use super::config::PipelineConfig;
use super::PipelineError;
use crate::auribox::{
    read_yolo_file, save_detector, train_detector, AugmentConfig, DetectorConfig, DetectorSample,
    Side,
};
use crate::data::{ingest_stack, normalize_per_volume, standardize_filename, Modality};
use crate::eargate::{
    read_label_csv, save_classifier, train_classifier, ClassifierConfig, ClassifierSample,
    TrainConfig,
};
use crate::ehmasker::{
    extract_patch, extract_patch_raw, read_mask_png, save_unet, train_segmenter, SegSample,
    SegTrainConfig, UNetConfig, PATCH_SIZE,
};
use crate::evaluation::{write_table, FoldMetrics, TableShape};
use crate::losses::{LossConfig, LossKind};
use crate::nn::ClsLoss;
use crate::phantom::read_annotations_csv;
use crate::rng::derive_seed;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    EarGate,
    AuriBox,
    EhMasker,
}

impl Stage {
    pub fn tag(&self) -> &'static str {
        match self {
            Stage::EarGate => "eargate",
            Stage::AuriBox => "auribox",
            Stage::EhMasker => "ehmasker",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        match s {
            "eargate" => Some(Stage::EarGate),
            "auribox" => Some(Stage::AuriBox),
            "ehmasker" => Some(Stage::EhMasker),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    CrossValidation,
    Final,
}

pub struct TrainOutcome {
    pub stage: Stage,
    pub checkpoints: Vec<PathBuf>,
    pub tables: Vec<PathBuf>,
    pub summary: Vec<String>,
    pub seconds: f64,
}

/// Train one stage for both modalities.
pub fn cmd_train(
    stage: Stage,
    cfg: &PipelineConfig,
    mode: TrainMode,
) -> Result<TrainOutcome, PipelineError> {
    let start = Instant::now();
    let mut outcome = TrainOutcome {
        stage,
        checkpoints: Vec::new(),
        tables: Vec::new(),
        summary: Vec::new(),
        seconds: 0.0,
    };
    for modality in Modality::ALL {
        match stage {
            Stage::EarGate => train_eargate(cfg, mode, modality, &mut outcome)?,
            Stage::AuriBox => train_auribox(cfg, mode, modality, &mut outcome)?,
            Stage::EhMasker => train_ehmasker(cfg, modality, &mut outcome)?,
        }
    }
    outcome.seconds = start.elapsed().as_secs_f64();
    Ok(outcome)
}

fn stage_err(stage: &str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage: stage.into(),
        msg: e.to_string(),
    }
}

/// labels.csv → (patient, modality) → slice labels in index order.
fn load_labels(
    cfg: &PipelineConfig,
) -> Result<BTreeMap<(String, Modality), Vec<(usize, u8)>>, PipelineError> {
    let rows = read_label_csv(&cfg.data_root.join("labels.csv"))
        .map_err(|e| PipelineError::Config(format!("labels.csv: {e}")))?;
    let mut out: BTreeMap<(String, Modality), Vec<(usize, u8)>> = BTreeMap::new();
    for r in rows {
        out.entry((r.patient_id, r.modality))
            .or_default()
            .push((r.slice_index, r.label));
    }
    for v in out.values_mut() {
        v.sort_unstable();
    }
    Ok(out)
}

fn ingest_patient(
    cfg: &PipelineConfig,
    pid: &str,
    modality: Modality,
) -> Result<crate::data::Volume, PipelineError> {
    let dir = cfg.data_root.join(modality.token()).join(pid);
    let mut v = ingest_stack(&dir)
        .map_err(|e| PipelineError::Config(format!("{pid}/{modality}: {e}")))?
        .volume;
    v.patient_id = pid.to_string();
    v.modality = modality;
    if let Some(sp) = cfg.spacing(modality) {
        v.spacing_mm = sp;
    }
    Ok(v)
}

/// Evenly spaced subset of `items` (deterministic; returns everything when
/// `k` is 0 or exceeds the input).
fn evenly_spaced<T: Copy>(items: &[T], k: usize) -> Vec<T> {
    if k == 0 || k >= items.len() {
        return items.to_vec();
    }
    (0..k)
        .map(|i| items[i * items.len() / k + items.len() / (2 * k)])
        .collect()
}

// ---------------------------------------------------------------------------
// EarGate
// ---------------------------------------------------------------------------

fn train_eargate(
    cfg: &PipelineConfig,
    mode: TrainMode,
    modality: Modality,
    outcome: &mut TrainOutcome,
) -> Result<(), PipelineError> {
    let profile = &cfg.train.eargate;
    let labels = load_labels(cfg)?;
    let mut samples: Vec<ClassifierSample> = Vec::new();
    for ((pid, m), slice_labels) in &labels {
        if *m != modality {
            continue;
        }
        let volume = ingest_patient(cfg, pid, modality)?;
        let normalized = normalize_per_volume(&volume);
        let ear: Vec<usize> = slice_labels
            .iter()
            .filter(|(_, l)| *l == 1)
            .map(|(k, _)| *k)
            .collect();
        let non_ear: Vec<usize> = slice_labels
            .iter()
            .filter(|(_, l)| *l == 0)
            .map(|(k, _)| *k)
            .collect();
        let chosen_ear = evenly_spaced(&ear, profile.slices_per_class);
        let chosen_non = evenly_spaced(&non_ear, profile.slices_per_class);
        for (&k, label) in chosen_ear
            .iter()
            .map(|k| (k, 1u8))
            .chain(chosen_non.iter().map(|k| (k, 0u8)))
            .map(|(k, l)| (k, l))
        {
            if k >= normalized.n_slices() {
                continue;
            }
            samples.push(ClassifierSample {
                patient_id: pid.clone(),
                slice_index: k,
                pixels: normalized.slice(k),
                label,
            });
        }
    }

    let loss = ClsLoss::parse(&profile.loss)
        .ok_or_else(|| stage_err("eargate", format!("unknown loss {}", profile.loss)))?;
    let model_cfg = ClassifierConfig {
        input_size: (profile.input_size, profile.input_size),
        ..Default::default()
    };
    let train_cfg = TrainConfig {
        max_epochs: profile.max_epochs,
        lr: profile.lr,
        loss,
        folds: profile.folds.max(2),
        batch_size: profile.batch_size,
        seed: derive_seed(cfg.seed, &[70, modality as u64]),
        limit_folds: match mode {
            TrainMode::CrossValidation => None,
            TrainMode::Final => Some(1),
        },
        ..Default::default()
    };
    let report = train_classifier(&samples, &model_cfg, &train_cfg, modality)
        .map_err(|e| stage_err("eargate", e))?;

    // audit: no validation patient may appear twice across folds
    crate::data::assert_patient_partition(
        &report
            .folds
            .iter()
            .flat_map(|f| f.val_patients.clone())
            .collect::<Vec<_>>(),
        &report
            .folds
            .iter()
            .map(|f| f.val_patients.clone())
            .collect::<Vec<_>>(),
    )
    .map_err(|e| stage_err("eargate", e))?;

    let label = format!("custom_cnn+{}", profile.loss);
    let fold_rows = FoldMetrics {
        stage: "eargate".into(),
        label: label.clone(),
        values: vec![
            (
                "accuracy".into(),
                report.folds.iter().map(|f| f.metrics.accuracy).collect(),
            ),
            ("f1".into(), report.folds.iter().map(|f| f.metrics.f1).collect()),
            (
                "precision".into(),
                report.folds.iter().map(|f| f.metrics.precision).collect(),
            ),
            (
                "recall".into(),
                report.folds.iter().map(|f| f.metrics.recall).collect(),
            ),
        ],
    };
    let table_path = cfg
        .output_dir
        .join("reports")
        .join(format!("eargate_{}_folds.csv", modality.key()));
    write_table(&table_path, &[fold_rows], TableShape::Classification)
        .map_err(|e| stage_err("eargate", e))?;
    outcome.tables.push(table_path);

    // deployable checkpoint: fold 0 in final mode, best F1 otherwise
    let best = match mode {
        TrainMode::Final => &report.folds[0],
        TrainMode::CrossValidation => report
            .folds
            .iter()
            .max_by(|a, b| a.metrics.f1.partial_cmp(&b.metrics.f1).unwrap())
            .expect("at least one fold"),
    };
    let ckpt = cfg.checkpoint("eargate", modality)?.clone();
    save_classifier(&ckpt, &best.model).map_err(|e| stage_err("eargate", e))?;
    outcome.checkpoints.push(ckpt);
    outcome.summary.push(format!(
        "eargate {modality} [{label}]: accuracy {:.3} F1 {:.3} over {} fold(s), {} samples",
        report.folds.iter().map(|f| f.metrics.accuracy).sum::<f64>() / report.folds.len() as f64,
        report.folds.iter().map(|f| f.metrics.f1).sum::<f64>() / report.folds.len() as f64,
        report.folds.len(),
        samples.len(),
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// AuriBox
// ---------------------------------------------------------------------------

fn augment_preset(name: &str) -> AugmentConfig {
    match name {
        "none" => AugmentConfig {
            mosaic: false,
            perspective: false,
            scale_crop: false,
        },
        "light" => AugmentConfig {
            mosaic: false,
            perspective: false,
            scale_crop: true,
        },
        _ => AugmentConfig::default(),
    }
}

fn train_auribox(
    cfg: &PipelineConfig,
    mode: TrainMode,
    modality: Modality,
    outcome: &mut TrainOutcome,
) -> Result<(), PipelineError> {
    let profile = &cfg.train.auribox;
    let labels = load_labels(cfg)?;
    let mut samples: Vec<DetectorSample> = Vec::new();
    for ((pid, m), slice_labels) in &labels {
        if *m != modality {
            continue;
        }
        let volume = ingest_patient(cfg, pid, modality)?;
        let dir = cfg.data_root.join(modality.token()).join(pid);
        let ear: Vec<usize> = slice_labels
            .iter()
            .filter(|(_, l)| *l == 1)
            .map(|(k, _)| *k)
            .collect();
        let non_ear: Vec<usize> = slice_labels
            .iter()
            .filter(|(_, l)| *l == 0)
            .map(|(k, _)| *k)
            .collect();
        let negatives = evenly_spaced(&non_ear, profile.negatives_per_patient);
        for (&k, is_ear) in ear
            .iter()
            .map(|k| (k, true))
            .chain(negatives.iter().map(|k| (k, false)))
        {
            if k >= volume.n_slices() {
                continue;
            }
            let stem = standardize_filename(pid, modality, k);
            let stem = stem.trim_end_matches(".tif");
            let ann = dir.join(format!("{stem}.txt"));
            let boxes = read_yolo_file(&ann).map_err(|e| stage_err("auribox", e))?;
            if is_ear && boxes.is_empty() {
                // ear slice the annotators did not verify (structure too
                // faint): neither a positive nor a trustworthy negative
                continue;
            }
            samples.push(DetectorSample {
                patient_id: pid.clone(),
                image: volume.slice(k),
                boxes,
            });
        }
    }

    let det_cfg = DetectorConfig {
        conf_threshold: cfg.detector_conf_threshold,
        nms_iou: cfg.detector_nms_iou,
        lr: profile.lr,
        max_epochs: profile.max_epochs,
        folds: profile.folds.max(2),
        batch_size: profile.batch_size,
        input_size: profile.input_size,
        augment: augment_preset(&profile.augment),
        seed: derive_seed(cfg.seed, &[71, modality as u64]),
        limit_folds: match mode {
            TrainMode::CrossValidation => None,
            TrainMode::Final => Some(1),
        },
        ..Default::default()
    };
    let report =
        train_detector(&samples, &det_cfg, modality).map_err(|e| stage_err("auribox", e))?;

    let label = "compact_ssd".to_string();
    let fold_rows = FoldMetrics {
        stage: "auribox".into(),
        label: label.clone(),
        values: vec![
            (
                "map50".into(),
                report.folds.iter().map(|f| f.metrics.map).collect(),
            ),
            (
                "precision".into(),
                report.folds.iter().map(|f| f.metrics.precision).collect(),
            ),
            (
                "recall".into(),
                report.folds.iter().map(|f| f.metrics.recall).collect(),
            ),
        ],
    };
    let table_path = cfg
        .output_dir
        .join("reports")
        .join(format!("auribox_{}_folds.csv", modality.key()));
    write_table(&table_path, &[fold_rows], TableShape::Detection)
        .map_err(|e| stage_err("auribox", e))?;
    outcome.tables.push(table_path);

    let best = match mode {
        TrainMode::Final => &report.folds[0],
        TrainMode::CrossValidation => report
            .folds
            .iter()
            .max_by(|a, b| a.metrics.map.partial_cmp(&b.metrics.map).unwrap())
            .expect("at least one fold"),
    };
    let ckpt = cfg.checkpoint("auribox", modality)?.clone();
    save_detector(&ckpt, &best.model).map_err(|e| stage_err("auribox", e))?;
    outcome.checkpoints.push(ckpt);
    let acc = |side: Side| {
        let a = &best.side_accuracy[side.class_id()];
        format!("{side}: {:.1}% ({}/{})", 100.0 * a.accuracy(), a.tp, a.tp + a.missed)
    };
    outcome.summary.push(format!(
        "auribox {modality} [{label}]: mAP@0.5 {:.3}, {} , {}",
        report.folds.iter().map(|f| f.metrics.map).sum::<f64>() / report.folds.len() as f64,
        acc(Side::Left),
        acc(Side::Right),
    ));
    Ok(())
}

// ---------------------------------------------------------------------------
// EHMasker
// ---------------------------------------------------------------------------

fn train_ehmasker(
    cfg: &PipelineConfig,
    modality: Modality,
    outcome: &mut TrainOutcome,
) -> Result<(), PipelineError> {
    let profile = &cfg.train.ehmasker;
    let annotations = read_annotations_csv(&cfg.data_root.join("annotations.csv"))
        .map_err(|e| PipelineError::Config(format!("annotations.csv: {e}")))?;
    let centroids = crate::auribox::read_centroid_csv(&cfg.data_root.join("centroids.csv"))
        .map_err(|e| PipelineError::Config(format!("centroids.csv: {e}")))?;
    let centroid_of: BTreeMap<(String, Side), (f64, f64)> = centroids
        .into_iter()
        .map(|c| ((c.image_id, c.side), (c.x_px, c.y_px)))
        .collect();

    let mut volumes: BTreeMap<String, crate::data::Volume> = BTreeMap::new();
    let mut samples: Vec<SegSample> = Vec::new();
    for row in annotations.iter().filter(|r| r.modality == modality) {
        let volume = match volumes.get(&row.patient_id) {
            Some(v) => v,
            None => {
                let v = ingest_patient(cfg, &row.patient_id, modality)?;
                volumes.insert(row.patient_id.clone(), v);
                volumes.get(&row.patient_id).unwrap()
            }
        };
        if row.slice_index >= volume.n_slices() {
            return Err(stage_err(
                "ehmasker",
                format!("annotated slice {} out of range", row.slice_index),
            ));
        }
        let stem = standardize_filename(&row.patient_id, modality, row.slice_index);
        let stem = stem.trim_end_matches(".tif").to_string();
        let (cx, cy) = *centroid_of
            .get(&(stem.clone(), row.ear))
            .ok_or_else(|| stage_err("ehmasker", format!("{stem}: no centroid for {}", row.ear)))?;
        let slice = volume.slice(row.slice_index);
        let patch = extract_patch(&slice, (cx, cy), &row.patient_id, modality, row.slice_index, row.ear)
            .map_err(|e| stage_err("ehmasker", e))?;
        let mask_path = cfg
            .data_root
            .join(modality.token())
            .join(&row.patient_id)
            .join("masks")
            .join(format!("{stem}.png"));
        let full_mask = read_mask_png(&mask_path).map_err(|e| stage_err("ehmasker", e))?;
        let mask_f = full_mask.mapv(|v| v as f32);
        let (crop, _) = extract_patch_raw(&mask_f, (cx, cy), PATCH_SIZE)
            .map_err(|e| stage_err("ehmasker", e))?;
        samples.push(SegSample {
            patient_id: row.patient_id.clone(),
            slice_index: row.slice_index,
            side: row.ear,
            pixels: patch.pixels,
            mask: crop.mapv(|v| u8::from(v > 0.5)),
        });
    }

    let kind = LossKind::parse(&profile.loss)
        .ok_or_else(|| stage_err("ehmasker", format!("unknown loss {}", profile.loss)))?;
    let unet_cfg = UNetConfig {
        base_channels: profile.base_channels.max(1),
        ..Default::default()
    };
    let seg_cfg = SegTrainConfig {
        lr: profile.lr,
        batch_size: profile.batch_size,
        max_epochs: profile.max_epochs,
        loss: LossConfig::new(kind),
        seed: derive_seed(cfg.seed, &[72, modality as u64]),
        ..Default::default()
    };
    let report = train_segmenter(&samples, &unet_cfg, &seg_cfg, modality, &cfg.binarization)
        .map_err(|e| stage_err("ehmasker", e))?;

    let label = format!("unet+{}", profile.loss);
    let fold_rows = FoldMetrics {
        stage: "ehmasker".into(),
        label: label.clone(),
        values: vec![
            ("dsc".into(), vec![report.metrics.dsc]),
            ("iou".into(), vec![report.metrics.iou]),
            ("recall".into(), vec![report.metrics.recall]),
        ],
    };
    let table_path = cfg
        .output_dir
        .join("reports")
        .join(format!("ehmasker_{}_holdout.csv", modality.key()));
    write_table(&table_path, &[fold_rows], TableShape::SegAblation)
        .map_err(|e| stage_err("ehmasker", e))?;
    outcome.tables.push(table_path);

    let ckpt = cfg.checkpoint("ehmasker", modality)?.clone();
    save_unet(&ckpt, &report.model).map_err(|e| stage_err("ehmasker", e))?;
    outcome.checkpoints.push(ckpt);
    outcome.summary.push(format!(
        "ehmasker {modality} [{label}]: held-out DSC {:.3} IoU {:.3} recall {:.3} over {} patches ({} test patients)",
        report.metrics.dsc,
        report.metrics.iou,
        report.metrics.recall,
        samples.len(),
        report.test_patients.len(),
    ));
    Ok(())
}
