//! The fully automatic inference path.

use super::config::PipelineConfig;
use super::overlay::draw_overlay;
use super::report::{EarReport, RunReport, StageTiming};
use super::PipelineError;
use crate::auribox::{detect_ears, load_detector, CompactDetector, DetectorConfig, NormalizedBox, Side};
use crate::data::{ingest_stack, Modality, Volume};
use crate::eargate::{classify_volume, load_classifier, smooth_labels, Classifier, LabelSequence};
use crate::ehmasker::{extract_patch, load_unet, segment_patch, UNet};
use crate::par;
use crate::volumetrics::{assemble_mask_volume, mask_volume_mm3, postprocess_3d, PatchMask};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

struct Models {
    eargate: BTreeMap<Modality, Classifier>,
    auribox: BTreeMap<Modality, CompactDetector>,
    ehmasker: BTreeMap<Modality, UNet>,
}

fn load_models(cfg: &PipelineConfig) -> Result<Models, PipelineError> {
    let mut eargate = BTreeMap::new();
    let mut auribox = BTreeMap::new();
    let mut ehmasker = BTreeMap::new();
    for modality in Modality::ALL {
        let gate_path = cfg.checkpoint("eargate", modality)?;
        let det_path = cfg.checkpoint("auribox", modality)?;
        let seg_path = cfg.checkpoint("ehmasker", modality)?;
        for p in [gate_path, det_path, seg_path] {
            if !p.exists() {
                return Err(PipelineError::Config(format!(
                    "checkpoint {} does not exist",
                    p.display()
                )));
            }
        }
        eargate.insert(
            modality,
            load_classifier(gate_path)
                .map_err(|e| PipelineError::Config(format!("eargate checkpoint: {e}")))?,
        );
        auribox.insert(
            modality,
            load_detector(det_path)
                .map_err(|e| PipelineError::Config(format!("auribox checkpoint: {e}")))?,
        );
        ehmasker.insert(
            modality,
            load_unet(seg_path)
                .map_err(|e| PipelineError::Config(format!("ehmasker checkpoint: {e}")))?,
        );
    }
    Ok(Models {
        eargate,
        auribox,
        ehmasker,
    })
}

/// Patients found under `<root>/<MODALITY>/<patient>`, with per-modality
/// presence.
pub(crate) fn discover_patients(
    root: &Path,
) -> Result<BTreeMap<String, [bool; 2]>, PipelineError> {
    let mut out: BTreeMap<String, [bool; 2]> = BTreeMap::new();
    let mut any = false;
    for (mi, modality) in Modality::ALL.iter().enumerate() {
        let dir = root.join(modality.token());
        if !dir.is_dir() {
            continue;
        }
        any = true;
        for entry in std::fs::read_dir(&dir)? {
            let entry = entry?;
            if entry.path().is_dir() {
                let pid = entry.file_name().to_string_lossy().into_owned();
                out.entry(pid).or_insert([false; 2])[mi] = true;
            }
        }
    }
    if !any {
        return Err(PipelineError::Config(format!(
            "no modality folders under {}",
            root.display()
        )));
    }
    Ok(out)
}

/// Per-(modality, side) outcome of the segmentation chain.
struct SideOutcome {
    volume_mm3: Option<f64>,
    contributing_slices: usize,
    warnings: Vec<String>,
}

struct PatientTimings {
    ingest: f64,
    classify: f64,
    detect: f64,
    segment: f64,
    volumetrics: f64,
}

/// Run the full pipeline over every patient under the data root.
///
/// Failures inside a patient degrade to warnings on that patient's rows;
/// only startup problems (missing checkpoints, unreadable root) abort.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    cfg.binarization
        .validate()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let models = load_models(cfg)?;
    let patients = discover_patients(&cfg.data_root)?;
    let patient_list: Vec<(String, [bool; 2])> = patients.into_iter().collect();

    let det_cfg = DetectorConfig {
        conf_threshold: cfg.detector_conf_threshold,
        nms_iou: cfg.detector_nms_iou,
        ..Default::default()
    };

    let wall = Instant::now();
    let outcomes = par::with_thread_limit(cfg.parallelism, || {
        par::map_batch(&patient_list, |(pid, present)| {
            process_patient(pid, *present, cfg, &models, &det_cfg)
        })
    });

    let mut reports = Vec::with_capacity(outcomes.len() * 2);
    let mut totals = PatientTimings {
        ingest: 0.0,
        classify: 0.0,
        detect: 0.0,
        segment: 0.0,
        volumetrics: 0.0,
    };
    for (rows, t) in outcomes {
        reports.extend(rows);
        totals.ingest += t.ingest;
        totals.classify += t.classify;
        totals.detect += t.detect;
        totals.segment += t.segment;
        totals.volumetrics += t.volumetrics;
    }

    let timings = vec![
        StageTiming {
            stage: "ingest".into(),
            seconds: totals.ingest,
        },
        StageTiming {
            stage: "eargate".into(),
            seconds: totals.classify,
        },
        StageTiming {
            stage: "auribox".into(),
            seconds: totals.detect,
        },
        StageTiming {
            stage: "ehmasker".into(),
            seconds: totals.segment,
        },
        StageTiming {
            stage: "volumetrics".into(),
            seconds: totals.volumetrics,
        },
        StageTiming {
            stage: "wall".into(),
            seconds: wall.elapsed().as_secs_f64(),
        },
    ];

    let report = RunReport { reports, timings };
    let csv_path = cfg.output_dir.join("reports").join("ear_reports.csv");
    super::report::write_ear_reports(&csv_path, &report.reports)?;
    Ok(report)
}

fn process_patient(
    pid: &str,
    present: [bool; 2],
    cfg: &PipelineConfig,
    models: &Models,
    det_cfg: &DetectorConfig,
) -> (Vec<EarReport>, PatientTimings) {
    let mut timings = PatientTimings {
        ingest: 0.0,
        classify: 0.0,
        detect: 0.0,
        segment: 0.0,
        volumetrics: 0.0,
    };
    let mut shared_warnings: Vec<String> = Vec::new();
    // per modality, per side
    let mut outcomes: BTreeMap<Modality, [SideOutcome; 2]> = BTreeMap::new();

    for (mi, modality) in Modality::ALL.iter().enumerate() {
        if !present[mi] {
            shared_warnings.push(format!("missing {modality} stack"));
            continue;
        }
        match process_modality(pid, *modality, cfg, models, det_cfg, &mut timings) {
            Ok(sides) => {
                outcomes.insert(*modality, sides);
            }
            Err(msg) => shared_warnings.push(msg),
        }
    }

    let t = Instant::now();
    let mut rows = Vec::with_capacity(2);
    for side in Side::BOTH {
        let mut report = EarReport::empty(pid, side);
        report.warnings.extend(shared_warnings.clone());
        let mut n_slices = 0usize;
        let vest = outcomes.get(&Modality::SpaceMrc).map(|s| &s[side.class_id()]);
        let endo = outcomes.get(&Modality::RealIr).map(|s| &s[side.class_id()]);
        if let Some(v) = vest {
            report.warnings.extend(v.warnings.clone());
            report.v_vestibule_mm3 = v.volume_mm3;
            n_slices += v.contributing_slices;
        }
        if let Some(e) = endo {
            report.warnings.extend(e.warnings.clone());
            report.v_endolymph_mm3 = e.volume_mm3;
            n_slices += e.contributing_slices;
        }
        report.n_slices = n_slices;
        match (report.v_endolymph_mm3, report.v_vestibule_mm3) {
            (Some(e), Some(v)) if v > 0.0 => {
                let ratio = 100.0 * e / v;
                if ratio > 100.0 {
                    report
                        .warnings
                        .push(format!("implausible ELR {ratio:.1}% exceeds 100%"));
                }
                report.elr_percent = Some(ratio);
            }
            (Some(_), Some(_)) => {
                report
                    .warnings
                    .push("vestibular volume is zero, ELR undefined".into());
            }
            _ => {}
        }
        rows.push(report);
    }
    timings.volumetrics += t.elapsed().as_secs_f64();
    (rows, timings)
}

/// Classify, detect, segment, and assemble one modality; returns per-side
/// outcomes. Errors are stringly-typed: the caller downgrades them to
/// warnings.
fn process_modality(
    pid: &str,
    modality: Modality,
    cfg: &PipelineConfig,
    models: &Models,
    det_cfg: &DetectorConfig,
    timings: &mut PatientTimings,
) -> Result<[SideOutcome; 2], String> {
    let dir = cfg.data_root.join(modality.token()).join(pid);
    let t = Instant::now();
    let ingested =
        ingest_stack(&dir).map_err(|e| format!("{modality} ingest failed: {e}"))?;
    let mut volume = ingested.volume;
    volume.patient_id = pid.to_string();
    volume.modality = modality;
    if let Some(sp) = cfg.spacing(modality) {
        volume.spacing_mm = sp;
    }
    timings.ingest += t.elapsed().as_secs_f64();
    let mut warnings_shared: Vec<String> = Vec::new();
    if !ingested.gaps.is_empty() {
        warnings_shared.push(format!(
            "{modality}: skipped unreadable frames at {:?}",
            ingested.gaps
        ));
    }

    let gate = models.eargate.get(&modality).expect("model per modality");
    let t = Instant::now();
    let raw = classify_volume(gate, &volume)
        .map_err(|e| format!("{modality} slice gating failed: {e}"))?;
    let smoothed = LabelSequence(smooth_labels(&raw.0));
    timings.classify += t.elapsed().as_secs_f64();

    let Some((start, end)) = smoothed.ear_segment() else {
        let make = |side: Side| SideOutcome {
            volume_mm3: None,
            contributing_slices: 0,
            warnings: {
                let mut w = warnings_shared.clone();
                w.push(format!("no ear detected ({modality})"));
                let _ = side;
                w
            },
        };
        return Ok([make(Side::Left), make(Side::Right)]);
    };

    let detector = models.auribox.get(&modality).expect("model per modality");
    let segmenter = models.ehmasker.get(&modality).expect("model per modality");
    let (rows, cols) = volume.slice_shape();
    let mut patches: [Vec<PatchMask>; 2] = [Vec::new(), Vec::new()];
    let mut kept_boxes: BTreeMap<usize, Vec<NormalizedBox>> = BTreeMap::new();

    for k in start..end {
        let slice = volume.slice(k);
        let t = Instant::now();
        let dets = detect_ears(detector, &slice, det_cfg);
        timings.detect += t.elapsed().as_secs_f64();
        let t = Instant::now();
        for det in &dets {
            let (cx, cy) = det.center_px(cols, rows);
            let patch = match extract_patch(&slice, (cx, cy), pid, modality, k, det.side) {
                Ok(p) => p,
                Err(e) => {
                    warnings_shared
                        .push(format!("{modality} slice {k}: patch extraction failed: {e}"));
                    continue;
                }
            };
            match segment_patch(segmenter, &patch, &cfg.binarization) {
                Ok(mask) => patches[det.side.class_id()].push(PatchMask {
                    slice_index: k,
                    mask,
                    crop_origin: patch.crop_origin,
                }),
                Err(e) => warnings_shared
                    .push(format!("{modality} slice {k}: segmentation failed: {e}")),
            }
        }
        timings.segment += t.elapsed().as_secs_f64();
        kept_boxes.insert(k, dets);
    }

    if cfg.overlays {
        if let Err(e) = emit_overlays(cfg, pid, modality, &volume, (start, end), &kept_boxes, &patches)
        {
            warnings_shared.push(format!("{modality}: overlay emission failed: {e}"));
        }
    }

    let t = Instant::now();
    let spacing = volume.spacing_mm;
    let out = [Side::Left, Side::Right].map(|side| {
        let mut warnings = warnings_shared.clone();
        let side_patches = &patches[side.class_id()];
        match assemble_mask_volume(side_patches, (start, end), (rows, cols), spacing, side) {
            Ok((assembled, assembly_warnings)) => {
                warnings.extend(assembly_warnings);
                let (cleaned, post_warnings) = postprocess_3d(&assembled);
                warnings.extend(post_warnings);
                let contributing = (0..cleaned.voxels.shape()[0])
                    .filter(|&z| {
                        cleaned
                            .voxels
                            .index_axis(ndarray::Axis(0), z)
                            .iter()
                            .any(|&v| v == 1)
                    })
                    .count();
                SideOutcome {
                    volume_mm3: Some(mask_volume_mm3(&cleaned)),
                    contributing_slices: contributing,
                    warnings,
                }
            }
            Err(e) => {
                warnings.push(format!("{modality} {side}: mask assembly failed: {e}"));
                SideOutcome {
                    volume_mm3: None,
                    contributing_slices: 0,
                    warnings,
                }
            }
        }
    });
    timings.volumetrics += t.elapsed().as_secs_f64();
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn emit_overlays(
    cfg: &PipelineConfig,
    pid: &str,
    modality: Modality,
    volume: &Volume,
    segment: (usize, usize),
    boxes: &BTreeMap<usize, Vec<NormalizedBox>>,
    patches: &[Vec<PatchMask>; 2],
) -> Result<(), PipelineError> {
    let dir: PathBuf = cfg
        .output_dir
        .join("overlays")
        .join(modality.token())
        .join(pid);
    std::fs::create_dir_all(&dir)?;
    let (rows, cols) = volume.slice_shape();
    for k in segment.0..segment.1 {
        // paste this slice's patch masks into a canvas for the contour overlay
        let mut canvas = ndarray::Array2::<u8>::zeros((rows, cols));
        for side_patches in patches.iter() {
            for p in side_patches.iter().filter(|p| p.slice_index == k) {
                for ((i, j), &v) in p.mask.indexed_iter() {
                    if v == 0 {
                        continue;
                    }
                    let r = p.crop_origin.0 + i as isize;
                    let c = p.crop_origin.1 + j as isize;
                    if r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols {
                        canvas[[r as usize, c as usize]] = 1;
                    }
                }
            }
        }
        let slice = volume.slice(k);
        let empty = Vec::new();
        let slice_boxes = boxes.get(&k).unwrap_or(&empty);
        let img = draw_overlay(&slice, slice_boxes, Some(&canvas));
        let stem = crate::data::standardize_filename(pid, modality, k);
        let stem = stem.trim_end_matches(".tif");
        img.save(dir.join(format!("{stem}.png")))
            .map_err(|e| PipelineError::Config(format!("overlay save failed: {e}")))?;
    }
    Ok(())
}
