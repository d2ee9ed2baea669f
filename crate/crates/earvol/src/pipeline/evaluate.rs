//! Prediction-versus-ground-truth comparison: per-ear ELR errors, volume
//! agreement (VSI), and a static comparison chart.

use super::report::{read_ear_reports, EarReport};
use super::PipelineError;
use crate::auribox::Side;
use crate::phantom::{read_ground_truth_csv, GroundTruthRow};
use crate::volumetrics::vsi;
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ElrComparison {
    pub patient_id: String,
    pub ear: Side,
    pub elr_pred: Option<f64>,
    pub elr_true: f64,
    pub abs_error_pp: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub rows: Vec<ElrComparison>,
    /// Mean |ELR_pred − ELR_true| in percentage points over evaluable ears.
    pub mean_abs_elr_error_pp: f64,
    /// VSI of mean predicted vs mean true vestibular volume.
    pub vsi_vestibule: f64,
    /// VSI of mean predicted vs mean true endolymphatic volume.
    pub vsi_endolymph: f64,
    /// Mean of per-ear VSIs.
    pub per_ear_vsi_vestibule: f64,
    pub per_ear_vsi_endolymph: f64,
}

/// Compare a run-report CSV against a ground-truth CSV, emitting
/// `elr_comparison.csv`, `vsi_table.csv`, and `elr_comparison.png` under
/// `<out_dir>/reports/`.
pub fn cmd_evaluate(
    pred_csv: &Path,
    gt_csv: &Path,
    out_dir: &Path,
) -> Result<EvalSummary, PipelineError> {
    let preds = read_ear_reports(pred_csv)?;
    let gt = read_ground_truth_csv(gt_csv)
        .map_err(|e| PipelineError::Config(format!("ground truth: {e}")))?;
    let summary = evaluate_reports(&preds, &gt)?;

    let reports_dir = out_dir.join("reports");
    fs::create_dir_all(&reports_dir)?;
    write_elr_comparison(&reports_dir.join("elr_comparison.csv"), &summary.rows)?;
    write_vsi_table(&reports_dir.join("vsi_table.csv"), &summary)?;
    let plot = render_elr_chart(&summary.rows);
    plot.save(reports_dir.join("elr_comparison.png"))
        .map_err(|e| PipelineError::Config(format!("plot save failed: {e}")))?;
    Ok(summary)
}

/// Pure comparison core (no file output).
pub fn evaluate_reports(
    preds: &[EarReport],
    gt: &[GroundTruthRow],
) -> Result<EvalSummary, PipelineError> {
    let find_gt = |pid: &str, ear: Side| -> Option<&GroundTruthRow> {
        gt.iter().find(|g| g.patient_id == pid && g.ear == ear)
    };
    let mut rows = Vec::with_capacity(preds.len());
    let mut err_sum = 0.0;
    let mut err_n = 0usize;
    let mut vest_pred = Vec::new();
    let mut vest_true = Vec::new();
    let mut endo_pred = Vec::new();
    let mut endo_true = Vec::new();
    let mut per_ear_vsi_v = Vec::new();
    let mut per_ear_vsi_e = Vec::new();
    for p in preds {
        let g = find_gt(&p.patient_id, p.ear).ok_or_else(|| {
            PipelineError::IdMismatch(format!(
                "{} {} has no ground-truth row",
                p.patient_id, p.ear
            ))
        })?;
        let abs_error_pp = p.elr_percent.map(|e| (e - g.elr_percent).abs());
        if let Some(err) = abs_error_pp {
            err_sum += err;
            err_n += 1;
        }
        if let Some(v) = p.v_vestibule_mm3 {
            vest_pred.push(v);
            vest_true.push(g.v_vest_mm3);
            per_ear_vsi_v.push(vsi(v, g.v_vest_mm3));
        }
        if let Some(e) = p.v_endolymph_mm3 {
            endo_pred.push(e);
            endo_true.push(g.v_endo_mm3);
            per_ear_vsi_e.push(vsi(e, g.v_endo_mm3));
        }
        rows.push(ElrComparison {
            patient_id: p.patient_id.clone(),
            ear: p.ear,
            elr_pred: p.elr_percent,
            elr_true: g.elr_percent,
            abs_error_pp,
        });
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(EvalSummary {
        mean_abs_elr_error_pp: if err_n > 0 { err_sum / err_n as f64 } else { f64::NAN },
        vsi_vestibule: vsi(mean(&vest_pred), mean(&vest_true)),
        vsi_endolymph: vsi(mean(&endo_pred), mean(&endo_true)),
        per_ear_vsi_vestibule: mean(&per_ear_vsi_v),
        per_ear_vsi_endolymph: mean(&per_ear_vsi_e),
        rows,
    })
}

fn write_elr_comparison(path: &Path, rows: &[ElrComparison]) -> Result<(), PipelineError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "patient_id,ear,elr_pred,elr_true,abs_error_pp")?;
    for r in rows {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        writeln!(
            f,
            "{},{},{},{:.4},{}",
            r.patient_id,
            r.ear,
            fmt(r.elr_pred),
            r.elr_true,
            fmt(r.abs_error_pp)
        )?;
    }
    Ok(())
}

fn write_vsi_table(path: &Path, s: &EvalSummary) -> Result<(), PipelineError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "structure,vsi_of_means_percent,mean_per_ear_vsi_percent")?;
    writeln!(
        f,
        "vestibule,{:.4},{:.4}",
        s.vsi_vestibule, s.per_ear_vsi_vestibule
    )?;
    writeln!(
        f,
        "endolymph,{:.4},{:.4}",
        s.vsi_endolymph, s.per_ear_vsi_endolymph
    )?;
    Ok(())
}

/// Grouped per-ear bar chart: predicted (blue) vs true (orange) ELR.
/// Axis lines only; the CSV carries the labels.
fn render_elr_chart(rows: &[ElrComparison]) -> image::RgbImage {
    const H: u32 = 240;
    const MARGIN: u32 = 20;
    let groups = rows.len().max(1) as u32;
    let group_w = 14u32;
    let w = MARGIN * 2 + groups * group_w + 10;
    let mut img = image::RgbImage::from_pixel(w, H, image::Rgb([255, 255, 255]));
    let max_val = rows
        .iter()
        .flat_map(|r| [r.elr_pred.unwrap_or(0.0), r.elr_true])
        .fold(10.0f64, f64::max);
    let y_of = |v: f64| {
        let frac = (v / max_val).clamp(0.0, 1.0);
        H - MARGIN - (frac * (H - 2 * MARGIN) as f64) as u32
    };
    // axes
    for y in MARGIN..=(H - MARGIN) {
        img.put_pixel(MARGIN - 1, y, image::Rgb([0, 0, 0]));
    }
    for x in (MARGIN - 1)..(w - 5) {
        img.put_pixel(x, H - MARGIN, image::Rgb([0, 0, 0]));
    }
    for (gi, r) in rows.iter().enumerate() {
        let x0 = MARGIN + gi as u32 * group_w + 2;
        if let Some(pred) = r.elr_pred {
            fill_bar(&mut img, x0, y_of(pred), H - MARGIN, 5, [66, 103, 210]);
        }
        fill_bar(&mut img, x0 + 6, y_of(r.elr_true), H - MARGIN, 5, [230, 140, 30]);
    }
    img
}

fn fill_bar(img: &mut image::RgbImage, x0: u32, y_top: u32, y_base: u32, width: u32, c: [u8; 3]) {
    for x in x0..(x0 + width).min(img.width()) {
        for y in y_top..=y_base.min(img.height() - 1) {
            img.put_pixel(x, y, image::Rgb(c));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::GroundTruthRow;

    fn gt_row(pid: &str, ear: Side, v: f64, e: f64) -> GroundTruthRow {
        GroundTruthRow {
            patient_id: pid.into(),
            ear,
            v_vest_mm3: v,
            v_endo_mm3: e,
            elr_percent: 100.0 * e / v,
        }
    }

    fn pred_row(pid: &str, ear: Side, v: f64, e: f64) -> EarReport {
        EarReport {
            patient_id: pid.into(),
            ear,
            v_vestibule_mm3: Some(v),
            v_endolymph_mm3: Some(e),
            elr_percent: Some(100.0 * e / v),
            n_slices: 10,
            warnings: vec![],
        }
    }

    #[test]
    fn perfect_predictions_score_perfectly() {
        let gt = vec![
            gt_row("P0", Side::Left, 80.0, 20.0),
            gt_row("P0", Side::Right, 90.0, 18.0),
        ];
        let preds = vec![
            pred_row("P0", Side::Left, 80.0, 20.0),
            pred_row("P0", Side::Right, 90.0, 18.0),
        ];
        let s = evaluate_reports(&preds, &gt).unwrap();
        assert_eq!(s.mean_abs_elr_error_pp, 0.0);
        assert_eq!(s.vsi_vestibule, 100.0);
        assert_eq!(s.vsi_endolymph, 100.0);
        assert_eq!(s.per_ear_vsi_vestibule, 100.0);
    }

    #[test]
    fn unknown_ids_are_rejected() {
        let gt = vec![gt_row("P0", Side::Left, 80.0, 20.0)];
        let preds = vec![pred_row("P1", Side::Left, 80.0, 20.0)];
        assert!(matches!(
            evaluate_reports(&preds, &gt),
            Err(PipelineError::IdMismatch(_))
        ));
    }

    #[test]
    fn elr_error_and_vsi_are_computed() {
        let gt = vec![gt_row("P0", Side::Left, 100.0, 25.0)]; // ELR 25
        let preds = vec![pred_row("P0", Side::Left, 90.0, 27.0)]; // ELR 30
        let s = evaluate_reports(&preds, &gt).unwrap();
        assert!((s.mean_abs_elr_error_pp - 5.0).abs() < 1e-9);
        assert!((s.vsi_vestibule - vsi(90.0, 100.0)).abs() < 1e-12);
        assert!(s.vsi_vestibule >= 0.0 && s.vsi_vestibule <= 100.0);
    }

    #[test]
    fn missing_predictions_are_skipped_in_the_mean() {
        let gt = vec![
            gt_row("P0", Side::Left, 100.0, 25.0),
            gt_row("P0", Side::Right, 100.0, 25.0),
        ];
        let mut no_pred = EarReport::empty("P0", Side::Right);
        no_pred.warnings.push("no ear detected".into());
        let preds = vec![pred_row("P0", Side::Left, 100.0, 25.0), no_pred];
        let s = evaluate_reports(&preds, &gt).unwrap();
        assert_eq!(s.mean_abs_elr_error_pp, 0.0);
        assert_eq!(s.rows[1].abs_error_pp, None);
    }

    #[test]
    fn files_are_emitted() {
        let dir = tempfile::tempdir().unwrap();
        let gt_path = dir.path().join("gt.csv");
        crate::phantom::write_ground_truth_csv(
            &gt_path,
            &[gt_row("P0", Side::Left, 80.0, 16.0)],
        )
        .unwrap();
        let pred_path = dir.path().join("pred.csv");
        super::super::report::write_ear_reports(
            &pred_path,
            &[pred_row("P0", Side::Left, 82.0, 15.0)],
        )
        .unwrap();
        let out = dir.path().join("out");
        let s = cmd_evaluate(&pred_path, &gt_path, &out).unwrap();
        assert!(out.join("reports/elr_comparison.csv").exists());
        assert!(out.join("reports/vsi_table.csv").exists());
        assert!(out.join("reports/elr_comparison.png").exists());
        assert!(s.mean_abs_elr_error_pp < 2.0);
    }
}
