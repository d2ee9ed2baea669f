//! Cross-cutting metric aggregation and CSV report tables.
//!
//! Training harnesses hand their per-fold values to [`FoldMetrics`]; the
//! table emitter recomputes mean ± sample SD from the stored fold values
//! (never trusting pre-aggregated numbers) and marks the best configuration
//! per metric column with a `best` boolean.

use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvaluationError {
    #[error("no values to aggregate")]
    EmptyInput,
    #[error("table rows mix stages: {0} vs {1}")]
    StageMismatch(String, String),
    #[error("metric columns differ between rows: {0:?} vs {1:?}")]
    ColumnMismatch(Vec<String>, Vec<String>),
    #[error("csv parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(String),
}

/// Arithmetic mean and sample standard deviation (n−1 denominator; a single
/// value has SD 0).
pub fn aggregate_folds(values: &[f64]) -> Result<(f64, f64), EvaluationError> {
    if values.is_empty() {
        return Err(EvaluationError::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Table layout, mirroring the result-table families of the study design.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableShape {
    Classification,
    Detection,
    SegLoss,
    SegAblation,
    Threshold,
    Elr,
    Vsi,
}

impl TableShape {
    pub fn tag(&self) -> &'static str {
        match self {
            TableShape::Classification => "classification",
            TableShape::Detection => "detection",
            TableShape::SegLoss => "seg_loss",
            TableShape::SegAblation => "seg_ablation",
            TableShape::Threshold => "threshold",
            TableShape::Elr => "elr",
            TableShape::Vsi => "vsi",
        }
    }

    /// Metric columns in fixed order, with their optimization direction
    /// (true = higher is better).
    pub fn columns(&self) -> &'static [(&'static str, bool)] {
        match self {
            TableShape::Classification => &[
                ("accuracy", true),
                ("f1", true),
                ("precision", true),
                ("recall", true),
            ],
            TableShape::Detection => &[
                ("map50", true),
                ("precision", true),
                ("recall", true),
            ],
            TableShape::SegLoss => &[
                ("dsc", true),
                ("iou", true),
                ("recall", true),
                ("loss", false),
            ],
            TableShape::SegAblation => &[("dsc", true), ("iou", true), ("recall", true)],
            TableShape::Threshold => &[("dsc", true), ("iou", true), ("recall", true)],
            TableShape::Elr => &[("elr_percent", true), ("abs_error_pp", false)],
            TableShape::Vsi => &[("vsi_percent", true)],
        }
    }
}

/// Per-fold values of every metric for one configuration row.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldMetrics {
    pub stage: String,
    /// Configuration label (loss name, variant, threshold, …).
    pub label: String,
    /// Metric name → one value per fold. Order must match the shape columns.
    pub values: Vec<(String, Vec<f64>)>,
}

impl FoldMetrics {
    pub fn metric(&self, name: &str) -> Option<&[f64]> {
        self.values
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }
}

/// Render rows into a deterministic CSV:
///
/// ```text
/// stage,label,metric,fold1,...,foldK,mean,sd,best
/// ```
///
/// Mean/SD are recomputed from the fold values; `best` is true on exactly
/// one row per metric (ties resolve to the earliest row).
pub fn emit_table(rows: &[FoldMetrics], shape: TableShape) -> Result<String, EvaluationError> {
    if rows.is_empty() {
        return Err(EvaluationError::EmptyInput);
    }
    let stage = &rows[0].stage;
    for r in rows {
        if &r.stage != stage {
            return Err(EvaluationError::StageMismatch(stage.clone(), r.stage.clone()));
        }
    }
    let columns = shape.columns();
    let expected: Vec<String> = columns.iter().map(|(n, _)| n.to_string()).collect();
    for r in rows {
        let got: Vec<String> = r.values.iter().map(|(n, _)| n.clone()).collect();
        if got != expected {
            return Err(EvaluationError::ColumnMismatch(expected, got));
        }
    }
    let k = rows[0].values[0].1.len();
    for r in rows {
        for (name, v) in &r.values {
            if v.len() != k {
                return Err(EvaluationError::Parse {
                    line: 0,
                    msg: format!("{name} has {} folds, expected {k}", v.len()),
                });
            }
        }
    }

    // best row per metric by mean
    let mut best_of: Vec<usize> = Vec::with_capacity(columns.len());
    for (ci, (name, higher)) in columns.iter().enumerate() {
        let _ = name;
        let mut best_row = 0usize;
        let mut best_val = f64::NAN;
        for (ri, r) in rows.iter().enumerate() {
            let (mean, _) = aggregate_folds(&r.values[ci].1)?;
            let better = if best_val.is_nan() {
                true
            } else if *higher {
                mean > best_val
            } else {
                mean < best_val
            };
            if better {
                best_val = mean;
                best_row = ri;
            }
        }
        best_of.push(best_row);
    }

    let mut out = String::new();
    out.push_str("stage,label,metric");
    for f in 1..=k {
        out.push_str(&format!(",fold{f}"));
    }
    out.push_str(",mean,sd,best\n");
    for (ri, r) in rows.iter().enumerate() {
        for (ci, (name, _)) in columns.iter().enumerate() {
            let folds = &r.values[ci].1;
            let (mean, sd) = aggregate_folds(folds)?;
            out.push_str(&format!("{},{},{}", r.stage, r.label, name));
            for v in folds {
                out.push_str(&format!(",{v:.6}"));
            }
            let best = best_of[ci] == ri;
            out.push_str(&format!(",{mean:.6},{sd:.6},{best}\n"));
        }
    }
    Ok(out)
}

/// Parse a table emitted by [`emit_table`] back into rows; mean/SD columns
/// are validated against the fold values rather than trusted.
pub fn parse_table(text: &str) -> Result<Vec<FoldMetrics>, EvaluationError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(EvaluationError::EmptyInput)?;
    let head: Vec<&str> = header.split(',').collect();
    if head.len() < 6 || head[0] != "stage" || head[1] != "label" || head[2] != "metric" {
        return Err(EvaluationError::Parse {
            line: 1,
            msg: "unexpected header".into(),
        });
    }
    let k = head.len() - 6;
    let mut rows: Vec<FoldMetrics> = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != head.len() {
            return Err(EvaluationError::Parse {
                line: lineno + 1,
                msg: format!("expected {} fields, got {}", head.len(), fields.len()),
            });
        }
        let parse_f = |s: &str, lineno: usize| {
            s.parse::<f64>().map_err(|_| EvaluationError::Parse {
                line: lineno + 1,
                msg: format!("bad number {s}"),
            })
        };
        let folds: Vec<f64> = fields[3..3 + k]
            .iter()
            .map(|s| parse_f(s, lineno))
            .collect::<Result<_, _>>()?;
        let (mean, sd) = aggregate_folds(&folds)?;
        let file_mean = parse_f(fields[3 + k], lineno)?;
        let file_sd = parse_f(fields[4 + k], lineno)?;
        if (mean - file_mean).abs() > 5e-6 || (sd - file_sd).abs() > 5e-6 {
            return Err(EvaluationError::Parse {
                line: lineno + 1,
                msg: "stored mean/sd disagree with fold values".into(),
            });
        }
        let stage = fields[0].to_string();
        let label = fields[1].to_string();
        let metric = fields[2].to_string();
        match rows.last_mut() {
            Some(last) if last.stage == stage && last.label == label => {
                last.values.push((metric, folds));
            }
            _ => rows.push(FoldMetrics {
                stage,
                label,
                values: vec![(metric, folds)],
            }),
        }
    }
    Ok(rows)
}

/// Write an emitted table to disk.
pub fn write_table(
    path: &Path,
    rows: &[FoldMetrics],
    shape: TableShape,
) -> Result<(), EvaluationError> {
    let text = emit_table(rows, shape)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| EvaluationError::Io(e.to_string()))?;
    }
    let mut f = fs::File::create(path).map_err(|e| EvaluationError::Io(e.to_string()))?;
    f.write_all(text.as_bytes())
        .map_err(|e| EvaluationError::Io(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: &str, dsc: Vec<f64>, iou: Vec<f64>, rec: Vec<f64>) -> FoldMetrics {
        FoldMetrics {
            stage: "ehmasker".into(),
            label: label.into(),
            values: vec![
                ("dsc".into(), dsc),
                ("iou".into(), iou),
                ("recall".into(), rec),
            ],
        }
    }

    #[test]
    fn aggregate_hand_cases() {
        assert_eq!(aggregate_folds(&[0.9, 0.9, 0.9]).unwrap(), (0.9, 0.0));
        let (mean, sd) = aggregate_folds(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(mean, 3.0);
        assert!((sd - 1.5811).abs() < 1e-4);
        assert_eq!(aggregate_folds(&[0.7]).unwrap(), (0.7, 0.0));
        assert_eq!(aggregate_folds(&[]), Err(EvaluationError::EmptyInput));
    }

    #[test]
    fn aggregate_is_permutation_invariant_and_sd_nonnegative() {
        let a = aggregate_folds(&[0.3, 0.9, 0.5, 0.7]).unwrap();
        let b = aggregate_folds(&[0.9, 0.7, 0.3, 0.5]).unwrap();
        assert!((a.0 - b.0).abs() < 1e-15);
        assert!((a.1 - b.1).abs() < 1e-15);
        assert!(a.1 >= 0.0);
        // SD is zero iff all values are equal
        assert_eq!(aggregate_folds(&[0.4, 0.4]).unwrap().1, 0.0);
        assert!(aggregate_folds(&[0.4, 0.5]).unwrap().1 > 0.0);
    }

    #[test]
    fn best_marking_is_exactly_one_per_metric() {
        let rows = vec![
            row("bce", vec![0.1, 0.2], vec![0.05, 0.1], vec![0.2, 0.2]),
            row("bce_dice", vec![0.85, 0.87], vec![0.7, 0.75], vec![0.8, 0.9]),
        ];
        let text = emit_table(&rows, TableShape::SegAblation).unwrap();
        let best_lines: Vec<&str> = text.lines().filter(|l| l.ends_with(",true")).collect();
        assert_eq!(best_lines.len(), 3); // one per metric column
        for l in &best_lines {
            assert!(l.contains("bce_dice"));
        }
    }

    #[test]
    fn loss_column_prefers_smaller_values() {
        let rows = vec![
            FoldMetrics {
                stage: "ehmasker".into(),
                label: "a".into(),
                values: vec![
                    ("dsc".into(), vec![0.5]),
                    ("iou".into(), vec![0.4]),
                    ("recall".into(), vec![0.5]),
                    ("loss".into(), vec![0.9]),
                ],
            },
            FoldMetrics {
                stage: "ehmasker".into(),
                label: "b".into(),
                values: vec![
                    ("dsc".into(), vec![0.4]),
                    ("iou".into(), vec![0.3]),
                    ("recall".into(), vec![0.4]),
                    ("loss".into(), vec![0.2]),
                ],
            },
        ];
        let text = emit_table(&rows, TableShape::SegLoss).unwrap();
        let loss_best: Vec<&str> = text
            .lines()
            .filter(|l| l.contains(",loss,") && l.ends_with(",true"))
            .collect();
        assert_eq!(loss_best.len(), 1);
        assert!(loss_best[0].starts_with("ehmasker,b"));
    }

    #[test]
    fn emit_parse_roundtrip() {
        let rows = vec![
            row("dice", vec![0.84, 0.86, 0.85], vec![0.74, 0.76, 0.75], vec![0.8, 0.9, 0.85]),
            row("tversky", vec![0.82, 0.83, 0.84], vec![0.71, 0.72, 0.73], vec![0.7, 0.8, 0.9]),
        ];
        let text = emit_table(&rows, TableShape::SegAblation).unwrap();
        let parsed = parse_table(&text).unwrap();
        assert_eq!(parsed, rows);
    }

    #[test]
    fn threshold_table_reproduces_row_structure() {
        // five thresholds, metric columns (dsc, iou, recall) per row
        let rows: Vec<FoldMetrics> = [0.5, 0.7, 0.9, 0.95, 0.98]
            .iter()
            .map(|t| {
                FoldMetrics {
                    stage: "ehmasker".into(),
                    label: format!("th={t}"),
                    values: vec![
                        ("dsc".into(), vec![0.9, 0.91]),
                        ("iou".into(), vec![0.82, 0.83]),
                        ("recall".into(), vec![0.92, 0.9]),
                    ],
                }
            })
            .collect();
        let text = emit_table(&rows, TableShape::Threshold).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 5 * 3);
        assert!(lines[0].starts_with("stage,label,metric,fold1,fold2,mean,sd,best"));
        for t in ["th=0.5", "th=0.7", "th=0.9", "th=0.95", "th=0.98"] {
            let needle = format!(",{t},");
            assert_eq!(lines.iter().filter(|l| l.contains(&needle)).count(), 3);
        }
    }

    #[test]
    fn mixed_stages_are_rejected() {
        let mut rows = vec![row("a", vec![0.5], vec![0.4], vec![0.3])];
        rows.push(FoldMetrics {
            stage: "eargate".into(),
            ..rows[0].clone()
        });
        assert!(matches!(
            emit_table(&rows, TableShape::SegAblation),
            Err(EvaluationError::StageMismatch(_, _))
        ));
    }

    #[test]
    fn tampered_mean_is_rejected_on_parse() {
        let rows = vec![row("dice", vec![0.8, 0.9], vec![0.7, 0.72], vec![0.8, 0.82])];
        let text = emit_table(&rows, TableShape::SegAblation).unwrap();
        let tampered = text.replace("0.850000", "0.990000");
        assert!(parse_table(&tampered).is_err());
    }
}
