//! Per-ear result rows and the run-report CSV.
//!
//! Schema (volumes in cm³ with 4 decimals, empty when unavailable):
//!
//! ```text
//! patient_id,ear,v_vestibule_cm3,v_endolymph_cm3,elr_percent,n_slices,warnings
//! ```

use super::PipelineError;
use crate::auribox::Side;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Final result for one (patient, ear).
#[derive(Debug, Clone, PartialEq)]
pub struct EarReport {
    pub patient_id: String,
    pub ear: Side,
    pub v_vestibule_mm3: Option<f64>,
    pub v_endolymph_mm3: Option<f64>,
    pub elr_percent: Option<f64>,
    /// Slices that contributed foreground to either modality's mask.
    pub n_slices: usize,
    pub warnings: Vec<String>,
}

impl EarReport {
    pub fn empty(patient_id: &str, ear: Side) -> EarReport {
        EarReport {
            patient_id: patient_id.to_string(),
            ear,
            v_vestibule_mm3: None,
            v_endolymph_mm3: None,
            elr_percent: None,
            n_slices: 0,
            warnings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Everything one `run` invocation produced.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub reports: Vec<EarReport>,
    pub timings: Vec<StageTiming>,
}

impl RunReport {
    pub fn has_warnings(&self) -> bool {
        self.reports.iter().any(|r| !r.warnings.is_empty())
    }
}

fn fmt_cm3(v: Option<f64>) -> String {
    match v {
        // mm³ -> cm³ with 4 decimals
        Some(mm3) => format!("{:.4}", mm3 / 1000.0),
        None => String::new(),
    }
}

fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(p) => format!("{p:.4}"),
        None => String::new(),
    }
}

pub fn write_ear_reports(path: &Path, reports: &[EarReport]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    writeln!(
        f,
        "patient_id,ear,v_vestibule_cm3,v_endolymph_cm3,elr_percent,n_slices,warnings"
    )?;
    for r in reports {
        let warnings = r
            .warnings
            .iter()
            .map(|w| w.replace([',', '\n'], ";"))
            .collect::<Vec<_>>()
            .join("; ");
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.patient_id,
            r.ear,
            fmt_cm3(r.v_vestibule_mm3),
            fmt_cm3(r.v_endolymph_mm3),
            fmt_pct(r.elr_percent),
            r.n_slices,
            warnings
        )?;
    }
    Ok(())
}

pub fn read_ear_reports(path: &Path) -> Result<Vec<EarReport>, PipelineError> {
    let text = fs::read_to_string(path)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(7, ',').collect();
        if fields.len() != 7 {
            return Err(PipelineError::Config(format!(
                "{}:{}: expected 7 fields",
                path.display(),
                lineno + 1
            )));
        }
        let ear = Side::parse(fields[1]).ok_or_else(|| {
            PipelineError::Config(format!("{}:{}: bad ear", path.display(), lineno + 1))
        })?;
        let parse_opt = |s: &str| -> Result<Option<f64>, PipelineError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|_| {
                    PipelineError::Config(format!(
                        "{}:{}: bad number {s}",
                        path.display(),
                        lineno + 1
                    ))
                })
            }
        };
        let v_vest_cm3 = parse_opt(fields[2])?;
        let v_endo_cm3 = parse_opt(fields[3])?;
        out.push(EarReport {
            patient_id: fields[0].to_string(),
            ear,
            v_vestibule_mm3: v_vest_cm3.map(|v| v * 1000.0),
            v_endolymph_mm3: v_endo_cm3.map(|v| v * 1000.0),
            elr_percent: parse_opt(fields[4])?,
            n_slices: fields[5].parse().map_err(|_| {
                PipelineError::Config(format!(
                    "{}:{}: bad n_slices",
                    path.display(),
                    lineno + 1
                ))
            })?,
            warnings: if fields[6].is_empty() {
                Vec::new()
            } else {
                fields[6].split("; ").map(String::from).collect()
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn csv_roundtrip_with_4_decimal_volumes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("reports.csv");
        let rows = vec![
            EarReport {
                patient_id: "P000".into(),
                ear: Side::Left,
                v_vestibule_mm3: Some(86.0),
                v_endolymph_mm3: Some(17.0),
                elr_percent: Some(19.7674),
                n_slices: 22,
                warnings: vec![],
            },
            EarReport {
                patient_id: "P001".into(),
                ear: Side::Right,
                v_vestibule_mm3: None,
                v_endolymph_mm3: None,
                elr_percent: None,
                n_slices: 0,
                warnings: vec!["no ear detected (SPACE-MRC)".into()],
            },
        ];
        write_ear_reports(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("P000,left,0.0860,0.0170,19.7674,22,"));
        let back = read_ear_reports(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert!((back[0].v_vestibule_mm3.unwrap() - 86.0).abs() < 1e-9);
        assert_eq!(back[1].elr_percent, None);
        assert_eq!(back[1].warnings.len(), 1);
    }

    #[test]
    fn commas_in_warnings_are_sanitized() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rows = vec![EarReport {
            warnings: vec!["a, b".into()],
            ..EarReport::empty("P", Side::Left)
        }];
        write_ear_reports(&path, &rows).unwrap();
        let back = read_ear_reports(&path).unwrap();
        // sanitation is one-way: the embedded comma becomes a separator
        assert_eq!(back[0].warnings, vec!["a".to_string(), "b".to_string()]);
    }
}
