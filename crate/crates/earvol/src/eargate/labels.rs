//! Slice-label CSV: `patient_id,modality,slice_index,label`. Ground truth
//! and predictions share the schema.

use super::EarGateError;
use crate::data::Modality;
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRow {
    pub patient_id: String,
    pub modality: Modality,
    pub slice_index: usize,
    pub label: u8,
}

pub fn write_label_csv(path: &Path, rows: &[LabelRow]) -> Result<(), EarGateError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "patient_id,modality,slice_index,label")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{}",
            r.patient_id,
            r.modality.token(),
            r.slice_index,
            r.label
        )?;
    }
    Ok(())
}

pub fn read_label_csv(path: &Path) -> Result<Vec<LabelRow>, EarGateError> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue; // header
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(EarGateError::Csv {
                line: lineno + 1,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let modality = Modality::parse(fields[1]).ok_or(EarGateError::Csv {
            line: lineno + 1,
            msg: format!("unknown modality {}", fields[1]),
        })?;
        let slice_index = fields[2].parse().map_err(|_| EarGateError::Csv {
            line: lineno + 1,
            msg: "bad slice index".into(),
        })?;
        let label: u8 = fields[3].parse().map_err(|_| EarGateError::Csv {
            line: lineno + 1,
            msg: "bad label".into(),
        })?;
        if label > 1 {
            return Err(EarGateError::Csv {
                line: lineno + 1,
                msg: "label must be 0 or 1".into(),
            });
        }
        rows.push(LabelRow {
            patient_id: fields[0].to_string(),
            modality,
            slice_index,
            label,
        });
    }
    Ok(rows)
}
