//! Slice-stack ingestion and export.
//!
//! A patient/modality directory holds grayscale `.tif`/`.png` slices plus a
//! `meta.txt` sidecar with the voxel spacing. Unreadable frames are skipped
//! and reported as gaps rather than aborting the stack; shape disagreements
//! abort, since a ragged stack cannot form a volume.

use super::naming::parse_filename;
use super::{BitDepth, DataError, Modality, Volume};
use ndarray::{Array2, Array3};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

const SLICE_EXTENSIONS: [&str; 3] = ["tif", "tiff", "png"];

/// Metadata sidecar contents (`meta.txt`, flat `key=value` lines).
#[derive(Debug, Clone, PartialEq)]
pub struct StackMeta {
    /// `(dz, dy, dx)` millimeters per voxel.
    pub spacing_mm: (f64, f64, f64),
    pub expected_slices: Option<usize>,
}

impl StackMeta {
    pub fn read(path: &Path) -> Result<StackMeta, DataError> {
        let text = fs::read_to_string(path)
            .map_err(|e| DataError::MissingMetadata(format!("{}: {e}", path.display())))?;
        let mut z = None;
        let mut y = None;
        let mut x = None;
        let mut expected = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                continue;
            };
            let value = value.trim();
            match key.trim() {
                "spacing_z" => z = value.parse::<f64>().ok(),
                "spacing_y" => y = value.parse::<f64>().ok(),
                "spacing_x" => x = value.parse::<f64>().ok(),
                "expected_slices" => expected = value.parse::<usize>().ok(),
                _ => {}
            }
        }
        match (z, y, x) {
            (Some(z), Some(y), Some(x)) if z > 0.0 && y > 0.0 && x > 0.0 => Ok(StackMeta {
                spacing_mm: (z, y, x),
                expected_slices: expected,
            }),
            _ => Err(DataError::MissingMetadata(format!(
                "{}: spacing_z/spacing_y/spacing_x required and positive",
                path.display()
            ))),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "spacing_z={}", self.spacing_mm.0)?;
        writeln!(f, "spacing_y={}", self.spacing_mm.1)?;
        writeln!(f, "spacing_x={}", self.spacing_mm.2)?;
        if let Some(n) = self.expected_slices {
            writeln!(f, "expected_slices={n}")?;
        }
        Ok(())
    }
}

/// Result of ingesting one directory: the stacked volume plus the slice
/// indices of frames that could not be decoded.
#[derive(Debug)]
pub struct IngestedStack {
    pub volume: Volume,
    pub gaps: Vec<usize>,
}

/// Ingest a slice directory using the `meta.txt` sidecar found inside it.
pub fn ingest_stack(dir: &Path) -> Result<IngestedStack, DataError> {
    let meta = StackMeta::read(&dir.join("meta.txt"))?;
    ingest_stack_with_meta(dir, &meta)
}

/// Ingest a slice directory with explicit metadata.
///
/// Slices are stacked in filename-index order (the zero-padded index parsed
/// from the standardized name); files that do not follow the convention fall
/// back to lexicographic order. Unreadable frames are skipped and recorded.
pub fn ingest_stack_with_meta(dir: &Path, meta: &StackMeta) -> Result<IngestedStack, DataError> {
    let mut files: Vec<(Option<usize>, String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| SLICE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if !ext_ok {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let index = parse_filename(&name).ok().map(|p| p.slice_index);
        files.push((index, name, path));
    }
    if files.is_empty() {
        return Err(DataError::NoSlices(dir.to_path_buf()));
    }
    // Numeric index order when every file parses; filename order otherwise.
    if files.iter().all(|(i, _, _)| i.is_some()) {
        files.sort_by_key(|(i, name, _)| (i.unwrap(), name.clone()));
    } else {
        files.sort_by(|a, b| a.1.cmp(&b.1));
    }

    let mut slices: Vec<Array2<f32>> = Vec::with_capacity(files.len());
    let mut gaps: Vec<usize> = Vec::new();
    let mut depth = BitDepth::U8;
    let mut shape: Option<(usize, usize)> = None;
    for (pos, (index, name, path)) in files.iter().enumerate() {
        let ordinal = index.unwrap_or(pos);
        match decode_gray(path) {
            Ok((pixels, d)) => {
                let got = (pixels.nrows(), pixels.ncols());
                match shape {
                    None => {
                        shape = Some(got);
                        depth = d;
                    }
                    Some(expected) if expected != got => {
                        return Err(DataError::ShapeMismatch {
                            index: ordinal,
                            got,
                            expected,
                        });
                    }
                    _ => {}
                }
                slices.push(pixels);
            }
            Err(err) => {
                log::warn!("skipping unreadable frame {name}: {err}");
                gaps.push(ordinal);
            }
        }
    }
    if slices.is_empty() {
        return Err(DataError::NoSlices(dir.to_path_buf()));
    }

    let (rows, cols) = shape.unwrap();
    let mut voxels = Array3::<f32>::zeros((slices.len(), rows, cols));
    for (k, s) in slices.iter().enumerate() {
        voxels.index_axis_mut(ndarray::Axis(0), k).assign(s);
    }

    let (patient_id, modality) = identify(dir, &files);
    let mut volume = Volume::new(patient_id, modality, voxels, meta.spacing_mm)?;
    volume.bit_depth = depth;
    Ok(IngestedStack { volume, gaps })
}

/// Patient id and modality from the first standardized filename, falling back
/// to the `<modality>/<patient>` directory layout.
fn identify(dir: &Path, files: &[(Option<usize>, String, PathBuf)]) -> (String, Modality) {
    for (_, name, _) in files {
        if let Ok(parsed) = parse_filename(name) {
            return (parsed.patient_id, parsed.modality);
        }
    }
    let patient = dir
        .file_name()
        .map(|p| p.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unknown".into());
    let modality = dir
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|m| Modality::parse(&m.to_string_lossy()));
    if modality.is_none() {
        log::warn!(
            "{}: cannot infer modality from layout, assuming SPACE-MRC",
            dir.display()
        );
    }
    (patient, modality.unwrap_or(Modality::SpaceMrc))
}

/// Write a volume back to disk in the standard layout (slices + sidecar).
/// Intensities are stored at the volume's bit depth; integral inputs round
/// back to the exact source bytes.
pub fn export_stack(volume: &Volume, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    for k in 0..volume.n_slices() {
        let name = super::naming::standardize_filename(&volume.patient_id, volume.modality, k);
        let path = dir.join(name);
        let slice = volume.voxels.index_axis(ndarray::Axis(0), k);
        let (rows, cols) = (slice.nrows(), slice.ncols());
        match volume.bit_depth {
            BitDepth::U8 => {
                let buf: Vec<u8> = slice
                    .iter()
                    .map(|&v| v.round().clamp(0.0, 255.0) as u8)
                    .collect();
                image::save_buffer(
                    &path,
                    &buf,
                    cols as u32,
                    rows as u32,
                    image::ExtendedColorType::L8,
                )
                .map_err(|e| DataError::Image(e.to_string()))?;
            }
            BitDepth::U16 => {
                let values: Vec<u16> = slice
                    .iter()
                    .map(|&v| v.round().clamp(0.0, 65535.0) as u16)
                    .collect();
                let mut bytes = Vec::with_capacity(values.len() * 2);
                for v in values {
                    bytes.extend_from_slice(&v.to_ne_bytes());
                }
                image::save_buffer(
                    &path,
                    &bytes,
                    cols as u32,
                    rows as u32,
                    image::ExtendedColorType::L16,
                )
                .map_err(|e| DataError::Image(e.to_string()))?;
            }
        }
    }
    let meta = StackMeta {
        spacing_mm: volume.spacing_mm,
        expected_slices: Some(volume.n_slices()),
    };
    meta.write(&dir.join("meta.txt"))
}

/// Decode a grayscale image to f32 intensities, preserving the raw integer
/// values (0..255 or 0..65535).
pub fn decode_gray(path: &Path) -> Result<(Array2<f32>, BitDepth), DataError> {
    let img = image::open(path).map_err(|e| DataError::Image(e.to_string()))?;
    match img {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            let data: Vec<f32> = buf.into_raw().into_iter().map(|v| v as f32).collect();
            let arr = Array2::from_shape_vec((h as usize, w as usize), data)
                .expect("buffer length matches dimensions");
            Ok((arr, BitDepth::U8))
        }
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            let data: Vec<f32> = buf.into_raw().into_iter().map(|v| v as f32).collect();
            let arr = Array2::from_shape_vec((h as usize, w as usize), data)
                .expect("buffer length matches dimensions");
            Ok((arr, BitDepth::U16))
        }
        other => {
            // Color inputs are out of contract; collapse to 16-bit luma.
            let buf = other.to_luma16();
            let (w, h) = buf.dimensions();
            let data: Vec<f32> = buf.into_raw().into_iter().map(|v| v as f32).collect();
            let arr = Array2::from_shape_vec((h as usize, w as usize), data)
                .expect("buffer length matches dimensions");
            Ok((arr, BitDepth::U16))
        }
    }
}
