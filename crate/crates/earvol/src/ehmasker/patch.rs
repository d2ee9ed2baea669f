//! Patch extraction and the mask image format.
//!
//! Crops are centered on a pixel coordinate; when the window sticks out of
//! the slice the source is reflect-padded first. The crop origin (possibly
//! negative) is kept so patch masks can be pasted back into full-slice
//! canvases.

use super::EhMaskerError;
use crate::auribox::Side;
use crate::data::{minmax_normalize, Modality};
use ndarray::Array2;
use std::path::Path;

pub const PATCH_SIZE: usize = 96;

/// A normalized crop plus enough provenance to reassemble it.
#[derive(Debug, Clone)]
pub struct Patch {
    /// Min-max normalized pixels in [0, 1].
    pub pixels: Array2<f32>,
    pub patient_id: String,
    pub modality: Modality,
    pub slice_index: usize,
    pub side: Side,
    /// (row, col) of the crop's top-left corner in full-slice coordinates;
    /// negative when the crop was padded past the border.
    pub crop_origin: (isize, isize),
}

/// Crop a `size`×`size` window centered on `(x, y)` pixels, reflect-padding
/// past the borders, without normalization. Returns the crop and its origin.
pub fn extract_patch_raw(
    slice: &Array2<f32>,
    center_px: (f64, f64),
    size: usize,
) -> Result<(Array2<f32>, (isize, isize)), EhMaskerError> {
    let (h, w) = (slice.nrows(), slice.ncols());
    let (x, y) = center_px;
    if !(0.0..w as f64).contains(&x) || !(0.0..h as f64).contains(&y) {
        return Err(EhMaskerError::OutOfBounds { x, y, w, h });
    }
    let half = (size / 2) as isize;
    let origin = (
        y.round() as isize - half,
        x.round() as isize - half,
    );
    let crop = Array2::from_shape_fn((size, size), |(i, j)| {
        let r = reflect_index(origin.0 + i as isize, h);
        let c = reflect_index(origin.1 + j as isize, w);
        slice[[r, c]]
    });
    Ok((crop, origin))
}

/// Extract a normalized patch for the segmenter.
pub fn extract_patch(
    slice: &Array2<f32>,
    center_px: (f64, f64),
    patient_id: &str,
    modality: Modality,
    slice_index: usize,
    side: Side,
) -> Result<Patch, EhMaskerError> {
    let (crop, crop_origin) = extract_patch_raw(slice, center_px, PATCH_SIZE)?;
    Ok(Patch {
        pixels: minmax_normalize(&crop),
        patient_id: patient_id.to_string(),
        modality,
        slice_index,
        side,
        crop_origin,
    })
}

/// Mirror both the patch and its mask about the vertical axis.
pub fn flip_augment(
    patch: &Array2<f32>,
    mask: &Array2<u8>,
) -> Result<(Array2<f32>, Array2<u8>), EhMaskerError> {
    if patch.dim() != mask.dim() {
        return Err(EhMaskerError::ShapeMismatch(patch.dim(), mask.dim()));
    }
    let w = patch.ncols();
    let fp = Array2::from_shape_fn(patch.dim(), |(i, j)| patch[[i, w - 1 - j]]);
    let fm = Array2::from_shape_fn(mask.dim(), |(i, j)| mask[[i, w - 1 - j]]);
    Ok((fp, fm))
}

/// Reflect an out-of-range index back into [0, len) (border-mirror without
/// repeating the edge sample's neighbor pattern: -1 -> 1, len -> len-2).
fn reflect_index(i: isize, len: usize) -> usize {
    let len = len as isize;
    debug_assert!(len > 0);
    let period = (2 * (len - 1)).max(1);
    let mut v = i.rem_euclid(period);
    if v >= len {
        v = period - v;
    }
    v as usize
}

/// Write a binary mask as an 8-bit PNG (foreground 255).
pub fn write_mask_png(path: &Path, mask: &Array2<u8>) -> Result<(), EhMaskerError> {
    let (h, w) = mask.dim();
    let buf: Vec<u8> = mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    image::save_buffer(
        path,
        &buf,
        w as u32,
        h as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| EhMaskerError::Image(e.to_string()))
}

/// Read a mask image (any nonzero pixel is foreground).
pub fn read_mask_png(path: &Path) -> Result<Array2<u8>, EhMaskerError> {
    let img = image::open(path)
        .map_err(|e| EhMaskerError::Image(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data: Vec<u8> = img.into_raw().into_iter().map(|v| u8::from(v > 127)).collect();
    Ok(Array2::from_shape_vec((h as usize, w as usize), data).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_slice(h: usize, w: usize) -> Array2<f32> {
        Array2::from_shape_fn((h, w), |(i, j)| (i * w + j) as f32)
    }

    #[test]
    fn centered_crop_origin_matches_arithmetic() {
        let slice = gradient_slice(320, 320);
        let (_, origin) = extract_patch_raw(&slice, (160.0, 160.0), 96).unwrap();
        assert_eq!(origin, (112, 112));
    }

    #[test]
    fn border_crop_is_full_size_via_reflection() {
        let slice = gradient_slice(64, 64);
        let (crop, origin) = extract_patch_raw(&slice, (10.0, 10.0), 96).unwrap();
        assert_eq!(crop.dim(), (96, 96));
        assert_eq!(origin, (-38, -38));
        // reflected corner equals the mirrored in-bounds sample
        assert_eq!(crop[[0, 38]], slice[[38, 0]]);
    }

    #[test]
    fn extraction_is_deterministic_and_normalized() {
        let slice = gradient_slice(128, 128);
        let a = extract_patch(&slice, (64.0, 64.0), "P1", Modality::SpaceMrc, 5, Side::Left)
            .unwrap();
        let b = extract_patch(&slice, (64.0, 64.0), "P1", Modality::SpaceMrc, 5, Side::Left)
            .unwrap();
        assert_eq!(a.pixels, b.pixels);
        let min = a.pixels.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = a.pixels.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(min, 0.0);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn out_of_bounds_center_is_rejected() {
        let slice = gradient_slice(64, 64);
        assert!(matches!(
            extract_patch_raw(&slice, (64.0, 10.0), 96),
            Err(EhMaskerError::OutOfBounds { .. })
        ));
        assert!(matches!(
            extract_patch_raw(&slice, (-1.0, 10.0), 96),
            Err(EhMaskerError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn double_flip_is_identity_and_preserves_foreground() {
        let patch = gradient_slice(96, 96);
        let mut mask = Array2::<u8>::zeros((96, 96));
        for j in 0..20 {
            mask[[40 + j / 5, 30 + j % 5]] = 1;
        }
        let count = mask.iter().filter(|&&v| v == 1).count();
        let (fp, fm) = flip_augment(&patch, &mask).unwrap();
        assert_eq!(fm.iter().filter(|&&v| v == 1).count(), count);
        let (bp, bm) = flip_augment(&fp, &fm).unwrap();
        assert_eq!(bp, patch);
        assert_eq!(bm, mask);
    }

    #[test]
    fn flip_mirrors_foreground_centroid() {
        let patch = Array2::zeros((96, 96));
        let mut mask = Array2::<u8>::zeros((96, 96));
        mask[[50, 20]] = 1;
        let (_, fm) = flip_augment(&patch, &mask).unwrap();
        assert_eq!(fm[[50, 95 - 20]], 1);
    }

    #[test]
    fn mask_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut mask = Array2::<u8>::zeros((32, 48));
        for k in 0..64 {
            mask[[k / 16, k % 16]] = 1;
        }
        write_mask_png(&path, &mask).unwrap();
        assert_eq!(read_mask_png(&path).unwrap(), mask);
    }
}
