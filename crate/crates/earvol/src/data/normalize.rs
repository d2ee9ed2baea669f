//! Intensity normalization: per-volume z-score for the classifier path and
//! per-patch min-max for the segmenter path.

use super::Volume;
use ndarray::Array2;

const CONSTANT_EPS: f64 = 1e-12;

/// Z-score the whole volume: zero mean, unit variance across all voxels.
/// A constant volume normalizes to all zeros.
///
/// Statistics are accumulated in f64 so the result holds |mean| < 1e-6 and
/// |std - 1| < 1e-6 even for large stacks.
pub fn normalize_per_volume(v: &Volume) -> Volume {
    let n = v.voxels.len() as f64;
    let mean = v.voxels.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .voxels
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let mut out = v.clone();
    if var.sqrt() < CONSTANT_EPS {
        out.voxels.fill(0.0);
        return out;
    }
    let inv_std = 1.0 / var.sqrt();
    out.voxels
        .mapv_inplace(|x| ((x as f64 - mean) * inv_std) as f32);
    out
}

/// Min-max normalize a 2D patch to [0, 1]; a constant patch maps to zeros.
pub fn minmax_normalize(patch: &Array2<f32>) -> Array2<f32> {
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in patch.iter() {
        min = min.min(v);
        max = max.max(v);
    }
    if !(max > min) {
        return Array2::zeros(patch.raw_dim());
    }
    let range = max - min;
    patch.mapv(|v| (v - min) / range)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Modality;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    fn volume_from(voxels: Array3<f32>) -> Volume {
        Volume::new("T", Modality::SpaceMrc, voxels, (0.5, 0.5, 0.5)).unwrap()
    }

    fn stats(v: &Volume) -> (f64, f64) {
        let n = v.voxels.len() as f64;
        let mean = v.voxels.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = v
            .voxels
            .iter()
            .map(|&x| (x as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }

    #[test]
    fn constant_volume_normalizes_to_zero() {
        let v = volume_from(Array3::from_elem((3, 4, 4), 42.0));
        let out = normalize_per_volume(&v);
        assert!(out.voxels.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_mean_unit_std() {
        let v = volume_from(Array3::from_shape_fn((6, 10, 10), |(k, i, j)| {
            (k * 31 + i * 7 + j) as f32 * 0.93 + 5.0
        }));
        let out = normalize_per_volume(&v);
        let (mean, std) = stats(&out);
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((std - 1.0).abs() < 1e-6, "std {std}");
    }

    #[test]
    fn affine_intensity_invariance() {
        let v = volume_from(Array3::from_shape_fn((4, 6, 6), |(k, i, j)| {
            ((k + 2 * i + 3 * j) as f32).sin() * 10.0
        }));
        let mut shifted = v.clone();
        shifted.voxels.mapv_inplace(|x| 3.5 * x + 100.0);
        let a = normalize_per_volume(&v);
        let b = normalize_per_volume(&shifted);
        for (x, y) in a.voxels.iter().zip(b.voxels.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let v = volume_from(Array3::from_shape_fn((4, 8, 8), |(k, i, j)| {
            (k * 59 + i * 17 + j * 3) as f32
        }));
        let once = normalize_per_volume(&v);
        let twice = normalize_per_volume(&once);
        for (x, y) in once.voxels.iter().zip(twice.voxels.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn minmax_known_case() {
        let patch = array![[0.0f32, 5.0], [10.0, 5.0]];
        let out = minmax_normalize(&patch);
        assert_eq!(out, array![[0.0, 0.5], [1.0, 0.5]]);
    }

    #[test]
    fn minmax_constant_patch_is_zero() {
        let patch = Array2::from_elem((3, 3), 9.0f32);
        assert!(minmax_normalize(&patch).iter().all(|&x| x == 0.0));
    }

    proptest! {
        #[test]
        fn minmax_range_contained(values in proptest::collection::vec(-1e6f32..1e6, 16)) {
            let patch = Array2::from_shape_vec((4, 4), values).unwrap();
            let out = minmax_normalize(&patch);
            for &v in out.iter() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
