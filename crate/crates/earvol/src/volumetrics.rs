//! 3D mask reconstruction, morphological cleanup, and the volumetric
//! ratios reported per ear.
//!
//! Patch masks are pasted at their crop origin into full-slice canvases and
//! stacked in axial order. Post-processing keeps the largest 26-connected
//! foreground component and fills internal cavities (background regions with
//! no 6-connected path to the volume border). Physical volume is foreground
//! voxel count × voxel volume; the endolymph-to-vestibule ratio (percent) and
//! the volumetric similarity index compare the per-ear results.

use crate::auribox::Side;
use ndarray::{Array2, Array3, Dimension};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VolumetricsError {
    #[error("duplicate patch for slice {0}")]
    DuplicateSlice(usize),
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("vestibular volume is zero")]
    ZeroVestibule,
    #[error("zero vestibular area")]
    ZeroVestibularArea,
    #[error("invalid mask volume: {0}")]
    Invalid(String),
}

/// Binary sub-volume of one ear, aligned to the source volume's grid.
/// `start_slice` anchors the first canvas to the source slice index.
#[derive(Debug, Clone)]
pub struct MaskVolume {
    pub voxels: Array3<u8>,
    pub spacing_mm: (f64, f64, f64),
    pub ear: Side,
    pub start_slice: usize,
}

impl MaskVolume {
    pub fn new(
        voxels: Array3<u8>,
        spacing_mm: (f64, f64, f64),
        ear: Side,
        start_slice: usize,
    ) -> Result<MaskVolume, VolumetricsError> {
        if spacing_mm.0 <= 0.0 || spacing_mm.1 <= 0.0 || spacing_mm.2 <= 0.0 {
            return Err(VolumetricsError::Invalid(format!(
                "non-positive spacing {spacing_mm:?}"
            )));
        }
        if voxels.iter().any(|&v| v > 1) {
            return Err(VolumetricsError::Invalid("mask entries must be 0/1".into()));
        }
        Ok(MaskVolume {
            voxels,
            spacing_mm,
            ear,
            start_slice,
        })
    }

    pub fn foreground_count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v == 1).count()
    }
}

/// One segmented patch to paste: source slice index, binary 96×96 (or any)
/// mask, and the crop origin (row, col) in full-slice coordinates. Origins
/// may be negative when the crop was reflect-padded at the border.
#[derive(Debug, Clone)]
pub struct PatchMask {
    pub slice_index: usize,
    pub mask: Array2<u8>,
    pub crop_origin: (isize, isize),
}

/// Stack per-slice patch masks into one ear's 3D mask.
///
/// Every slice of `segment` gets a canvas; slices without a patch contribute
/// an empty canvas and a warning. Patches are clipped to the canvas.
pub fn assemble_mask_volume(
    patches: &[PatchMask],
    segment: (usize, usize),
    slice_shape: (usize, usize),
    spacing_mm: (f64, f64, f64),
    ear: Side,
) -> Result<(MaskVolume, Vec<String>), VolumetricsError> {
    let (start, end) = segment;
    if end <= start {
        return Err(VolumetricsError::Invalid(format!(
            "empty slice segment {start}..{end}"
        )));
    }
    let (rows, cols) = slice_shape;
    let mut voxels = Array3::<u8>::zeros((end - start, rows, cols));
    let mut seen = vec![false; end - start];
    let mut warnings = Vec::new();
    for p in patches {
        if p.slice_index < start || p.slice_index >= end {
            return Err(VolumetricsError::Invalid(format!(
                "patch slice {} outside segment {start}..{end}",
                p.slice_index
            )));
        }
        let k = p.slice_index - start;
        if seen[k] {
            return Err(VolumetricsError::DuplicateSlice(p.slice_index));
        }
        seen[k] = true;
        let mut canvas = voxels.index_axis_mut(ndarray::Axis(0), k);
        for ((i, j), &v) in p.mask.indexed_iter() {
            if v == 0 {
                continue;
            }
            let r = p.crop_origin.0 + i as isize;
            let c = p.crop_origin.1 + j as isize;
            if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
                continue;
            }
            canvas[[r as usize, c as usize]] = 1;
        }
    }
    for (k, present) in seen.iter().enumerate() {
        if !present {
            warnings.push(format!(
                "{} ear: no detection on slice {}, empty canvas",
                ear,
                start + k
            ));
        }
    }
    Ok((
        MaskVolume::new(voxels, spacing_mm, ear, start)?,
        warnings,
    ))
}

/// Keep the largest 26-connected component, then fill internal cavities
/// (6-connected background regions that do not touch the volume border).
/// An empty input passes through with a warning.
pub fn postprocess_3d(m: &MaskVolume) -> (MaskVolume, Vec<String>) {
    let mut warnings = Vec::new();
    if m.foreground_count() == 0 {
        warnings.push(format!("{} ear: empty mask, nothing to post-process", m.ear));
        return (m.clone(), warnings);
    }
    let kept = largest_component_26(&m.voxels);
    let filled = fill_cavities_6(&kept);
    let out = MaskVolume {
        voxels: filled,
        spacing_mm: m.spacing_mm,
        ear: m.ear,
        start_slice: m.start_slice,
    };
    (out, warnings)
}

/// Physical foreground volume in mm³.
pub fn mask_volume_mm3(m: &MaskVolume) -> f64 {
    m.foreground_count() as f64 * m.spacing_mm.0 * m.spacing_mm.1 * m.spacing_mm.2
}

/// Endolymph-to-vestibule ratio in percent. Values above 100 are returned
/// as-is; the caller decides how to flag them.
pub fn elr(v_endolymph_mm3: f64, v_vestibule_mm3: f64) -> Result<f64, VolumetricsError> {
    if v_vestibule_mm3 <= 0.0 {
        return Err(VolumetricsError::ZeroVestibule);
    }
    Ok(100.0 * v_endolymph_mm3 / v_vestibule_mm3)
}

/// Slice-level area ratio in percent (training-time monitoring only).
pub fn area_elr(
    endo_mask: &Array2<u8>,
    vest_mask: &Array2<u8>,
    endo_pixel_mm2: f64,
    vest_pixel_mm2: f64,
) -> Result<f64, VolumetricsError> {
    let endo_area = endo_mask.iter().filter(|&&v| v == 1).count() as f64 * endo_pixel_mm2;
    let vest_area = vest_mask.iter().filter(|&&v| v == 1).count() as f64 * vest_pixel_mm2;
    if vest_area <= 0.0 {
        return Err(VolumetricsError::ZeroVestibularArea);
    }
    Ok(100.0 * endo_area / vest_area)
}

/// Volumetric similarity index in percent: 100·(1 − |a−b|/(a+b)).
/// Two zero volumes count as identical (with a log warning).
pub fn vsi(v_a_mm3: f64, v_b_mm3: f64) -> f64 {
    let sum = v_a_mm3 + v_b_mm3;
    if sum <= 0.0 {
        log::warn!("vsi of two empty volumes, defining as 100");
        return 100.0;
    }
    100.0 * (1.0 - (v_a_mm3 - v_b_mm3).abs() / sum)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegMetrics {
    pub dsc: f64,
    pub iou: f64,
    pub recall: f64,
}

/// Overlap metrics for binary masks of any rank. Two empty masks score 1.0
/// across the board.
pub fn segmentation_metrics<D: Dimension>(
    pred: &ndarray::Array<u8, D>,
    truth: &ndarray::Array<u8, D>,
) -> Result<SegMetrics, VolumetricsError> {
    if pred.shape() != truth.shape() {
        return Err(VolumetricsError::ShapeMismatch(
            pred.shape().to_vec(),
            truth.shape().to_vec(),
        ));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fne = 0u64;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        match (p != 0, t != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    if tp + fp + fne == 0 {
        return Ok(SegMetrics {
            dsc: 1.0,
            iou: 1.0,
            recall: 1.0,
        });
    }
    let dsc = 2.0 * tp as f64 / (2 * tp + fp + fne) as f64;
    let iou = tp as f64 / (tp + fp + fne) as f64;
    let recall = if tp + fne > 0 {
        tp as f64 / (tp + fne) as f64
    } else {
        1.0
    };
    Ok(SegMetrics { dsc, iou, recall })
}

// ---------------------------------------------------------------------------
// connected components
// ---------------------------------------------------------------------------

/// Keep only the largest 26-connected foreground component. Ties go to the
/// component discovered first in lexicographic voxel order, i.e. the one
/// containing the smallest (slice, row, col).
fn largest_component_26(mask: &Array3<u8>) -> Array3<u8> {
    let (d, h, w) = mask.dim();
    let mut labels = vec![0u32; d * h * w];
    let flat = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut sizes: Vec<usize> = vec![0]; // sizes[0] unused (background)
    let mut next = 1u32;
    let mut queue = VecDeque::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask[[z, y, x]] == 0 || labels[flat(z, y, x)] != 0 {
                    continue;
                }
                let label = next;
                next += 1;
                sizes.push(0);
                labels[flat(z, y, x)] = label;
                queue.push_back((z, y, x));
                while let Some((cz, cy, cx)) = queue.pop_front() {
                    sizes[label as usize] += 1;
                    for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                if dz == 0 && dy == 0 && dx == 0 {
                                    continue;
                                }
                                let nz = cz as i64 + dz;
                                let ny = cy as i64 + dy;
                                let nx = cx as i64 + dx;
                                if nz < 0
                                    || ny < 0
                                    || nx < 0
                                    || nz >= d as i64
                                    || ny >= h as i64
                                    || nx >= w as i64
                                {
                                    continue;
                                }
                                let (nz, ny, nx) = (nz as usize, ny as usize, nx as usize);
                                if mask[[nz, ny, nx]] == 1 && labels[flat(nz, ny, nx)] == 0 {
                                    labels[flat(nz, ny, nx)] = label;
                                    queue.push_back((nz, ny, nx));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    // earliest label wins ties because labels are assigned in scan order
    let mut best = 0u32;
    let mut best_size = 0usize;
    for (label, &size) in sizes.iter().enumerate().skip(1) {
        if size > best_size {
            best_size = size;
            best = label as u32;
        }
    }
    let mut out = Array3::<u8>::zeros((d, h, w));
    if best != 0 {
        for ((z, y, x), v) in out.indexed_iter_mut() {
            if labels[flat(z, y, x)] == best {
                *v = 1;
            }
        }
    }
    out
}

/// Fill background regions (6-connectivity) that cannot reach the volume
/// border. Complementary connectivities (26 for foreground, 6 for
/// background) avoid topological ambiguity.
fn fill_cavities_6(mask: &Array3<u8>) -> Array3<u8> {
    let (d, h, w) = mask.dim();
    let mut reachable = Array3::<u8>::zeros((d, h, w));
    let mut queue = VecDeque::new();
    let push = |z: usize, y: usize, x: usize,
                    reachable: &mut Array3<u8>,
                    queue: &mut VecDeque<(usize, usize, usize)>| {
        if mask[[z, y, x]] == 0 && reachable[[z, y, x]] == 0 {
            reachable[[z, y, x]] = 1;
            queue.push_back((z, y, x));
        }
    };
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if z == 0 || y == 0 || x == 0 || z == d - 1 || y == h - 1 || x == w - 1 {
                    push(z, y, x, &mut reachable, &mut queue);
                }
            }
        }
    }
    const NBR: [(i64, i64, i64); 6] = [
        (1, 0, 0),
        (-1, 0, 0),
        (0, 1, 0),
        (0, -1, 0),
        (0, 0, 1),
        (0, 0, -1),
    ];
    while let Some((z, y, x)) = queue.pop_front() {
        for (dz, dy, dx) in NBR {
            let nz = z as i64 + dz;
            let ny = y as i64 + dy;
            let nx = x as i64 + dx;
            if nz < 0 || ny < 0 || nx < 0 || nz >= d as i64 || ny >= h as i64 || nx >= w as i64 {
                continue;
            }
            let (nz, ny, nx) = (nz as usize, ny as usize, nx as usize);
            if mask[[nz, ny, nx]] == 0 && reachable[[nz, ny, nx]] == 0 {
                reachable[[nz, ny, nx]] = 1;
                queue.push_back((nz, ny, nx));
            }
        }
    }
    let mut out = mask.clone();
    for ((z, y, x), v) in out.indexed_iter_mut() {
        if mask[[z, y, x]] == 0 && reachable[[z, y, x]] == 0 {
            *v = 1; // internal cavity
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn mv(voxels: Array3<u8>) -> MaskVolume {
        MaskVolume::new(voxels, (0.5, 0.5, 0.5), Side::Left, 0).unwrap()
    }

    #[test]
    fn assemble_conserves_foreground_and_warns_on_gaps() {
        let mut mask = Array2::<u8>::zeros((4, 4));
        for j in 0..10 {
            mask[[j / 4, j % 4]] = 1;
        }
        let patches = vec![PatchMask {
            slice_index: 3,
            mask,
            crop_origin: (2, 2),
        }];
        let (vol, warnings) =
            assemble_mask_volume(&patches, (3, 5), (16, 16), (0.5, 0.5, 0.5), Side::Left)
                .unwrap();
        assert_eq!(vol.foreground_count(), 10);
        assert_eq!(vol.start_slice, 3);
        assert_eq!(warnings.len(), 1); // slice 4 empty
        assert!(warnings[0].contains("slice 4"));
    }

    #[test]
    fn assemble_rejects_duplicate_slices() {
        let p = PatchMask {
            slice_index: 2,
            mask: Array2::ones((2, 2)),
            crop_origin: (0, 0),
        };
        let err = assemble_mask_volume(
            &[p.clone(), p],
            (2, 3),
            (8, 8),
            (0.5, 0.5, 0.5),
            Side::Right,
        )
        .unwrap_err();
        assert_eq!(err, VolumetricsError::DuplicateSlice(2));
    }

    proptest! {
        #[test]
        fn pasted_foreground_never_escapes_canvas(
            or in -8isize..12, oc in -8isize..12, ones in 1usize..16
        ) {
            let mut mask = Array2::<u8>::zeros((6, 6));
            for k in 0..ones {
                mask[[k / 6, k % 6]] = 1;
            }
            let patches = vec![PatchMask { slice_index: 0, mask, crop_origin: (or, oc) }];
            let (vol, _) =
                assemble_mask_volume(&patches, (0, 1), (10, 10), (0.5, 0.5, 0.5), Side::Left)
                    .unwrap();
            // all foreground voxels are inside the canvas by construction
            prop_assert!(vol.foreground_count() <= ones);
        }
    }

    #[test]
    fn largest_component_survives_and_ties_take_lex_smallest() {
        let mut v = Array3::<u8>::zeros((3, 10, 10));
        // 100-voxel slab on slice 0
        for y in 0..10 {
            for x in 0..10 {
                v[[0, y, x]] = 1;
            }
        }
        // 5-voxel blob on slice 2
        for x in 0..5 {
            v[[2, 9, x]] = 1;
        }
        let (out, _) = postprocess_3d(&mv(v));
        assert_eq!(out.foreground_count(), 100);
        assert!(out.voxels.index_axis(ndarray::Axis(0), 2).iter().all(|&x| x == 0));

        // two single-voxel components: the lexicographically smaller survives
        let mut tie = Array3::<u8>::zeros((1, 3, 5));
        tie[[0, 0, 1]] = 1;
        tie[[0, 2, 4]] = 1;
        let (out, _) = postprocess_3d(&mv(tie));
        assert_eq!(out.voxels[[0, 0, 1]], 1);
        assert_eq!(out.voxels[[0, 2, 4]], 0);
    }

    #[test]
    fn internal_cavity_is_filled() {
        let mut v = Array3::<u8>::from_elem((5, 5, 5), 1);
        v[[2, 2, 2]] = 0;
        let (out, _) = postprocess_3d(&mv(v));
        assert_eq!(out.foreground_count(), 125);
    }

    #[test]
    fn open_notch_is_not_a_cavity() {
        // a tunnel to the border must stay background
        let mut v = Array3::<u8>::from_elem((3, 3, 5), 1);
        v[[1, 1, 0]] = 0;
        v[[1, 1, 1]] = 0;
        let (out, _) = postprocess_3d(&mv(v));
        assert_eq!(out.voxels[[1, 1, 0]], 0);
        assert_eq!(out.voxels[[1, 1, 1]], 0);
    }

    #[test]
    fn postprocess_is_idempotent_on_solid_component() {
        let mut v = Array3::<u8>::zeros((4, 6, 6));
        for z in 1..3 {
            for y in 1..5 {
                for x in 2..5 {
                    v[[z, y, x]] = 1;
                }
            }
        }
        let (once, w1) = postprocess_3d(&mv(v));
        let (twice, _) = postprocess_3d(&once);
        assert!(w1.is_empty());
        assert_eq!(once.voxels, twice.voxels);
    }

    #[test]
    fn empty_mask_passes_through_with_warning() {
        let (out, warnings) = postprocess_3d(&mv(Array3::zeros((2, 4, 4))));
        assert_eq!(out.foreground_count(), 0);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn physical_volumes_match_both_spacings() {
        let mut v = Array3::<u8>::zeros((4, 10, 10));
        for k in 0..100 {
            v[[k / 64, (k / 8) % 8, k % 8]] = 1;
        }
        let space = MaskVolume::new(v.clone(), (0.5, 0.5, 0.5), Side::Left, 0).unwrap();
        assert!((mask_volume_mm3(&space) - 12.5).abs() < 1e-12);
        let real_ir = MaskVolume::new(v, (0.8, 0.5, 0.5), Side::Left, 0).unwrap();
        assert!((mask_volume_mm3(&real_ir) - 20.0).abs() < 1e-12);
        let empty = MaskVolume::new(Array3::zeros((1, 2, 2)), (0.5, 0.5, 0.5), Side::Left, 0)
            .unwrap();
        assert_eq!(mask_volume_mm3(&empty), 0.0);
    }

    #[test]
    fn volume_is_additive_over_disjoint_masks() {
        let mut a = Array3::<u8>::zeros((2, 4, 4));
        let mut b = Array3::<u8>::zeros((2, 4, 4));
        a[[0, 1, 1]] = 1;
        a[[1, 2, 2]] = 1;
        b[[0, 3, 3]] = 1;
        let mut joint = a.clone();
        joint[[0, 3, 3]] = 1;
        let s = (0.8, 0.5, 0.5);
        let va = mask_volume_mm3(&MaskVolume::new(a, s, Side::Left, 0).unwrap());
        let vb = mask_volume_mm3(&MaskVolume::new(b, s, Side::Left, 0).unwrap());
        let vj = mask_volume_mm3(&MaskVolume::new(joint, s, Side::Left, 0).unwrap());
        assert!((va + vb - vj).abs() < 1e-12);
    }

    #[test]
    fn elr_basic_points_and_scale_invariance() {
        assert_eq!(elr(0.0, 50.0).unwrap(), 0.0);
        assert_eq!(elr(42.0, 42.0).unwrap(), 100.0);
        let v = elr(17.0, 86.0).unwrap();
        assert!((v - 19.77).abs() < 0.01, "{v}");
        // scale invariance
        for k in [0.25, 3.0, 117.0] {
            assert!((elr(17.0 * k, 86.0 * k).unwrap() - v).abs() < 1e-9);
        }
        assert_eq!(elr(1.0, 0.0), Err(VolumetricsError::ZeroVestibule));
        // implausible ratios are reported, not clipped
        assert!(elr(120.0, 60.0).unwrap() > 100.0);
    }

    #[test]
    fn area_ratio_hand_cases() {
        let mut endo = Array2::<u8>::zeros((10, 10));
        let mut vest = Array2::<u8>::zeros((10, 10));
        for k in 0..40 {
            endo[[k / 10, k % 10]] = 1;
        }
        for k in 0..100 {
            vest[[k / 10, k % 10]] = 1;
        }
        let r = area_elr(&endo, &vest, 0.25, 0.25).unwrap();
        assert!((r - 40.0).abs() < 1e-12);
        assert_eq!(
            area_elr(&Array2::zeros((2, 2)), &Array2::zeros((2, 2)), 0.25, 0.25),
            Err(VolumetricsError::ZeroVestibularArea)
        );
        // empty endolymph over non-empty vestibule
        let zero = area_elr(&Array2::zeros((10, 10)), &vest, 0.25, 0.25).unwrap();
        assert_eq!(zero, 0.0);
        // equal physical areas -> 100 even with different pixel sizes
        let r = area_elr(&endo, &endo, 0.5, 0.5).unwrap();
        assert_eq!(r, 100.0);
    }

    #[test]
    fn vsi_identity_symmetry_and_paper_aggregates() {
        assert_eq!(vsi(5.0, 5.0), 100.0);
        assert_eq!(vsi(0.0, 3.0), 0.0);
        assert!((vsi(92.51, 69.54) - 85.83).abs() < 0.01);
        assert!((vsi(87.00, 69.54) - 88.85).abs() < 0.01);
        for (a, b) in [(1.0, 9.0), (12.5, 3.25)] {
            assert!((vsi(a, b) - vsi(b, a)).abs() < 1e-12);
        }
        assert_eq!(vsi(0.0, 0.0), 100.0);
    }

    #[test]
    fn segmentation_metric_hand_case_and_degenerate_inputs() {
        // |X|=6, |Y|=4, |X∩Y|=3
        let pred = array![[1u8, 1, 1, 1, 1, 1, 0, 0, 0, 0]];
        let truth = array![[1u8, 1, 1, 0, 0, 0, 1, 0, 0, 0]];
        let m = segmentation_metrics(&pred, &truth).unwrap();
        assert!((m.dsc - 0.6).abs() < 1e-12);
        assert!((m.iou - 3.0 / 7.0).abs() < 1e-12);
        assert!((m.recall - 0.75).abs() < 1e-12);

        let empty = Array2::<u8>::zeros((3, 3));
        let m = segmentation_metrics(&empty, &empty).unwrap();
        assert_eq!(m, SegMetrics { dsc: 1.0, iou: 1.0, recall: 1.0 });

        let a = array![[1u8, 1, 0, 0]];
        let b = array![[0u8, 0, 1, 1]];
        let m = segmentation_metrics(&a, &b).unwrap();
        assert_eq!(m, SegMetrics { dsc: 0.0, iou: 0.0, recall: 0.0 });

        assert!(segmentation_metrics(&Array2::<u8>::zeros((2, 2)), &Array2::zeros((2, 3)))
            .is_err());
    }

    proptest! {
        #[test]
        fn iou_dsc_identity_on_random_masks(bits in proptest::collection::vec(0u8..2, 32)) {
            let pred = Array2::from_shape_vec((4, 8), bits.clone()).unwrap();
            let truth = Array2::from_shape_vec(
                (4, 8),
                bits.iter().map(|&b| b ^ u8::from(b == 1 && bits[0] == 1)).collect(),
            )
            .unwrap();
            let m = segmentation_metrics(&pred, &truth).unwrap();
            let expected_iou = m.dsc / (2.0 - m.dsc);
            prop_assert!((m.iou - expected_iou).abs() < 1e-9);
        }

        #[test]
        fn vsi_bounds(a in 0.0f64..500.0, b in 0.0f64..500.0) {
            let v = vsi(a, b);
            prop_assert!((0.0..=100.0 + 1e-9).contains(&v));
        }
    }
}
