//! Greedy per-class non-maximum suppression.

use super::boxes::{iou, NormalizedBox};

/// Keep a detection iff it does not overlap (IoU ≥ `iou_thr`) any
/// already-kept detection of the same class with higher priority.
/// Priority is confidence descending, ties broken by smaller input index.
pub fn nms(dets: &[NormalizedBox], iou_thr: f64) -> Vec<NormalizedBox> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<NormalizedBox> = Vec::new();
    for &i in &order {
        let candidate = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.side == candidate.side && iou(k, candidate) >= iou_thr);
        if !suppressed {
            kept.push(*candidate);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auribox::Side;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(side: Side, x: f64, y: f64, s: f64, conf: f64) -> NormalizedBox {
        NormalizedBox::new(side, x, y, s, s, conf).unwrap()
    }

    /// Reference implementation: find the unique subset S such that each box
    /// is in S iff no higher-priority member of S of the same class overlaps
    /// it. Checked by brute force over all subsets.
    fn brute_force_nms(dets: &[NormalizedBox], thr: f64) -> Vec<NormalizedBox> {
        let n = dets.len();
        assert!(n <= 16);
        let mut priority: Vec<usize> = (0..n).collect();
        priority.sort_by(|&a, &b| {
            dets[b]
                .confidence
                .partial_cmp(&dets[a].confidence)
                .unwrap()
                .then(a.cmp(&b))
        });
        let rank: Vec<usize> = {
            let mut r = vec![0; n];
            for (pos, &i) in priority.iter().enumerate() {
                r[i] = pos;
            }
            r
        };
        'subsets: for mask in 0u32..(1 << n) {
            for i in 0..n {
                let in_s = mask & (1 << i) != 0;
                let blocked = (0..n).any(|j| {
                    j != i
                        && mask & (1 << j) != 0
                        && rank[j] < rank[i]
                        && dets[j].side == dets[i].side
                        && iou(&dets[j], &dets[i]) >= thr
                });
                // membership must equal "not blocked by a kept higher-priority box"
                if in_s == blocked {
                    continue 'subsets;
                }
            }
            let mut out: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            out.sort_by_key(|&i| rank[i]);
            return out.into_iter().map(|i| dets[i]).collect();
        }
        unreachable!("greedy-consistent subset always exists");
    }

    #[test]
    fn single_detection_passes_through() {
        let d = vec![bx(Side::Left, 0.5, 0.5, 0.2, 0.9)];
        assert_eq!(nms(&d, 0.45), d);
    }

    #[test]
    fn overlapping_same_class_keeps_most_confident() {
        let d = vec![
            bx(Side::Left, 0.50, 0.5, 0.2, 0.6),
            bx(Side::Left, 0.51, 0.5, 0.2, 0.8),
        ];
        let kept = nms(&d, 0.45);
        assert_eq!(kept.len(), 1);
        assert!((kept[0].confidence - 0.8).abs() < 1e-12);
    }

    #[test]
    fn different_classes_do_not_suppress_each_other() {
        let d = vec![
            bx(Side::Left, 0.5, 0.5, 0.2, 0.9),
            bx(Side::Right, 0.5, 0.5, 0.2, 0.8),
        ];
        assert_eq!(nms(&d, 0.45).len(), 2);
    }

    #[test]
    fn matches_brute_force_oracle_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for scene in 0..200 {
            let n = rng.gen_range(0..=8);
            let dets: Vec<NormalizedBox> = (0..n)
                .map(|_| {
                    bx(
                        if rng.gen_bool(0.5) { Side::Left } else { Side::Right },
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.2..0.8),
                        rng.gen_range(0.05..0.3),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect();
            let fast = nms(&dets, 0.45);
            let slow = brute_force_nms(&dets, 0.45);
            assert_eq!(fast.len(), slow.len(), "scene {scene}");
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert_eq!(a, b, "scene {scene}");
            }
        }
    }

    #[test]
    fn output_is_subset_with_no_internal_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let dets: Vec<NormalizedBox> = (0..6)
                .map(|_| {
                    bx(
                        Side::Left,
                        rng.gen_range(0.3..0.7),
                        rng.gen_range(0.3..0.7),
                        rng.gen_range(0.1..0.3),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect();
            let kept = nms(&dets, 0.45);
            for k in &kept {
                assert!(dets.iter().any(|d| d == k));
            }
            for i in 0..kept.len() {
                for j in i + 1..kept.len() {
                    if kept[i].side == kept[j].side {
                        assert!(iou(&kept[i], &kept[j]) < 0.45);
                    }
                }
            }
        }
    }
}
