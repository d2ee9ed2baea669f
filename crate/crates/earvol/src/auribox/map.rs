//! Detection evaluation: mAP@IoU plus precision/recall at a confidence
//! operating point.

use super::boxes::{iou, NormalizedBox, Side};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionMetrics {
    /// Mean AP over classes with ground truth, matched at the eval IoU.
    pub map: f64,
    /// Micro-averaged precision at the confidence operating point.
    pub precision: f64,
    /// Micro-averaged recall at the confidence operating point.
    pub recall: f64,
    pub ap_per_class: [f64; 2],
}

/// Compute mAP (all-points interpolated PR curve) and the operating-point
/// precision/recall.
///
/// `preds[i]` and `gts[i]` refer to the same image. Predictions are matched
/// greedily in confidence order to the best unmatched ground-truth box of
/// the same class in the same image with IoU ≥ `eval_iou`.
pub fn map_at_50(
    preds: &[Vec<NormalizedBox>],
    gts: &[Vec<NormalizedBox>],
    eval_iou: f64,
    conf_operating_point: f64,
) -> DetectionMetrics {
    assert_eq!(preds.len(), gts.len(), "image lists must align");
    let mut ap_per_class = [0.0f64; 2];
    let mut classes_with_gt = 0usize;
    let mut map_sum = 0.0;

    // operating-point counters (micro over classes)
    let mut op_tp = 0usize;
    let mut op_pred = 0usize;
    let mut total_gt = 0usize;

    for side in Side::BOTH {
        let outcome = evaluate_class(preds, gts, side, eval_iou);
        let n_gt = outcome.n_gt;
        total_gt += n_gt;
        if n_gt > 0 {
            classes_with_gt += 1;
            map_sum += outcome.ap;
        }
        ap_per_class[side.class_id()] = outcome.ap;
        for &(conf, is_tp) in &outcome.matches {
            if conf >= conf_operating_point {
                op_pred += 1;
                if is_tp {
                    op_tp += 1;
                }
            }
        }
    }

    DetectionMetrics {
        map: if classes_with_gt > 0 {
            map_sum / classes_with_gt as f64
        } else {
            0.0
        },
        precision: if op_pred > 0 {
            op_tp as f64 / op_pred as f64
        } else {
            0.0
        },
        recall: if total_gt > 0 {
            op_tp as f64 / total_gt as f64
        } else {
            0.0
        },
        ap_per_class,
    }
}

struct ClassOutcome {
    ap: f64,
    n_gt: usize,
    /// (confidence, matched) per prediction, confidence-descending.
    matches: Vec<(f64, bool)>,
}

fn evaluate_class(
    preds: &[Vec<NormalizedBox>],
    gts: &[Vec<NormalizedBox>],
    side: Side,
    eval_iou: f64,
) -> ClassOutcome {
    // flatten predictions with their image index
    let mut flat: Vec<(usize, NormalizedBox)> = Vec::new();
    for (img, boxes) in preds.iter().enumerate() {
        for b in boxes.iter().filter(|b| b.side == side) {
            flat.push((img, *b));
        }
    }
    flat.sort_by(|a, b| {
        b.1.confidence
            .partial_cmp(&a.1.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });

    let gt_of_img: Vec<Vec<&NormalizedBox>> = gts
        .iter()
        .map(|boxes| boxes.iter().filter(|b| b.side == side).collect())
        .collect();
    let n_gt: usize = gt_of_img.iter().map(|v| v.len()).sum();
    let mut taken: Vec<Vec<bool>> = gt_of_img.iter().map(|v| vec![false; v.len()]).collect();

    let mut matches = Vec::with_capacity(flat.len());
    let mut tp_cum = 0usize;
    let mut pr_points: Vec<(f64, f64)> = Vec::with_capacity(flat.len()); // (recall, precision)
    for (rank, (img, pbox)) in flat.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gbox) in gt_of_img[*img].iter().enumerate() {
            if taken[*img][gi] {
                continue;
            }
            let overlap = iou(pbox, gbox);
            if overlap >= eval_iou && best.map(|(_, b)| overlap > b).unwrap_or(true) {
                best = Some((gi, overlap));
            }
        }
        let is_tp = if let Some((gi, _)) = best {
            taken[*img][gi] = true;
            tp_cum += 1;
            true
        } else {
            false
        };
        matches.push((pbox.confidence, is_tp));
        if n_gt > 0 {
            pr_points.push((
                tp_cum as f64 / n_gt as f64,
                tp_cum as f64 / (rank + 1) as f64,
            ));
        }
    }

    ClassOutcome {
        ap: interpolated_ap(&pr_points),
        n_gt,
        matches,
    }
}

/// Area under the monotonically-interpolated precision-recall curve
/// (all-points interpolation).
fn interpolated_ap(pr: &[(f64, f64)]) -> f64 {
    if pr.is_empty() {
        return 0.0;
    }
    let mut envelope: Vec<(f64, f64)> = pr.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for &(r, p) in &envelope {
        if r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = r;
        }
    }
    ap
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(side: Side, x: f64, conf: f64) -> NormalizedBox {
        NormalizedBox::new(side, x, 0.5, 0.1, 0.1, conf).unwrap()
    }

    #[test]
    fn perfect_detections_score_one() {
        let gts = vec![
            vec![bx(Side::Left, 0.3, 1.0), bx(Side::Right, 0.7, 1.0)],
            vec![bx(Side::Left, 0.4, 1.0)],
        ];
        let preds = vec![
            vec![bx(Side::Left, 0.3, 1.0), bx(Side::Right, 0.7, 1.0)],
            vec![bx(Side::Left, 0.4, 1.0)],
        ];
        let m = map_at_50(&preds, &gts, 0.5, 0.3);
        assert!((m.map - 1.0).abs() < 1e-12);
        assert!((m.precision - 1.0).abs() < 1e-12);
        assert!((m.recall - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_predictions_scores_zero() {
        let gts = vec![vec![bx(Side::Left, 0.3, 1.0)]];
        let preds = vec![vec![]];
        let m = map_at_50(&preds, &gts, 0.5, 0.3);
        assert_eq!(m.map, 0.0);
        assert_eq!(m.recall, 0.0);
    }

    #[test]
    fn hand_computed_toy_ap() {
        // one class, 3 GT in separate images, 4 predictions T/F/T/F by
        // descending confidence -> AP = 1*(1/3) + (2/3)*(1/3) = 0.5556
        let gts = vec![
            vec![bx(Side::Left, 0.2, 1.0)],
            vec![bx(Side::Left, 0.5, 1.0)],
            vec![bx(Side::Left, 0.8, 1.0)],
            vec![],
            vec![],
        ];
        let preds = vec![
            vec![bx(Side::Left, 0.2, 0.9)],  // T
            vec![bx(Side::Left, 0.5, 0.7)],  // T (conf .7)
            vec![],
            vec![bx(Side::Left, 0.35, 0.8)], // F (no gt in image)
            vec![bx(Side::Left, 0.65, 0.6)], // F
        ];
        let m = map_at_50(&preds, &gts, 0.5, 0.3);
        assert!((m.map - 0.5556).abs() < 1e-3, "map {}", m.map);
        // operating point 0.3 admits all four predictions: P=2/4, R=2/3
        assert!((m.precision - 0.5).abs() < 1e-12);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_confidence_false_positive_never_raises_map() {
        let gts = vec![vec![bx(Side::Left, 0.3, 1.0)], vec![]];
        let preds_clean = vec![vec![bx(Side::Left, 0.3, 0.9)], vec![]];
        let mut preds_noisy = preds_clean.clone();
        preds_noisy[1].push(bx(Side::Left, 0.8, 0.0));
        let clean = map_at_50(&preds_clean, &gts, 0.5, 0.3);
        let noisy = map_at_50(&preds_noisy, &gts, 0.5, 0.3);
        assert!(noisy.map <= clean.map + 1e-12);
    }

    #[test]
    fn map_stays_in_unit_interval() {
        let gts = vec![vec![bx(Side::Left, 0.3, 1.0), bx(Side::Right, 0.6, 1.0)]];
        let preds = vec![vec![
            bx(Side::Left, 0.31, 0.8),
            bx(Side::Right, 0.9, 0.7),
            bx(Side::Left, 0.7, 0.6),
        ]];
        let m = map_at_50(&preds, &gts, 0.5, 0.3);
        assert!((0.0..=1.0).contains(&m.map));
        assert!((0.0..=1.0).contains(&m.precision));
        assert!((0.0..=1.0).contains(&m.recall));
    }
}
