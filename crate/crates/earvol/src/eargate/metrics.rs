//! Binary classification metrics (positive class = ear).

use super::{EarGateError, LabelSequence};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Standard binary metrics over paired label sequences.
///
/// Precision and recall are 0 when their denominators vanish; F1 is 0 when
/// precision + recall is 0.
pub fn classification_metrics(
    pred: &[LabelSequence],
    truth: &[LabelSequence],
) -> Result<ClassificationMetrics, EarGateError> {
    if pred.len() != truth.len() {
        return Err(EarGateError::ShapeMismatch(pred.len(), truth.len()));
    }
    let (mut tp, mut fp, mut fne, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (p, t) in pred.iter().zip(truth.iter()) {
        if p.len() != t.len() {
            return Err(EarGateError::ShapeMismatch(p.len(), t.len()));
        }
        for (&pi, &ti) in p.0.iter().zip(t.0.iter()) {
            match (pi, ti) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fne += 1,
                _ => tn += 1,
            }
        }
    }
    let total = (tp + fp + fne + tn) as f64;
    let accuracy = if total > 0.0 {
        (tp + tn) as f64 / total
    } else {
        0.0
    };
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fne > 0 {
        tp as f64 / (tp + fne) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ClassificationMetrics {
        accuracy,
        precision,
        recall,
        f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(v: Vec<u8>) -> LabelSequence {
        LabelSequence::new(v).unwrap()
    }

    #[test]
    fn perfect_prediction_is_all_ones() {
        let t = vec![seq(vec![0, 1, 1, 0]), seq(vec![1, 0])];
        let m = classification_metrics(&t, &t).unwrap();
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn all_negative_prediction_has_zero_recall_and_f1() {
        let p = vec![seq(vec![0, 0, 0, 0])];
        let t = vec![seq(vec![0, 1, 1, 0])];
        let m = classification_metrics(&p, &t).unwrap();
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn hand_counted_confusion_matrix() {
        // TP=8, FP=2, FN=2, TN=88 over a 100-slice batch
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        pred.extend(std::iter::repeat(1).take(8)); // TP
        truth.extend(std::iter::repeat(1).take(8));
        pred.extend(std::iter::repeat(1).take(2)); // FP
        truth.extend(std::iter::repeat(0).take(2));
        pred.extend(std::iter::repeat(0).take(2)); // FN
        truth.extend(std::iter::repeat(1).take(2));
        pred.extend(std::iter::repeat(0).take(88)); // TN
        truth.extend(std::iter::repeat(0).take(88));
        let m = classification_metrics(&[seq(pred)], &[seq(truth)]).unwrap();
        assert!((m.precision - 0.8).abs() < 1e-12);
        assert!((m.recall - 0.8).abs() < 1e-12);
        assert!((m.f1 - 0.8).abs() < 1e-12);
        assert!((m.accuracy - 0.96).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let p = vec![seq(vec![0, 1])];
        let t = vec![seq(vec![0, 1, 0])];
        assert!(classification_metrics(&p, &t).is_err());
    }
}
