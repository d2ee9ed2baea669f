//! Classification objectives on two-class logits.
//!
//! The slice classifier ends in a two-logit head; these helpers compute the
//! batch loss and the gradient with respect to the logits for the four
//! configurations the training harness compares. All reductions are means
//! over the batch; class weights multiply each sample's term (so weights
//! [1, 2] exactly double the positive-class contribution).

use ndarray::Array2;

const LOG_CLAMP: f32 = 1e-7;

/// Classifier objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClsLoss {
    CrossEntropy,
    /// Per-class weights `[w_negative, w_positive]`.
    WeightedCe([f32; 2]),
    /// Binary focal loss applied to the softmax probability of class 1.
    MultiFocal { alpha: f32, gamma: f32 },
    /// Binary cross-entropy on the logit margin z1 − z0. For a two-class
    /// softmax this coincides with plain cross-entropy; kept as a separate
    /// configuration label.
    BceLogits,
}

impl ClsLoss {
    pub fn label(&self) -> &'static str {
        match self {
            ClsLoss::CrossEntropy => "ce",
            ClsLoss::WeightedCe(_) => "weighted_ce",
            ClsLoss::MultiFocal { .. } => "multi_focal",
            ClsLoss::BceLogits => "bce_logits",
        }
    }

    pub fn parse(s: &str) -> Option<ClsLoss> {
        match s {
            "ce" => Some(ClsLoss::CrossEntropy),
            "weighted_ce" => Some(ClsLoss::WeightedCe([1.0, 2.0])),
            "multi_focal" => Some(ClsLoss::MultiFocal {
                alpha: 0.25,
                gamma: 2.0,
            }),
            "bce_logits" => Some(ClsLoss::BceLogits),
            _ => None,
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f32>) -> Array2<f32> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Batch loss and ∂L/∂logits for two-class logits (N × 2).
pub fn cls_loss_and_grad(
    loss: &ClsLoss,
    logits: &Array2<f32>,
    labels: &[u8],
) -> (f32, Array2<f32>) {
    assert_eq!(logits.ncols(), 2, "two-class logits expected");
    assert_eq!(logits.nrows(), labels.len());
    let n = labels.len() as f32;
    let probs = softmax_rows(logits);
    let mut grad = Array2::<f32>::zeros(logits.raw_dim());
    let mut total = 0.0f32;
    match loss {
        ClsLoss::CrossEntropy | ClsLoss::BceLogits => {
            for (i, &y) in labels.iter().enumerate() {
                let py = probs[[i, y as usize]].max(LOG_CLAMP);
                total -= py.ln();
                for c in 0..2 {
                    let target = f32::from(c == y as usize);
                    grad[[i, c]] = (probs[[i, c]] - target) / n;
                }
            }
        }
        ClsLoss::WeightedCe(w) => {
            for (i, &y) in labels.iter().enumerate() {
                let wy = w[y as usize];
                let py = probs[[i, y as usize]].max(LOG_CLAMP);
                total -= wy * py.ln();
                for c in 0..2 {
                    let target = f32::from(c == y as usize);
                    grad[[i, c]] = wy * (probs[[i, c]] - target) / n;
                }
            }
        }
        ClsLoss::MultiFocal { alpha, gamma } => {
            let (a, g) = (*alpha, *gamma);
            for (i, &y) in labels.iter().enumerate() {
                let p1 = probs[[i, 1]].clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                let q1 = 1.0 - p1;
                // loss term and d/dp1
                let (term, dp1) = if y == 1 {
                    let term = -a * q1.powf(g) * p1.ln();
                    let d = if g == 0.0 {
                        -a / p1
                    } else {
                        -a * (q1.powf(g) / p1 - g * q1.powf(g - 1.0) * p1.ln())
                    };
                    (term, d)
                } else {
                    let term = -(1.0 - a) * p1.powf(g) * q1.ln();
                    let d = if g == 0.0 {
                        (1.0 - a) / q1
                    } else {
                        -(1.0 - a) * (g * p1.powf(g - 1.0) * q1.ln() - p1.powf(g) / q1)
                    };
                    (term, d)
                };
                total += term;
                // p1 = softmax(z)[1]: dp1/dz1 = p1 q1, dp1/dz0 = -p1 q1
                let dz = dp1 * p1 * q1 / n;
                grad[[i, 1]] = dz;
                grad[[i, 0]] = -dz;
            }
        }
    }
    (total / n, grad)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Array2<f32>, labels: &[u8]) -> f64 {
    let mut hits = 0usize;
    for (row, &y) in logits.outer_iter().zip(labels.iter()) {
        let pred = u8::from(row[1] > row[0]);
        if pred == y {
            hits += 1;
        }
    }
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_grad(loss: &ClsLoss, logits: &Array2<f32>, labels: &[u8]) -> Array2<f32> {
        let eps = 1e-3f32;
        let mut g = Array2::zeros(logits.raw_dim());
        for i in 0..logits.nrows() {
            for c in 0..2 {
                let mut lp = logits.clone();
                lp[[i, c]] += eps;
                let mut lm = logits.clone();
                lm[[i, c]] -= eps;
                let (vp, _) = cls_loss_and_grad(loss, &lp, labels);
                let (vm, _) = cls_loss_and_grad(loss, &lm, labels);
                g[[i, c]] = (vp - vm) / (2.0 * eps);
            }
        }
        g
    }

    #[test]
    fn all_losses_match_finite_differences() {
        let logits = array![[0.3f32, -0.2], [1.4, 0.9], [-0.5, 0.7], [0.1, 0.0]];
        let labels = [1u8, 0, 1, 0];
        for loss in [
            ClsLoss::CrossEntropy,
            ClsLoss::WeightedCe([1.0, 2.0]),
            ClsLoss::MultiFocal {
                alpha: 0.25,
                gamma: 2.0,
            },
            ClsLoss::BceLogits,
        ] {
            let (_, g) = cls_loss_and_grad(&loss, &logits, &labels);
            let fd = fd_grad(&loss, &logits, &labels);
            for (a, b) in g.iter().zip(fd.iter()) {
                assert!((a - b).abs() < 1e-3, "{loss:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn weighted_ce_doubles_positive_contribution() {
        // balanced two-sample batch; weights [1, 2] double the positive term
        let logits = array![[0.8f32, -0.3], [-0.1, 0.4]];
        let labels = [0u8, 1];
        let probs = softmax_rows(&logits);
        let l0 = -probs[[0, 0]].ln();
        let l1 = -probs[[1, 1]].ln();
        let (unweighted, _) = cls_loss_and_grad(&ClsLoss::CrossEntropy, &logits, &labels);
        let (weighted, _) =
            cls_loss_and_grad(&ClsLoss::WeightedCe([1.0, 2.0]), &logits, &labels);
        assert!((unweighted - (l0 + l1) / 2.0).abs() < 1e-6);
        assert!((weighted - (l0 + 2.0 * l1) / 2.0).abs() < 1e-6);
        // positive-class contribution exactly doubled
        assert!(((weighted - unweighted) - l1 / 2.0).abs() < 1e-6);
    }

    #[test]
    fn bce_logits_equals_cross_entropy_for_two_classes() {
        let logits = array![[0.3f32, -1.2], [2.0, 0.4], [-0.6, 0.1]];
        let labels = [0u8, 1, 1];
        let (a, ga) = cls_loss_and_grad(&ClsLoss::CrossEntropy, &logits, &labels);
        let (b, gb) = cls_loss_and_grad(&ClsLoss::BceLogits, &logits, &labels);
        assert!((a - b).abs() < 1e-7);
        for (x, y) in ga.iter().zip(gb.iter()) {
            assert!((x - y).abs() < 1e-7);
        }
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits = array![[2.0f32, 1.0], [0.0, 1.0], [3.0, -1.0]];
        assert!((accuracy(&logits, &[0, 1, 1]) - 2.0 / 3.0).abs() < 1e-9);
    }
}
