//! Detector training: anchor fitting, the single-scale detection loss, and
//! the patient-level cross-validation harness (same structure as the slice
//! classifier's).

use super::augment::{mosaic_tile, random_perspective, random_scale_crop};
use super::boxes::{iou, NormalizedBox, Side};
use super::detector::{
    detect_ears, fill_input, sigmoid, CompactDetector, DetectorConfig, ANCHOR_FIELDS,
    INPUT_CHANNELS, N_ANCHORS,
};
use super::map::{map_at_50, DetectionMetrics};
use super::AuriBoxError;
use crate::data::{patient_folds, Modality, SplitError};
use crate::nn::{EarlyStopper, Optimizer, PlateauScheduler, Sgd};
use crate::rng::derive_seed;
use ndarray::{Array2, Array4};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAMBDA_COORD: f32 = 5.0;
const LAMBDA_OBJ: f32 = 1.0;
const LAMBDA_NOOBJ: f32 = 0.5;
const LAMBDA_CLS: f32 = 1.0;
const GRAD_CLIP: f32 = 10.0;

/// One training image with its ground-truth boxes (empty for negatives).
#[derive(Debug, Clone)]
pub struct DetectorSample {
    pub patient_id: String,
    pub image: Array2<f32>,
    pub boxes: Vec<NormalizedBox>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideAccuracy {
    pub side: Side,
    pub tp: usize,
    pub missed: usize,
}

impl SideAccuracy {
    pub fn accuracy(&self) -> f64 {
        let total = self.tp + self.missed;
        if total == 0 {
            1.0
        } else {
            self.tp as f64 / total as f64
        }
    }
}

pub struct DetectorFoldOutcome {
    pub fold: usize,
    pub model: CompactDetector,
    pub metrics: DetectionMetrics,
    pub side_accuracy: [SideAccuracy; 2],
    pub val_patients: Vec<String>,
    pub epochs_run: usize,
}

pub struct DetectorTrainReport {
    pub folds: Vec<DetectorFoldOutcome>,
}

/// Fit `k` anchor shapes to normalized (w, h) pairs with Lloyd's algorithm.
/// Degenerate inputs (fewer distinct shapes than k) are padded with scaled
/// copies so the anchor list always has k entries.
pub fn kmeans_anchors(shapes: &[(f64, f64)], k: usize) -> Vec<(f64, f64)> {
    assert!(k >= 1);
    if shapes.is_empty() {
        return (0..k)
            .map(|i| {
                let s = 0.1 + 0.05 * i as f64;
                (s, s)
            })
            .collect();
    }
    let mut sorted: Vec<(f64, f64)> = shapes.to_vec();
    sorted.sort_by(|a, b| (a.0 * a.1).partial_cmp(&(b.0 * b.1)).unwrap());
    // deterministic quantile init
    let mut centers: Vec<(f64, f64)> = (0..k)
        .map(|i| sorted[(i * (sorted.len() - 1)) / k.max(1)])
        .collect();
    for _ in 0..25 {
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); k];
        for &(w, h) in shapes {
            let nearest = (0..k)
                .min_by(|&a, &b| {
                    let da = (centers[a].0 - w).powi(2) + (centers[a].1 - h).powi(2);
                    let db = (centers[b].0 - w).powi(2) + (centers[b].1 - h).powi(2);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            sums[nearest].0 += w;
            sums[nearest].1 += h;
            sums[nearest].2 += 1;
        }
        for (c, s) in centers.iter_mut().zip(sums.iter()) {
            if s.2 > 0 {
                *c = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
    }
    centers.sort_by(|a, b| (a.0 * a.1).partial_cmp(&(b.0 * b.1)).unwrap());
    // collapsed clusters (uniform box sizes) are spread into a growing ladder
    for i in 1..k {
        let prev_area = centers[i - 1].0 * centers[i - 1].1;
        let area = centers[i].0 * centers[i].1;
        if area <= prev_area * (1.0 + 1e-9) {
            centers[i] = (
                (centers[i - 1].0 * 1.25).min(1.0),
                (centers[i - 1].1 * 1.25).min(1.0),
            );
        }
    }
    centers
}

struct Assigned {
    anchor: usize,
    gi: usize,
    gj: usize,
    tx: f32,
    ty: f32,
    tw: f32,
    th: f32,
    class: usize,
}

fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

fn assign_targets(boxes: &[NormalizedBox], anchors: &[(f64, f64)], grid: usize) -> Vec<Assigned> {
    boxes
        .iter()
        .map(|b| {
            let gj = ((b.x_center * grid as f64) as usize).min(grid - 1);
            let gi = ((b.y_center * grid as f64) as usize).min(grid - 1);
            let anchor = (0..anchors.len())
                .max_by(|&i, &j| {
                    shape_iou((b.width, b.height), anchors[i])
                        .partial_cmp(&shape_iou((b.width, b.height), anchors[j]))
                        .unwrap()
                })
                .unwrap();
            Assigned {
                anchor,
                gi,
                gj,
                tx: (b.x_center * grid as f64 - gj as f64) as f32,
                ty: (b.y_center * grid as f64 - gi as f64) as f32,
                tw: (b.width / anchors[anchor].0).ln() as f32,
                th: (b.height / anchors[anchor].1).ln() as f32,
                class: b.side.class_id(),
            }
        })
        .collect()
}

/// Detection loss over a batch of raw head outputs; returns the scalar loss
/// and ∂L/∂head.
///
/// Positive slots get coordinate regression (σ(tx/ty) and log-size),
/// objectness toward 1 and a class term; all other anchor slots at a target
/// cell are ignored, and every remaining slot gets down-weighted objectness
/// toward 0.
fn detection_loss(
    out: &Array4<f32>,
    targets: &[Vec<Assigned>],
    grid: usize,
) -> (f32, Array4<f32>) {
    let n = out.shape()[0];
    let mut grad = Array4::<f32>::zeros(out.raw_dim());
    let inv_n = 1.0 / n as f32;
    let mut loss = 0.0f32;
    for (i, assigned) in targets.iter().enumerate() {
        // obj targets: 0 everywhere, positives 1, sister anchors ignored
        let mut cell_state = vec![0u8; N_ANCHORS * grid * grid]; // 0 neg, 1 ignore, 2 pos
        for t in assigned {
            for a in 0..N_ANCHORS {
                cell_state[(a * grid + t.gi) * grid + t.gj] = 1;
            }
        }
        for t in assigned {
            cell_state[(t.anchor * grid + t.gi) * grid + t.gj] = 2;
        }
        for a in 0..N_ANCHORS {
            let base = a * ANCHOR_FIELDS;
            for gi in 0..grid {
                for gj in 0..grid {
                    let state = cell_state[(a * grid + gi) * grid + gj];
                    if state == 1 {
                        continue;
                    }
                    let t_obj = out[[i, base + 4, gi, gj]];
                    let p_obj = sigmoid(t_obj);
                    let (target, weight) = if state == 2 {
                        (1.0f32, LAMBDA_OBJ)
                    } else {
                        (0.0f32, LAMBDA_NOOBJ)
                    };
                    // bce with logits: softplus(t) - target*t
                    let softplus = if t_obj > 0.0 {
                        t_obj + (1.0 + (-t_obj).exp()).ln()
                    } else {
                        (1.0 + t_obj.exp()).ln()
                    };
                    loss += weight * (softplus - target * t_obj) * inv_n;
                    grad[[i, base + 4, gi, gj]] += weight * (p_obj - target) * inv_n;
                }
            }
        }
        for t in assigned {
            let base = t.anchor * ANCHOR_FIELDS;
            let (gi, gj) = (t.gi, t.gj);
            // center offsets through the sigmoid
            for (f, target) in [(0, t.tx), (1, t.ty)] {
                let raw = out[[i, base + f, gi, gj]];
                let s = sigmoid(raw);
                let d = s - target;
                loss += LAMBDA_COORD * d * d * inv_n;
                grad[[i, base + f, gi, gj]] += LAMBDA_COORD * 2.0 * d * s * (1.0 - s) * inv_n;
            }
            // log-size offsets, plain squared error
            for (f, target) in [(2, t.tw), (3, t.th)] {
                let raw = out[[i, base + f, gi, gj]];
                let d = raw - target;
                loss += LAMBDA_COORD * d * d * inv_n;
                grad[[i, base + f, gi, gj]] += LAMBDA_COORD * 2.0 * d * inv_n;
            }
            // two-class softmax cross-entropy
            let c0 = out[[i, base + 5, gi, gj]];
            let c1 = out[[i, base + 6, gi, gj]];
            let m = c0.max(c1);
            let e0 = (c0 - m).exp();
            let e1 = (c1 - m).exp();
            let z = e0 + e1;
            let p = [e0 / z, e1 / z];
            loss -= LAMBDA_CLS * p[t.class].max(1e-7).ln() * inv_n;
            for c in 0..2 {
                let target = f32::from(c == t.class);
                grad[[i, base + 5 + c, gi, gj]] += LAMBDA_CLS * (p[c] - target) * inv_n;
            }
        }
    }
    (loss, grad)
}

/// Train one detector per fold with patient-level cross validation.
/// `cfg.folds == 1` trains and evaluates on the full set.
pub fn train_detector(
    samples: &[DetectorSample],
    cfg: &DetectorConfig,
    modality: Modality,
) -> Result<DetectorTrainReport, AuriBoxError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(AuriBoxError::InsufficientPatients { needed: 1, got: 0 });
    }
    let patients: Vec<String> = samples.iter().map(|s| s.patient_id.clone()).collect();
    let fold_sets: Vec<Vec<String>> = if cfg.folds <= 1 {
        vec![Vec::new()]
    } else {
        patient_folds(&patients, cfg.folds, cfg.seed).map_err(|e| match e {
            SplitError::InsufficientPatients { needed, got } => {
                AuriBoxError::InsufficientPatients { needed, got }
            }
            SplitError::BadPartition(msg) => AuriBoxError::ConfigError(msg),
        })?
    };

    let limit = cfg.limit_folds.unwrap_or(usize::MAX).max(1);
    let mut folds = Vec::new();
    for (fold, val_patients) in fold_sets.iter().enumerate().take(limit) {
        let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = if val_patients.is_empty() {
            ((0..samples.len()).collect(), (0..samples.len()).collect())
        } else {
            let in_val = |s: &DetectorSample| val_patients.contains(&s.patient_id);
            (
                (0..samples.len()).filter(|&i| !in_val(&samples[i])).collect(),
                (0..samples.len()).filter(|&i| in_val(&samples[i])).collect(),
            )
        };
        let outcome = train_one_fold(samples, &train_idx, &val_idx, cfg, modality, fold)?;
        folds.push(DetectorFoldOutcome {
            fold,
            val_patients: val_patients.clone(),
            ..outcome
        });
    }
    Ok(DetectorTrainReport { folds })
}

fn train_one_fold(
    samples: &[DetectorSample],
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &DetectorConfig,
    modality: Modality,
    fold: usize,
) -> Result<DetectorFoldOutcome, AuriBoxError> {
    // anchors come from the training boxes only
    let shapes: Vec<(f64, f64)> = train_idx
        .iter()
        .flat_map(|&i| samples[i].boxes.iter().map(|b| (b.width, b.height)))
        .collect();
    let anchors_vec = kmeans_anchors(&shapes, N_ANCHORS);
    let anchors = [anchors_vec[0], anchors_vec[1], anchors_vec[2]];

    let mut model = CompactDetector::new(
        cfg.input_size,
        cfg.channels,
        anchors,
        derive_seed(cfg.seed, &[30, fold as u64]),
    );
    model.modality = Some(modality);
    let grid = model.grid();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut plateau = PlateauScheduler::new(cfg.lr_factor, cfg.lr_plateau_patience);
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);

    let mut epochs_run = 0;
    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        let mut order: Vec<usize> = train_idx.to_vec();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[31, fold as u64, epoch as u64]));
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut tensors = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut arng = ChaCha8Rng::seed_from_u64(derive_seed(
                    cfg.seed,
                    &[32, fold as u64, epoch as u64, i as u64],
                ));
                let (image, boxes) = augment_sample(samples, train_idx, i, cfg, &mut arng);
                tensors.push(image);
                targets.push(assign_targets(&boxes, &anchors, grid));
            }
            let x = stack(&tensors, cfg.input_size);
            let out = model.forward_train(x);
            let (_, grad) = detection_loss(&out, &targets, grid);
            model.zero_grads();
            model.backward(grad);
            let mut params = model.params_mut();
            crate::nn::clip_grad_norm(&mut params, GRAD_CLIP);
            opt.step(&mut params);
        }
        let val_loss = eval_loss(&model, samples, val_idx, cfg, grid);
        plateau.observe(val_loss, &mut opt);
        if stopper.observe(val_loss) {
            break;
        }
    }

    // held-out detection quality
    let mut preds: Vec<Vec<NormalizedBox>> = Vec::with_capacity(val_idx.len());
    let mut gts: Vec<Vec<NormalizedBox>> = Vec::with_capacity(val_idx.len());
    for &i in val_idx {
        preds.push(detect_ears(&model, &samples[i].image, cfg));
        gts.push(samples[i].boxes.clone());
    }
    let metrics = map_at_50(&preds, &gts, cfg.eval_iou, cfg.conf_threshold);
    let side_accuracy = per_side_accuracy(&preds, &gts, cfg.eval_iou);

    Ok(DetectorFoldOutcome {
        fold: 0,
        model,
        metrics,
        side_accuracy,
        val_patients: Vec::new(),
        epochs_run,
    })
}

fn augment_sample(
    samples: &[DetectorSample],
    train_idx: &[usize],
    i: usize,
    cfg: &DetectorConfig,
    rng: &mut ChaCha8Rng,
) -> (Array2<f32>, Vec<NormalizedBox>) {
    let s = &samples[i];
    let mut image = s.image.clone();
    let mut boxes = s.boxes.clone();
    if cfg.augment.mosaic && train_idx.len() >= 4 && rng.gen_bool(0.25) {
        let mut others: Vec<usize> = Vec::with_capacity(3);
        while others.len() < 3 {
            let j = train_idx[rng.gen_range(0..train_idx.len())];
            others.push(j);
        }
        let tiles = [
            (&samples[i].image, samples[i].boxes.as_slice()),
            (&samples[others[0]].image, samples[others[0]].boxes.as_slice()),
            (&samples[others[1]].image, samples[others[1]].boxes.as_slice()),
            (&samples[others[2]].image, samples[others[2]].boxes.as_slice()),
        ];
        let (m_img, m_boxes) = mosaic_tile(&tiles, rng);
        image = m_img;
        boxes = m_boxes;
    } else if cfg.augment.scale_crop && rng.gen_bool(0.5) {
        let (a_img, a_boxes) = random_scale_crop(&image, &boxes, rng);
        image = a_img;
        boxes = a_boxes;
    }
    if cfg.augment.perspective && rng.gen_bool(0.25) {
        let (p_img, p_boxes) = random_perspective(&image, &boxes, rng);
        image = p_img;
        boxes = p_boxes;
    }
    (image, boxes)
}

fn stack(images: &[Array2<f32>], input_size: usize) -> Array4<f32> {
    let mut x = Array4::zeros((images.len(), INPUT_CHANNELS, input_size, input_size));
    for (i, img) in images.iter().enumerate() {
        fill_input(&mut x, i, img, input_size);
    }
    x
}

fn eval_loss(
    model: &CompactDetector,
    samples: &[DetectorSample],
    idx: &[usize],
    cfg: &DetectorConfig,
    grid: usize,
) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let mut total = 0.0f64;
    for batch in idx.chunks(cfg.batch_size.max(1)) {
        let tensors: Vec<Array2<f32>> = batch
            .iter()
            .map(|&i| samples[i].image.clone())
            .collect();
        let targets: Vec<Vec<Assigned>> = batch
            .iter()
            .map(|&i| assign_targets(&samples[i].boxes, &model.anchors, grid))
            .collect();
        let out = model.infer_raw(stack(&tensors, cfg.input_size));
        let (loss, _) = detection_loss(&out, &targets, grid);
        total += loss as f64 * batch.len() as f64;
    }
    total / idx.len() as f64
}

/// Per-instance detection accuracy: a ground-truth box counts as found when
/// a same-side prediction at or above the confidence threshold overlaps it
/// at the evaluation IoU.
pub fn per_side_accuracy(
    preds: &[Vec<NormalizedBox>],
    gts: &[Vec<NormalizedBox>],
    eval_iou: f64,
) -> [SideAccuracy; 2] {
    let mut out = [
        SideAccuracy {
            side: Side::Left,
            tp: 0,
            missed: 0,
        },
        SideAccuracy {
            side: Side::Right,
            tp: 0,
            missed: 0,
        },
    ];
    for (p, g) in preds.iter().zip(gts.iter()) {
        for gt in g {
            let found = p
                .iter()
                .any(|d| d.side == gt.side && iou(d, gt) >= eval_iou);
            let slot = &mut out[gt.side.class_id()];
            if found {
                slot.tp += 1;
            } else {
                slot.missed += 1;
            }
        }
    }
    out
}
