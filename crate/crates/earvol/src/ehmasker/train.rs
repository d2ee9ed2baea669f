//! Segmentation training (80/20 patient split + validation share), and
//! threshold-based inference over patches.

use super::patch::{flip_augment, Patch};
use super::unet::{build_unet, UNet, UNetConfig};
use super::EhMaskerError;
use crate::data::{holdout_split, Modality, SplitError};
use crate::losses::{evaluate as loss_value, loss_gradient, BinaryField, LossConfig, ProbabilityField};
use crate::nn::{clip_grad_norm, Adam, EarlyStopper, Optimizer, PlateauScheduler};
use crate::rng::derive_seed;
use crate::volumetrics::{segmentation_metrics, SegMetrics};
use ndarray::{Array2, Array4, Axis};
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

const GRAD_CLIP: f32 = 10.0;

/// Modality-specific probability cutoffs for binarization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinarizationPolicy {
    pub threshold_space_mrc: f64,
    pub threshold_real_ir: f64,
}

impl Default for BinarizationPolicy {
    fn default() -> Self {
        BinarizationPolicy {
            threshold_space_mrc: 0.9,
            threshold_real_ir: 0.8,
        }
    }
}

impl BinarizationPolicy {
    pub fn validate(&self) -> Result<(), EhMaskerError> {
        for t in [self.threshold_space_mrc, self.threshold_real_ir] {
            if !(0.0 < t && t < 1.0) {
                return Err(EhMaskerError::ConfigError(format!(
                    "binarization threshold {t} outside (0, 1)"
                )));
            }
        }
        Ok(())
    }

    pub fn threshold(&self, modality: Modality) -> f64 {
        match modality {
            Modality::SpaceMrc => self.threshold_space_mrc,
            Modality::RealIr => self.threshold_real_ir,
        }
    }
}

/// One annotated patch (normalized pixels + binary mask).
#[derive(Debug, Clone)]
pub struct SegSample {
    pub patient_id: String,
    pub slice_index: usize,
    pub side: crate::auribox::Side,
    pub pixels: Array2<f32>,
    pub mask: Array2<u8>,
}

#[derive(Debug, Clone)]
pub struct SegTrainConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_factor: f32,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub loss: LossConfig,
    /// Patient fraction held out for testing (0 trains on everything).
    pub test_frac: f64,
    /// Fraction of the training patients reserved for validation.
    pub val_frac: f64,
    pub flip_augment: bool,
    pub seed: u64,
    /// Stop once mean training DSC reaches this value (overfit checks).
    pub stop_at_train_dsc: Option<f64>,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            lr: 1e-4,
            weight_decay: 1e-5,
            batch_size: 16,
            max_epochs: 100,
            plateau_factor: 0.5,
            plateau_patience: 5,
            early_stop_patience: 10,
            loss: LossConfig::default(),
            test_frac: 0.2,
            val_frac: 0.1,
            flip_augment: true,
            seed: 0,
            stop_at_train_dsc: None,
        }
    }
}

pub struct SegTrainReport {
    pub model: UNet,
    /// Mean held-out metrics (per-subject means averaged across subjects).
    pub metrics: SegMetrics,
    pub test_patients: Vec<String>,
    pub epochs_run: usize,
    pub final_train_dsc: f64,
}

/// Train the segmenter on annotated patches with a patient-level
/// 80/20 + validation split; metrics are computed on the held-out patients'
/// 2D masks at the policy threshold, without volumetric post-processing.
pub fn train_segmenter(
    samples: &[SegSample],
    unet_cfg: &UNetConfig,
    cfg: &SegTrainConfig,
    modality: Modality,
    policy: &BinarizationPolicy,
) -> Result<SegTrainReport, EhMaskerError> {
    policy.validate()?;
    cfg.loss.validate()?;
    if samples.is_empty() {
        return Err(EhMaskerError::InsufficientPatients { needed: 1, got: 0 });
    }
    for s in samples {
        if s.pixels.dim() != s.mask.dim() {
            return Err(EhMaskerError::ShapeMismatch(s.pixels.dim(), s.mask.dim()));
        }
    }
    let patients: Vec<String> = samples.iter().map(|s| s.patient_id.clone()).collect();
    let unique: std::collections::BTreeSet<&String> = patients.iter().collect();

    // patient-level test split, then a validation share of the remainder
    let (trainval, test): (Vec<String>, Vec<String>) = if cfg.test_frac <= 0.0 || unique.len() < 2
    {
        (
            unique.iter().map(|s| s.to_string()).collect(),
            unique.iter().map(|s| s.to_string()).collect(),
        )
    } else {
        holdout_split(&patients, cfg.test_frac, cfg.seed).map_err(|e| match e {
            SplitError::InsufficientPatients { needed, got } => {
                EhMaskerError::InsufficientPatients { needed, got }
            }
            SplitError::BadPartition(msg) => EhMaskerError::ConfigError(msg),
        })?
    };
    let (train_pat, val_pat): (Vec<String>, Vec<String>) =
        if cfg.val_frac <= 0.0 || trainval.len() < 2 {
            (trainval.clone(), trainval.clone())
        } else {
            let (t, v) = holdout_split(&trainval, cfg.val_frac, derive_seed(cfg.seed, &[50]))
                .expect("trainval has >= 2 patients");
            (t, v)
        };

    let pick = |set: &[String]| -> Vec<usize> {
        (0..samples.len())
            .filter(|&i| set.contains(&samples[i].patient_id))
            .collect()
    };
    let train_idx = pick(&train_pat);
    let val_idx = pick(&val_pat);
    let test_idx = pick(&test);

    // horizontal-flip augmentation on the training side only
    let mut train_set: Vec<(Array2<f32>, Array2<u8>)> = train_idx
        .iter()
        .map(|&i| (samples[i].pixels.clone(), samples[i].mask.clone()))
        .collect();
    if cfg.flip_augment {
        let flipped: Vec<(Array2<f32>, Array2<u8>)> = train_set
            .iter()
            .map(|(p, m)| flip_augment(p, m).expect("validated shapes"))
            .collect();
        train_set.extend(flipped);
    }

    let mut model = build_unet(unet_cfg, derive_seed(cfg.seed, &[51]))?;
    model.modality = Some(modality);
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay);
    let mut plateau = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let threshold = policy.threshold(modality);

    let mut epochs_run = 0;
    let mut train_dsc = 0.0;
    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[52, epoch as u64]));
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let x = stack_patches(batch.iter().map(|&i| &train_set[i].0));
            let probs = model.forward_train(x);
            let mut gprobs = Array4::<f32>::zeros(probs.raw_dim());
            let inv_b = 1.0 / batch.len() as f64;
            for (slot, &i) in batch.iter().enumerate() {
                let p2 = probs
                    .index_axis(Axis(0), slot)
                    .index_axis(Axis(0), 0)
                    .mapv(|v| v as f64);
                let y2 = train_set[i].1.mapv(|v| v as f64);
                let p = ProbabilityField::new(p2)?;
                let y = BinaryField::new(y2)?;
                let g = loss_gradient(&cfg.loss, &p, &y)?;
                let mut gslot = gprobs.index_axis_mut(Axis(0), slot);
                let mut gslot = gslot.index_axis_mut(Axis(0), 0);
                ndarray::Zip::from(&mut gslot).and(&g).for_each(|o, &gv| {
                    *o = (gv * inv_b) as f32;
                });
            }
            model.zero_grads();
            model.backward_probs(gprobs);
            let mut params = model.params_mut();
            clip_grad_norm(&mut params, GRAD_CLIP);
            opt.step(&mut params);
        }

        let val_loss = mean_loss(&model, samples, &val_idx, &cfg.loss)?;
        if let Some(target) = cfg.stop_at_train_dsc {
            train_dsc = mean_patch_dsc(&model, samples, &train_idx, threshold)?;
            if train_dsc >= target {
                break;
            }
        }
        plateau.observe(val_loss, &mut opt);
        if stopper.observe(val_loss) {
            break;
        }
    }
    if cfg.stop_at_train_dsc.is_none() {
        train_dsc = mean_patch_dsc(&model, samples, &train_idx, threshold)?;
    }

    // held-out metrics: per-subject means averaged across subjects
    let mut by_patient: BTreeMap<&str, Vec<SegMetrics>> = BTreeMap::new();
    for &i in &test_idx {
        let s = &samples[i];
        let mask = segment_pixels(&model, &s.pixels, threshold);
        let m = segmentation_metrics(&mask, &s.mask).map_err(|e| {
            EhMaskerError::ConfigError(format!("metric evaluation failed: {e}"))
        })?;
        by_patient.entry(s.patient_id.as_str()).or_default().push(m);
    }
    let mut sums = SegMetrics {
        dsc: 0.0,
        iou: 0.0,
        recall: 0.0,
    };
    for per in by_patient.values() {
        let n = per.len() as f64;
        sums.dsc += per.iter().map(|m| m.dsc).sum::<f64>() / n;
        sums.iou += per.iter().map(|m| m.iou).sum::<f64>() / n;
        sums.recall += per.iter().map(|m| m.recall).sum::<f64>() / n;
    }
    let n_subj = by_patient.len().max(1) as f64;
    let metrics = SegMetrics {
        dsc: sums.dsc / n_subj,
        iou: sums.iou / n_subj,
        recall: sums.recall / n_subj,
    };

    Ok(SegTrainReport {
        model,
        metrics,
        test_patients: test,
        epochs_run,
        final_train_dsc: train_dsc,
    })
}

/// Sigmoid probabilities thresholded at the modality's policy value.
pub fn segment_patch(
    model: &UNet,
    patch: &Patch,
    policy: &BinarizationPolicy,
) -> Result<Array2<u8>, EhMaskerError> {
    policy.validate()?;
    if let Some(m) = model.modality {
        if m != patch.modality {
            return Err(EhMaskerError::ModalityError {
                expected: m.to_string(),
                got: patch.modality.to_string(),
            });
        }
    }
    Ok(segment_pixels(
        model,
        &patch.pixels,
        policy.threshold(patch.modality),
    ))
}

/// Threshold a single normalized patch (no modality checks).
pub fn segment_pixels(model: &UNet, pixels: &Array2<f32>, threshold: f64) -> Array2<u8> {
    let probs = model.infer(patch_tensor(pixels));
    probs
        .index_axis(Axis(0), 0)
        .index_axis(Axis(0), 0)
        .mapv(|p| u8::from(p as f64 >= threshold))
}

fn patch_tensor(pixels: &Array2<f32>) -> Array4<f32> {
    let (h, w) = pixels.dim();
    let mut x = Array4::zeros((1, 1, h, w));
    x.index_axis_mut(Axis(0), 0)
        .index_axis_mut(Axis(0), 0)
        .assign(pixels);
    x
}

fn stack_patches<'a>(patches: impl Iterator<Item = &'a Array2<f32>>) -> Array4<f32> {
    let items: Vec<&Array2<f32>> = patches.collect();
    let (h, w) = items[0].dim();
    let mut x = Array4::zeros((items.len(), 1, h, w));
    for (i, p) in items.iter().enumerate() {
        x.index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(*p);
    }
    x
}

fn mean_loss(
    model: &UNet,
    samples: &[SegSample],
    idx: &[usize],
    loss: &LossConfig,
) -> Result<f64, EhMaskerError> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &i in idx {
        let probs = model.infer(patch_tensor(&samples[i].pixels));
        let p2 = probs
            .index_axis(Axis(0), 0)
            .index_axis(Axis(0), 0)
            .mapv(|v| v as f64);
        let p = ProbabilityField::new(p2)?;
        let y = BinaryField::new(samples[i].mask.mapv(|v| v as f64))?;
        total += loss_value(loss, &p, &y)?;
    }
    Ok(total / idx.len() as f64)
}

fn mean_patch_dsc(
    model: &UNet,
    samples: &[SegSample],
    idx: &[usize],
    threshold: f64,
) -> Result<f64, EhMaskerError> {
    if idx.is_empty() {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for &i in idx {
        let mask = segment_pixels(&model, &samples[i].pixels, threshold);
        let m = segmentation_metrics(&mask, &samples[i].mask)
            .map_err(|e| EhMaskerError::ConfigError(e.to_string()))?;
        total += m.dsc;
    }
    Ok(total / idx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auribox::Side;

    /// Bright disk on dark background; the mask is the disk.
    fn disk_sample(pid: &str, cx: f64, cy: f64, r: f64, size: usize) -> SegSample {
        let mut pixels = Array2::from_elem((size, size), 0.1f32);
        let mut mask = Array2::<u8>::zeros((size, size));
        for i in 0..size {
            for j in 0..size {
                let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                if d2 < r * r {
                    pixels[[i, j]] = 0.95;
                    mask[[i, j]] = 1;
                }
            }
        }
        SegSample {
            patient_id: pid.to_string(),
            slice_index: 0,
            side: Side::Left,
            pixels,
            mask,
        }
    }

    fn tiny_unet() -> UNetConfig {
        UNetConfig {
            depth: 2,
            base_channels: 8,
            norm_groups: 4,
            input_size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn overfits_small_disk_set() {
        let samples: Vec<SegSample> = (0..4)
            .map(|k| disk_sample("P0", 12.0 + k as f64 * 2.0, 16.0, 6.0, 32))
            .collect();
        let cfg = SegTrainConfig {
            lr: 3e-3,
            test_frac: 0.0,
            val_frac: 0.0,
            max_epochs: 120,
            batch_size: 4,
            stop_at_train_dsc: Some(0.95),
            seed: 4,
            ..Default::default()
        };
        let report = train_segmenter(
            &samples,
            &tiny_unet(),
            &cfg,
            Modality::SpaceMrc,
            &BinarizationPolicy::default(),
        )
        .unwrap();
        assert!(
            report.final_train_dsc >= 0.95,
            "train DSC {}",
            report.final_train_dsc
        );
    }

    #[test]
    fn patient_split_never_leaks() {
        let mut samples = Vec::new();
        for p in 0..6 {
            for k in 0..3 {
                samples.push(disk_sample(&format!("P{p}"), 14.0 + k as f64, 16.0, 5.0, 32));
                samples.last_mut().unwrap().slice_index = k;
            }
        }
        let cfg = SegTrainConfig {
            max_epochs: 1,
            seed: 9,
            ..Default::default()
        };
        let report = train_segmenter(
            &samples,
            &tiny_unet(),
            &cfg,
            Modality::SpaceMrc,
            &BinarizationPolicy::default(),
        )
        .unwrap();
        // test patients exist and are disjoint from the rest by construction
        assert!(!report.test_patients.is_empty());
        assert!(report.test_patients.len() < 6);
    }

    #[test]
    fn threshold_monotonicity_of_foreground() {
        let model = build_unet(&tiny_unet(), 3).unwrap();
        let s = disk_sample("P", 16.0, 16.0, 6.0, 32);
        let loose = segment_pixels(&model, &s.pixels, 0.5);
        let strict = segment_pixels(&model, &s.pixels, 0.9);
        for (a, b) in strict.iter().zip(loose.iter()) {
            assert!(*a <= *b, "strict foreground must be a subset");
        }
    }

    #[test]
    fn modality_mismatch_is_rejected() {
        let mut model = build_unet(&tiny_unet(), 5).unwrap();
        model.modality = Some(Modality::SpaceMrc);
        let patch = Patch {
            pixels: Array2::zeros((32, 32)),
            patient_id: "P".into(),
            modality: Modality::RealIr,
            slice_index: 0,
            side: Side::Left,
            crop_origin: (0, 0),
        };
        assert!(matches!(
            segment_patch(&model, &patch, &BinarizationPolicy::default()),
            Err(EhMaskerError::ModalityError { .. })
        ));
    }

    #[test]
    fn flip_equivariance_of_training_loss() {
        // losses are permutation-invariant, so flipping both fields together
        // leaves every objective unchanged
        let s = disk_sample("P", 10.0, 20.0, 5.0, 32);
        let model = build_unet(&tiny_unet(), 6).unwrap();
        let probs = model.infer(patch_tensor(&s.pixels));
        let p2 = probs
            .index_axis(Axis(0), 0)
            .index_axis(Axis(0), 0)
            .to_owned();
        let (fp, fm) = flip_augment(&p2, &s.mask).unwrap();
        let cfg = LossConfig::default();
        let a = loss_value(
            &cfg,
            &ProbabilityField::new(p2.mapv(|v| v as f64)).unwrap(),
            &BinaryField::new(s.mask.mapv(|v| v as f64)).unwrap(),
        )
        .unwrap();
        let b = loss_value(
            &cfg,
            &ProbabilityField::new(fp.mapv(|v| v as f64)).unwrap(),
            &BinaryField::new(fm.mapv(|v| v as f64)).unwrap(),
        )
        .unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn seeded_training_is_deterministic() {
        let samples: Vec<SegSample> = (0..3)
            .map(|k| disk_sample(&format!("P{k}"), 16.0, 16.0, 5.0, 32))
            .collect();
        let cfg = SegTrainConfig {
            max_epochs: 2,
            seed: 21,
            ..Default::default()
        };
        let a = train_segmenter(
            &samples,
            &tiny_unet(),
            &cfg,
            Modality::RealIr,
            &BinarizationPolicy::default(),
        )
        .unwrap();
        let b = train_segmenter(
            &samples,
            &tiny_unet(),
            &cfg,
            Modality::RealIr,
            &BinarizationPolicy::default(),
        )
        .unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert!((a.final_train_dsc - b.final_train_dsc).abs() < 1e-12);
    }
}
