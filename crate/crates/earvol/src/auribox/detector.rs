//! Compact anchor-based single-shot detector.
//!
//! One detection scale at stride 8 with three anchors. Each grid cell and
//! anchor predicts (tx, ty, tw, th, obj, c_left, c_right):
//!
//! ```text
//! x = (gj + σ(tx)) / G      w = anchor_w · exp(tw)
//! y = (gi + σ(ty)) / G      h = anchor_h · exp(th)
//! confidence = σ(obj) · max softmax(c)
//! ```
//!
//! Inference min-max normalizes the slice, resizes it to the square model
//! input, decodes, filters at the confidence threshold, applies per-class
//! NMS and keeps the single best box per side.
//!
//! The input carries a second channel holding the normalized column
//! coordinate. Left/right is a position class, and convolutions alone are
//! translation-invariant; the coordinate ramp makes the side learnable even
//! when both ears look locally identical.

use super::boxes::{NormalizedBox, Side};
use super::nms::nms;
use super::AuriBoxError;
use crate::data::{minmax_normalize, resize_bilinear, Modality};
use crate::nn::{
    read_checkpoint, write_checkpoint, BatchNorm2d, Checkpoint, Conv2d, Layer, LeakyRelu,
    MaxPool2d, Param, Sequential, StateIter,
};
use crate::rng::derive_seed;
use ndarray::{Array2, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const N_ANCHORS: usize = 3;
pub const N_CLASSES: usize = 2;
/// Channels per anchor: tx, ty, tw, th, obj, class logits.
pub const ANCHOR_FIELDS: usize = 5 + N_CLASSES;
pub const STRIDE: usize = 8;
/// Grayscale intensity plus the normalized x-coordinate ramp.
pub const INPUT_CHANNELS: usize = 2;

/// Detection thresholds and training hyper-parameters.
#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub eval_iou: f64,
    pub max_per_class: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub max_epochs: usize,
    pub lr_plateau_patience: usize,
    pub lr_factor: f32,
    pub early_stop_patience: usize,
    pub folds: usize,
    pub batch_size: usize,
    /// Square model input side, multiple of 8.
    pub input_size: usize,
    /// Backbone widths for the four conv stages.
    pub channels: [usize; 4],
    pub augment: super::augment::AugmentConfig,
    pub seed: u64,
    /// Train only the first N folds (final-mode 80/20 retraining).
    pub limit_folds: Option<usize>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            conf_threshold: 0.3,
            nms_iou: 0.45,
            eval_iou: 0.5,
            max_per_class: 1,
            lr: 0.01,
            momentum: 0.937,
            weight_decay: 5e-4,
            max_epochs: 50,
            lr_plateau_patience: 5,
            lr_factor: 0.1,
            early_stop_patience: 10,
            folds: 5,
            batch_size: 8,
            input_size: 160,
            channels: [16, 32, 64, 64],
            augment: super::augment::AugmentConfig::default(),
            seed: 0,
            limit_folds: None,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), AuriBoxError> {
        for (name, v) in [
            ("conf_threshold", self.conf_threshold),
            ("nms_iou", self.nms_iou),
            ("eval_iou", self.eval_iou),
        ] {
            if !(0.0..1.0).contains(&v) || v == 0.0 {
                return Err(AuriBoxError::ConfigError(format!(
                    "{name} must be in (0, 1), got {v}"
                )));
            }
        }
        if self.input_size < STRIDE || self.input_size % STRIDE != 0 {
            return Err(AuriBoxError::ConfigError(format!(
                "input_size {} must be a positive multiple of {STRIDE}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// The detector model (weights + anchors + provenance).
pub struct CompactDetector {
    pub input_size: usize,
    pub channels: [usize; 4],
    /// Normalized (width, height) anchor shapes.
    pub anchors: [(f64, f64); N_ANCHORS],
    pub modality: Option<Modality>,
    pub seed: u64,
    backbone: Sequential,
    head: Conv2d,
}

impl CompactDetector {
    pub fn new(
        input_size: usize,
        channels: [usize; 4],
        anchors: [(f64, f64); N_ANCHORS],
        seed: u64,
    ) -> CompactDetector {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[20]));
        let [c0, c1, c2, c3] = channels;
        let backbone = Sequential::new(vec![
            Box::new(Conv2d::new(INPUT_CHANNELS, c0, 3, 1, 1, &mut rng)) as Box<dyn Layer>,
            Box::new(BatchNorm2d::new(c0)),
            Box::new(LeakyRelu::new(0.1)),
            Box::new(MaxPool2d::new(2, 2, 0)),
            Box::new(Conv2d::new(c0, c1, 3, 1, 1, &mut rng)),
            Box::new(BatchNorm2d::new(c1)),
            Box::new(LeakyRelu::new(0.1)),
            Box::new(MaxPool2d::new(2, 2, 0)),
            Box::new(Conv2d::new(c1, c2, 3, 1, 1, &mut rng)),
            Box::new(BatchNorm2d::new(c2)),
            Box::new(LeakyRelu::new(0.1)),
            Box::new(MaxPool2d::new(2, 2, 0)),
            Box::new(Conv2d::new(c2, c3, 3, 1, 1, &mut rng)),
            Box::new(BatchNorm2d::new(c3)),
            Box::new(LeakyRelu::new(0.1)),
        ]);
        let head = Conv2d::new(c3, N_ANCHORS * ANCHOR_FIELDS, 1, 1, 0, &mut rng);
        CompactDetector {
            input_size,
            channels,
            anchors,
            modality: None,
            seed,
            backbone,
            head,
        }
    }

    pub fn grid(&self) -> usize {
        self.input_size / STRIDE
    }

    pub fn forward_train(&mut self, x: Array4<f32>) -> Array4<f32> {
        let h = self.backbone.forward(x, true);
        self.head.forward(h, true)
    }

    pub fn backward(&mut self, g_head: Array4<f32>) {
        let g = self.head.backward(g_head);
        self.backbone.backward(g);
    }

    pub fn infer_raw(&self, x: Array4<f32>) -> Array4<f32> {
        self.head.infer(self.backbone.infer(x))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.backbone.params_mut();
        v.extend(self.head.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone.params();
        v.extend(self.head.params());
        v
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Decode one sample's raw head output into boxes above `conf_thr`.
    pub fn decode(&self, out: &Array4<f32>, sample: usize, conf_thr: f64) -> Vec<NormalizedBox> {
        let g = self.grid();
        let mut dets = Vec::new();
        for a in 0..N_ANCHORS {
            let base = a * ANCHOR_FIELDS;
            let (aw, ah) = self.anchors[a];
            for gi in 0..g {
                for gj in 0..g {
                    let at = |f: usize| out[[sample, base + f, gi, gj]];
                    if (0..ANCHOR_FIELDS).any(|f| !at(f).is_finite()) {
                        continue;
                    }
                    let obj = sigmoid(at(4));
                    // two-class softmax
                    let (c0, c1) = (at(5), at(6));
                    let m = c0.max(c1);
                    let e0 = (c0 - m).exp();
                    let e1 = (c1 - m).exp();
                    let p1 = e1 / (e0 + e1);
                    let (side, pcls) = if p1 >= 0.5 {
                        (Side::Right, p1)
                    } else {
                        (Side::Left, 1.0 - p1)
                    };
                    let conf = obj as f64 * pcls as f64;
                    if conf < conf_thr {
                        continue;
                    }
                    let x = (gj as f64 + sigmoid(at(0)) as f64) / g as f64;
                    let y = (gi as f64 + sigmoid(at(1)) as f64) / g as f64;
                    let w = (aw * (at(2) as f64).exp()).clamp(1e-4, 1.0);
                    let h = (ah * (at(3) as f64).exp()).clamp(1e-4, 1.0);
                    // keep the fixed size, shift fully inside the unit square
                    let x = x.clamp(w / 2.0, 1.0 - w / 2.0);
                    let y = y.clamp(h / 2.0, 1.0 - h / 2.0);
                    if let Ok(b) = NormalizedBox::new(side, x, y, w, h, conf) {
                        dets.push(b);
                    }
                }
            }
        }
        dets
    }

    /// Preprocess a raw slice into the model input tensor.
    pub fn preprocess(&self, slice: &Array2<f32>) -> Array4<f32> {
        let mut x = Array4::zeros((1, INPUT_CHANNELS, self.input_size, self.input_size));
        fill_input(&mut x, 0, slice, self.input_size);
        x
    }

    fn save_state(&self) -> Vec<ArrayD<f32>> {
        let mut out = Vec::new();
        self.backbone.save_state(&mut out);
        self.head.save_state(&mut out);
        out
    }

    fn load_state(&mut self, tensors: Vec<ArrayD<f32>>) -> Result<(), AuriBoxError> {
        let mut it = StateIter::new(tensors);
        self.backbone.load_state(&mut it)?;
        self.head.load_state(&mut it)?;
        it.finish()?;
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Write one sample's channels (normalized image + x ramp) into a batch
/// tensor at `slot`.
pub(crate) fn fill_input(x: &mut Array4<f32>, slot: usize, slice: &Array2<f32>, input_size: usize) {
    let norm = minmax_normalize(slice);
    let resized = resize_bilinear(&norm, input_size, input_size);
    let mut sample = x.index_axis_mut(Axis(0), slot);
    sample.index_axis_mut(Axis(0), 0).assign(&resized);
    let denom = (input_size - 1).max(1) as f32;
    let mut ramp = sample.index_axis_mut(Axis(0), 1);
    for ((_, j), v) in ramp.indexed_iter_mut() {
        *v = j as f32 / denom;
    }
}

/// Detect at most one ear per side on a single slice.
pub fn detect_ears(
    model: &CompactDetector,
    slice: &Array2<f32>,
    cfg: &DetectorConfig,
) -> Vec<NormalizedBox> {
    let x = model.preprocess(slice);
    let out = model.infer_raw(x);
    let raw = model.decode(&out, 0, cfg.conf_threshold);
    let kept = nms(&raw, cfg.nms_iou);
    let mut best: [Option<NormalizedBox>; 2] = [None, None];
    for b in kept {
        let slot = &mut best[b.side.class_id()];
        let better = slot.map(|cur| b.confidence > cur.confidence).unwrap_or(true);
        if better {
            *slot = Some(b);
        }
    }
    let mut out: Vec<NormalizedBox> = best.into_iter().flatten().collect();
    out.truncate(2 * cfg.max_per_class.max(1));
    out
}

pub fn save_detector(path: &Path, model: &CompactDetector) -> Result<(), AuriBoxError> {
    let mut config = vec![
        ("input_size".to_string(), model.input_size.to_string()),
        (
            "channels".to_string(),
            model
                .channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
        (
            "anchors".to_string(),
            model
                .anchors
                .iter()
                .map(|(w, h)| format!("{w}:{h}"))
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("seed".to_string(), model.seed.to_string()),
    ];
    if let Some(m) = model.modality {
        config.push(("modality".to_string(), m.token().to_string()));
    }
    let ckpt = Checkpoint {
        kind: "auribox".into(),
        config,
        tensors: model.save_state(),
    };
    write_checkpoint(path, &ckpt)?;
    Ok(())
}

pub fn load_detector(path: &Path) -> Result<CompactDetector, AuriBoxError> {
    let ckpt = read_checkpoint(path)?;
    if ckpt.kind != "auribox" {
        return Err(AuriBoxError::ConfigError(format!(
            "checkpoint kind {} is not an auribox model",
            ckpt.kind
        )));
    }
    let input_size: usize = ckpt.config_parse("input_size")?;
    let channels: Vec<usize> = ckpt
        .config_get("channels")
        .unwrap_or_default()
        .split(',')
        .filter_map(|c| c.parse().ok())
        .collect();
    if channels.len() != 4 {
        return Err(AuriBoxError::ConfigError("bad channel plan".into()));
    }
    let anchors: Vec<(f64, f64)> = ckpt
        .config_get("anchors")
        .unwrap_or_default()
        .split(',')
        .filter_map(|pair| {
            let (w, h) = pair.split_once(':')?;
            Some((w.parse().ok()?, h.parse().ok()?))
        })
        .collect();
    if anchors.len() != N_ANCHORS {
        return Err(AuriBoxError::ConfigError("bad anchor list".into()));
    }
    let seed = ckpt.config_parse("seed").unwrap_or(0);
    let mut model = CompactDetector::new(
        input_size,
        [channels[0], channels[1], channels[2], channels[3]],
        [anchors[0], anchors[1], anchors[2]],
        seed,
    );
    model.modality = ckpt.config_get("modality").and_then(Modality::parse);
    model.load_state(ckpt.tensors)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_detector() -> CompactDetector {
        CompactDetector::new(
            64,
            [4, 8, 8, 8],
            [(0.15, 0.15), (0.2, 0.2), (0.25, 0.25)],
            9,
        )
    }

    #[test]
    fn raw_output_has_grid_shape() {
        let model = tiny_detector();
        let x = Array4::from_shape_fn((2, INPUT_CHANNELS, 64, 64), |(n, _, i, j)| {
            ((n + i + j) as f32 * 0.1).sin()
        });
        let out = model.infer_raw(x);
        assert_eq!(out.shape(), &[2, N_ANCHORS * ANCHOR_FIELDS, 8, 8]);
    }

    #[test]
    fn decoded_boxes_satisfy_invariants() {
        let model = tiny_detector();
        let x = model.preprocess(&Array2::from_shape_fn((64, 64), |(i, j)| {
            ((i * 31 + j * 17) as f32 * 0.05).sin()
        }));
        let out = model.infer_raw(x);
        for b in model.decode(&out, 0, 0.0) {
            assert!(b.validate().is_ok());
        }
    }

    #[test]
    fn detect_ears_keeps_at_most_one_per_side() {
        let model = tiny_detector();
        let cfg = DetectorConfig {
            conf_threshold: 0.01, // untrained net: admit plenty of raw boxes
            ..Default::default()
        };
        let slice = Array2::from_shape_fn((80, 80), |(i, j)| ((i + 2 * j) as f32 * 0.07).cos());
        let dets = detect_ears(&model, &slice, &cfg);
        assert!(dets.len() <= 2);
        let lefts = dets.iter().filter(|b| b.side == Side::Left).count();
        let rights = dets.iter().filter(|b| b.side == Side::Right).count();
        assert!(lefts <= 1 && rights <= 1);
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_raw_output() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.ckpt");
        let mut model = tiny_detector();
        model.modality = Some(Modality::SpaceMrc);
        save_detector(&path, &model).unwrap();
        let loaded = load_detector(&path).unwrap();
        assert_eq!(loaded.modality, Some(Modality::SpaceMrc));
        assert_eq!(loaded.anchors, model.anchors);
        let x = model.preprocess(&Array2::from_shape_fn((64, 64), |(i, j)| {
            ((i + j) as f32 * 0.03).sin()
        }));
        assert_eq!(model.infer_raw(x.clone()), loaded.infer_raw(x));
    }

    #[test]
    fn config_validation() {
        let mut cfg = DetectorConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.conf_threshold = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = DetectorConfig::default();
        cfg.input_size = 100;
        assert!(cfg.validate().is_err());
    }
}
