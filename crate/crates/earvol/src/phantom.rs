//! Synthetic paired-modality inner-ear phantoms with analytic ground truth.
//!
//! Each phantom patient is two ellipsoid "ears" (a vestibule with an
//! endolymph compartment strictly inside) embedded in a head-like background.
//! The same millimeter geometry renders into both sequences:
//!
//! * SPACE-like — isotropic 0.5 mm voxels, 56 slices, hyperintense vestibule
//!   (the whole fluid space);
//! * REAL-IR-like — 0.8 mm slices (112 of them), bright perilymph with a
//!   hypointense endolymph core by default (a polarity flag flips the
//!   convention), lower contrast and double noise.
//!
//! True volumes come from (4/3)πabc, so the cohort carries exact ELR values;
//! rasterized masks (voxel-center-inside) provide the pixel ground truth the
//! training stages consume. The cohort writer emits the full on-disk layout
//! every other module ingests: slice stacks + sidecars, per-slice label CSV,
//! centroid CSV, per-image annotation files, mask images, the annotated-slice
//! list, and `ground_truth.csv`.

use crate::auribox::{centroid_to_box, write_centroid_csv, write_yolo_file, CentroidRow, Side};
use crate::data::{export_stack, standardize_filename, BitDepth, Modality, Volume};
use crate::eargate::{write_label_csv, LabelRow};
use crate::ehmasker::write_mask_png;
use crate::rng::derive_seed;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Emit(String),
}

/// One ear's geometry in millimeters, in the volume frame (z, y, x).
///
/// The labyrinth shell stands in for the whole inner-ear complex: it is the
/// structure the slice classifier and the detector see, while the vestibule
/// and endolymph ellipsoids inside it are the segmentation targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarSpec {
    pub center_mm: (f64, f64, f64),
    pub labyrinth_semi_mm: (f64, f64, f64),
    pub vest_semi_mm: (f64, f64, f64),
    pub endo_center_mm: (f64, f64, f64),
    pub endo_semi_mm: (f64, f64, f64),
}

impl EarSpec {
    /// Analytic volumes in mm³: (vestibule, endolymph).
    pub fn analytic_volumes(&self) -> (f64, f64) {
        let v = |s: (f64, f64, f64)| 4.0 / 3.0 * std::f64::consts::PI * s.0 * s.1 * s.2;
        (v(self.vest_semi_mm), v(self.endo_semi_mm))
    }

    /// True endolymph-to-vestibule ratio in percent.
    pub fn true_elr(&self) -> f64 {
        let (v, e) = self.analytic_volumes();
        100.0 * e / v
    }

    fn validate(&self) -> Result<(), PhantomError> {
        let axes = [
            (self.vest_semi_mm.0, self.endo_semi_mm.0, self.endo_center_mm.0 - self.center_mm.0),
            (self.vest_semi_mm.1, self.endo_semi_mm.1, self.endo_center_mm.1 - self.center_mm.1),
            (self.vest_semi_mm.2, self.endo_semi_mm.2, self.endo_center_mm.2 - self.center_mm.2),
        ];
        for (vest, endo, offset) in axes {
            if vest <= 0.0 || endo < 0.0 {
                return Err(PhantomError::Spec("non-positive semi-axis".into()));
            }
            // axis-aligned sufficient condition for containment
            if endo + offset.abs() > vest + 1e-9 {
                return Err(PhantomError::Spec(format!(
                    "endolymph ellipsoid leaves the vestibule: {endo} + |{offset}| > {vest}"
                )));
            }
        }
        let lab = [
            (self.labyrinth_semi_mm.0, self.vest_semi_mm.0),
            (self.labyrinth_semi_mm.1, self.vest_semi_mm.1),
            (self.labyrinth_semi_mm.2, self.vest_semi_mm.2),
        ];
        for (shell, vest) in lab {
            if shell < vest {
                return Err(PhantomError::Spec(
                    "labyrinth shell must contain the vestibule".into(),
                ));
            }
        }
        Ok(())
    }

    /// In-plane labyrinth cross-section semi-axis (mm) at axial position `z`,
    /// zero when the slice misses the shell.
    pub fn labyrinth_inplane_semi(&self, z_mm: f64) -> f64 {
        let rel = (z_mm - self.center_mm.0) / self.labyrinth_semi_mm.0;
        if rel.abs() >= 1.0 {
            return 0.0;
        }
        let scale = (1.0 - rel * rel).sqrt();
        scale * self.labyrinth_semi_mm.1.min(self.labyrinth_semi_mm.2)
    }
}

/// Which structure a mask covers; each sequence has one segmentation target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskTarget {
    Vestibule,
    Endolymph,
    /// The surrounding inner-ear complex (classifier/detector context, not a
    /// segmentation target).
    Labyrinth,
}

impl MaskTarget {
    /// The segmentation target of each sequence.
    pub fn for_modality(m: Modality) -> MaskTarget {
        match m {
            Modality::SpaceMrc => MaskTarget::Vestibule,
            Modality::RealIr => MaskTarget::Endolymph,
        }
    }
}

/// Full description of one phantom volume (one patient, one sequence).
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub modality: Modality,
    /// (rows, cols) of each slice.
    pub image_size: (usize, usize),
    pub n_slices: usize,
    pub spacing_mm: (f64, f64, f64),
    /// Index 0 = left ear (image-left), 1 = right.
    pub ears: [EarSpec; 2],
    pub noise_sigma: f64,
    /// REAL-IR polarity: endolymph dark against bright perilymph when true
    /// (the default), bright against dark otherwise.
    pub hypointense_endolymph: bool,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.image_size.0 == 0 || self.image_size.1 == 0 || self.n_slices == 0 {
            return Err(PhantomError::Spec("empty volume".into()));
        }
        if self.spacing_mm.0 <= 0.0 || self.spacing_mm.1 <= 0.0 || self.spacing_mm.2 <= 0.0 {
            return Err(PhantomError::Spec("non-positive spacing".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(PhantomError::Spec("negative noise sigma".into()));
        }
        let extent_mm = (
            self.n_slices as f64 * self.spacing_mm.0,
            self.image_size.0 as f64 * self.spacing_mm.1,
            self.image_size.1 as f64 * self.spacing_mm.2,
        );
        for ear in &self.ears {
            ear.validate()?;
            let inside = ear.center_mm.1 - ear.vest_semi_mm.1 >= 0.0
                && ear.center_mm.1 + ear.vest_semi_mm.1 <= extent_mm.1
                && ear.center_mm.2 - ear.vest_semi_mm.2 >= 0.0
                && ear.center_mm.2 + ear.vest_semi_mm.2 <= extent_mm.2
                && ear.center_mm.0 - ear.vest_semi_mm.0 >= 0.0
                && ear.center_mm.0 + ear.vest_semi_mm.0 <= extent_mm.0;
            if !inside {
                return Err(PhantomError::Spec(format!(
                    "ear at {:?} mm leaves the {extent_mm:?} mm volume",
                    ear.center_mm
                )));
            }
        }
        Ok(())
    }

    /// Contiguous slice indices whose voxel centers intersect an ear's
    /// labyrinth shell (the structure the slice labels describe).
    pub fn ear_slice_range(&self) -> (usize, usize) {
        let dz = self.spacing_mm.0;
        let mut lo = self.n_slices;
        let mut hi = 0usize;
        for k in 0..self.n_slices {
            let z = (k as f64 + 0.5) * dz;
            let hit = self.ears.iter().any(|e| {
                let d = (z - e.center_mm.0) / e.labyrinth_semi_mm.0;
                d.abs() < 1.0
            });
            if hit {
                lo = lo.min(k);
                hi = hi.max(k + 1);
            }
        }
        if lo >= hi {
            (0, 0)
        } else {
            (lo, hi)
        }
    }

    /// Slices where one ear's labyrinth cross-section is solidly visible
    /// (in-plane semi-axis at least `min_semi_mm`); that ear's detection
    /// annotations exist only here, mirroring annotator-verified slices.
    pub fn detectable_slices_for(&self, side: Side, min_semi_mm: f64) -> Vec<usize> {
        let dz = self.spacing_mm.0;
        let ear = &self.ears[side.class_id()];
        (0..self.n_slices)
            .filter(|&k| {
                let z = (k as f64 + 0.5) * dz;
                ear.labyrinth_inplane_semi(z) >= min_semi_mm
            })
            .collect()
    }

    /// Ear centroid in pixel coordinates (x, y), identical on every slice.
    pub fn centroid_px(&self, side: Side) -> (f64, f64) {
        let e = &self.ears[side.class_id()];
        (
            e.center_mm.2 / self.spacing_mm.2,
            e.center_mm.1 / self.spacing_mm.1,
        )
    }

    fn inside(semi: (f64, f64, f64), center: (f64, f64, f64), p: (f64, f64, f64)) -> bool {
        let dz = (p.0 - center.0) / semi.0;
        let dy = (p.1 - center.1) / semi.1;
        let dx = (p.2 - center.2) / semi.2;
        dz * dz + dy * dy + dx * dx < 1.0
    }

    /// Rasterize one structure over the full grid. A voxel is foreground
    /// when at least half of a 5×5×5 subsample grid falls inside the
    /// ellipsoid; this majority rule keeps the discrete volume within a few
    /// percent of (4/3)πabc even at adversarial grid alignments.
    pub fn rasterize(&self, target: MaskTarget, side: Option<Side>) -> Array3<u8> {
        let (h, w) = self.image_size;
        let mut out = Array3::<u8>::zeros((self.n_slices, h, w));
        for (s, ear) in self.ears.iter().enumerate() {
            if let Some(want) = side {
                if want.class_id() != s {
                    continue;
                }
            }
            let (semi, center) = match target {
                MaskTarget::Vestibule => (ear.vest_semi_mm, ear.center_mm),
                MaskTarget::Endolymph => (ear.endo_semi_mm, ear.endo_center_mm),
                MaskTarget::Labyrinth => (ear.labyrinth_semi_mm, ear.center_mm),
            };
            // bound the scan to the ellipsoid's bounding box
            let k0 = (((center.0 - semi.0) / self.spacing_mm.0 - 1.0).max(0.0)) as usize;
            let k1 = ((center.0 + semi.0) / self.spacing_mm.0 + 1.0).min(self.n_slices as f64)
                as usize;
            let i0 = (((center.1 - semi.1) / self.spacing_mm.1 - 1.0).max(0.0)) as usize;
            let i1 = ((center.1 + semi.1) / self.spacing_mm.1 + 1.0).min(h as f64) as usize;
            let j0 = (((center.2 - semi.2) / self.spacing_mm.2 - 1.0).max(0.0)) as usize;
            let j1 = ((center.2 + semi.2) / self.spacing_mm.2 + 1.0).min(w as f64) as usize;
            const SS: usize = 5;
            let offs: Vec<f64> = (0..SS).map(|s| (s as f64 + 0.5) / SS as f64).collect();
            for k in k0..k1 {
                for i in i0..i1 {
                    for j in j0..j1 {
                        let mut hits = 0usize;
                        for oz in &offs {
                            let z = (k as f64 + oz) * self.spacing_mm.0;
                            for oy in &offs {
                                let y = (i as f64 + oy) * self.spacing_mm.1;
                                for ox in &offs {
                                    let x = (j as f64 + ox) * self.spacing_mm.2;
                                    if Self::inside(semi, center, (z, y, x)) {
                                        hits += 1;
                                    }
                                }
                            }
                        }
                        if 2 * hits >= SS * SS * SS {
                            out[[k, i, j]] = 1;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Defaults for the two sequences over a shared ear geometry.
pub fn spec_for_modality(modality: Modality, ears: [EarSpec; 2], noise_sigma: f64) -> PhantomSpec {
    match modality {
        Modality::SpaceMrc => PhantomSpec {
            modality,
            image_size: (320, 320),
            n_slices: 56,
            spacing_mm: (0.5, 0.5, 0.5),
            ears,
            noise_sigma,
            hypointense_endolymph: true,
        },
        Modality::RealIr => PhantomSpec {
            modality,
            image_size: (320, 320),
            n_slices: 112,
            spacing_mm: (0.8, 0.5, 0.5),
            ears,
            noise_sigma: noise_sigma * 2.0,
            hypointense_endolymph: true,
        },
    }
}

/// Everything one rendered phantom provides.
pub struct GeneratedPhantom {
    pub volume: Volume,
    /// Per-slice ear labels (vestibule intersection).
    pub labels: Vec<u8>,
    /// Full-slice ground-truth masks of the sequence's target structure,
    /// keyed by slice index (ear range only).
    pub target_masks: BTreeMap<usize, Array2<u8>>,
    /// Per-side centroid in pixels (x, y).
    pub centroids: [(f64, f64); 2],
    pub ear_range: (usize, usize),
    pub spec: PhantomSpec,
}

// rendering intensities (0..1 before quantization to 8-bit)
const BG: f64 = 0.05;
const HEAD: f64 = 0.32;
const LABYRINTH_SPACE: f64 = 0.58;
const LABYRINTH_REAL_IR: f64 = 0.48;
const VESTIBULE_SPACE: f64 = 0.92;
const PERILYMPH_REAL_IR: f64 = 0.80;
const ENDOLYMPH_DARK: f64 = 0.10;
const ENDOLYMPH_BRIGHT: f64 = 0.95;

/// Render one phantom volume deterministically from (spec, seed).
pub fn generate_phantom(
    spec: &PhantomSpec,
    patient_id: &str,
    seed: u64,
) -> Result<GeneratedPhantom, PhantomError> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut voxels = Array3::<f32>::zeros((spec.n_slices, h, w));

    // head ellipse parameters (shared across slices, mild per-phantom jitter)
    let head_cy = h as f64 * 0.5;
    let head_cx = w as f64 * 0.5;
    let head_ry = h as f64 * rng.gen_range(0.36..0.42);
    let head_rx = w as f64 * rng.gen_range(0.40..0.46);

    let lab = spec.rasterize(MaskTarget::Labyrinth, None);
    let vest = spec.rasterize(MaskTarget::Vestibule, None);
    let endo = spec.rasterize(MaskTarget::Endolymph, None);

    for k in 0..spec.n_slices {
        for i in 0..h {
            for j in 0..w {
                let dy = (i as f64 - head_cy) / head_ry;
                let dx = (j as f64 - head_cx) / head_rx;
                let mut v = if dy * dy + dx * dx < 1.0 { HEAD } else { BG };
                if lab[[k, i, j]] == 1 {
                    v = match spec.modality {
                        Modality::SpaceMrc => LABYRINTH_SPACE,
                        Modality::RealIr => LABYRINTH_REAL_IR,
                    };
                }
                if vest[[k, i, j]] == 1 {
                    v = match spec.modality {
                        Modality::SpaceMrc => VESTIBULE_SPACE,
                        Modality::RealIr => PERILYMPH_REAL_IR,
                    };
                }
                if endo[[k, i, j]] == 1 && spec.modality == Modality::RealIr {
                    v = if spec.hypointense_endolymph {
                        ENDOLYMPH_DARK
                    } else {
                        ENDOLYMPH_BRIGHT
                    };
                }
                let noise = gaussian(&mut rng) * spec.noise_sigma;
                let q = ((v + noise).clamp(0.0, 1.0) * 255.0).round();
                voxels[[k, i, j]] = q as f32;
            }
        }
    }

    let ear_range = spec.ear_slice_range();
    let labels: Vec<u8> = (0..spec.n_slices)
        .map(|k| u8::from((ear_range.0..ear_range.1).contains(&k)))
        .collect();

    let target = MaskTarget::for_modality(spec.modality);
    let target_vol = match target {
        MaskTarget::Vestibule => &vest,
        MaskTarget::Endolymph => &endo,
        MaskTarget::Labyrinth => unreachable!("labyrinth is never a segmentation target"),
    };
    let mut target_masks = BTreeMap::new();
    for k in ear_range.0..ear_range.1 {
        target_masks.insert(k, target_vol.index_axis(ndarray::Axis(0), k).to_owned());
    }

    let mut volume = Volume::new(patient_id, spec.modality, voxels, spec.spacing_mm)
        .map_err(|e| PhantomError::Spec(e.to_string()))?;
    volume.bit_depth = BitDepth::U8;

    Ok(GeneratedPhantom {
        volume,
        labels,
        target_masks,
        centroids: [
            spec.centroid_px(Side::Left),
            spec.centroid_px(Side::Right),
        ],
        ear_range,
        spec: spec.clone(),
    })
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---------------------------------------------------------------------------
// cohort generation
// ---------------------------------------------------------------------------

/// Cohort generation knobs.
#[derive(Debug, Clone)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub seed: u64,
    /// Base noise sigma for SPACE-like volumes (REAL-IR doubles it).
    pub noise_sigma: f64,
    /// Fixed annotation box side in pixels (at the 320×320 grid).
    pub box_px: f64,
    /// Annotated slices per ear for the segmentation stage (3–6).
    pub annot_slices: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_patients: 20,
            seed: 7,
            noise_sigma: 0.02,
            box_px: 48.0,
            annot_slices: 4,
        }
    }
}

/// Minimum in-plane labyrinth semi-axis (mm) for a slice to receive
/// detection annotations.
pub const DETECTABLE_MIN_SEMI_MM: f64 = 2.0;

/// One row of `ground_truth.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthRow {
    pub patient_id: String,
    pub ear: Side,
    pub v_vest_mm3: f64,
    pub v_endo_mm3: f64,
    pub elr_percent: f64,
}

/// One row of `annotations.csv` (segmentation-stage annotated slices).
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSlice {
    pub patient_id: String,
    pub modality: Modality,
    pub ear: Side,
    pub slice_index: usize,
}

pub struct CohortSummary {
    pub root: PathBuf,
    pub patients: Vec<String>,
    pub ground_truth: Vec<GroundTruthRow>,
}

/// Sample one patient's ear geometry within clinically plausible ranges
/// (vestibular volume ≈ 0.05–0.12 cm³).
pub fn sample_geometry(rng: &mut ChaCha8Rng, stack_mm: (f64, f64, f64)) -> [EarSpec; 2] {
    let mut make = |x_frac: f64| {
        let vest = (
            rng.gen_range(2.3..3.0),
            rng.gen_range(2.3..3.0),
            rng.gen_range(2.3..3.0),
        );
        let shell_margin = rng.gen_range(2.0..2.6);
        let labyrinth = (
            vest.0 + shell_margin,
            vest.1 + shell_margin,
            vest.2 + shell_margin,
        );
        let scale = (
            rng.gen_range(0.5..0.72),
            rng.gen_range(0.5..0.72),
            rng.gen_range(0.5..0.72),
        );
        let endo = (vest.0 * scale.0, vest.1 * scale.1, vest.2 * scale.2);
        let center = (
            stack_mm.0 * rng.gen_range(0.42..0.58),
            stack_mm.1 * (0.52 + rng.gen_range(-0.03..0.03)),
            stack_mm.2 * (x_frac + rng.gen_range(-0.02..0.02)),
        );
        // offset the endolymph inside the remaining margin
        let margin = (
            vest.0 - endo.0,
            vest.1 - endo.1,
            vest.2 - endo.2,
        );
        let endo_center = (
            center.0 + margin.0 * rng.gen_range(-0.4..0.4),
            center.1 + margin.1 * rng.gen_range(-0.4..0.4),
            center.2 + margin.2 * rng.gen_range(-0.4..0.4),
        );
        EarSpec {
            center_mm: center,
            labyrinth_semi_mm: labyrinth,
            vest_semi_mm: vest,
            endo_center_mm: endo_center,
            endo_semi_mm: endo,
        }
    };
    [make(0.30), make(0.70)]
}

/// Per-patient emission results, merged in patient order afterwards.
struct PatientRows {
    labels: Vec<LabelRow>,
    centroids: Vec<CentroidRow>,
    annotated: Vec<AnnotatedSlice>,
    gt: Vec<GroundTruthRow>,
}

/// Generate a full cohort on disk in the standard dataset layout.
/// Patients render in parallel with per-patient derived seeds; the shared
/// CSVs are merged in patient order, so output is seed-deterministic.
pub fn phantom_cohort(cfg: &CohortConfig, out_dir: &Path) -> Result<CohortSummary, PhantomError> {
    if cfg.n_patients == 0 {
        return Err(PhantomError::Spec("need at least one patient".into()));
    }
    fs::create_dir_all(out_dir)?;
    let indices: Vec<usize> = (0..cfg.n_patients).collect();
    let per_patient: Vec<Result<PatientRows, PhantomError>> =
        crate::par::map_batch(&indices, |&p| emit_patient(cfg, out_dir, p));

    let mut label_rows: Vec<LabelRow> = Vec::new();
    let mut centroid_rows: Vec<CentroidRow> = Vec::new();
    let mut annotated: Vec<AnnotatedSlice> = Vec::new();
    let mut gt_rows: Vec<GroundTruthRow> = Vec::new();
    let mut patients = Vec::with_capacity(cfg.n_patients);
    for (p, rows) in per_patient.into_iter().enumerate() {
        let rows = rows?;
        patients.push(format!("P{p:03}"));
        label_rows.extend(rows.labels);
        centroid_rows.extend(rows.centroids);
        annotated.extend(rows.annotated);
        gt_rows.extend(rows.gt);
    }

    write_label_csv(&out_dir.join("labels.csv"), &label_rows)
        .map_err(|e| PhantomError::Emit(e.to_string()))?;
    write_centroid_csv(&out_dir.join("centroids.csv"), &centroid_rows)
        .map_err(|e| PhantomError::Emit(e.to_string()))?;
    write_annotations_csv(&out_dir.join("annotations.csv"), &annotated)?;
    write_ground_truth_csv(&out_dir.join("ground_truth.csv"), &gt_rows)?;

    Ok(CohortSummary {
        root: out_dir.to_path_buf(),
        patients,
        ground_truth: gt_rows,
    })
}

fn emit_patient(
    cfg: &CohortConfig,
    out_dir: &Path,
    p: usize,
) -> Result<PatientRows, PhantomError> {
    let mut label_rows: Vec<LabelRow> = Vec::new();
    let mut centroid_rows: Vec<CentroidRow> = Vec::new();
    let mut annotated: Vec<AnnotatedSlice> = Vec::new();
    let mut gt_rows: Vec<GroundTruthRow> = Vec::new();
    {
        let pid = format!("P{p:03}");
        let geo_seed = derive_seed(cfg.seed, &[60, p as u64]);
        // geometry is defined in normalized stack coordinates and converted
        // per modality so both sequences see the same millimeter anatomy
        for modality in Modality::ALL {
            let base = spec_for_modality(modality, dummy_ears(), cfg.noise_sigma);
            let stack_mm = (
                base.n_slices as f64 * base.spacing_mm.0,
                base.image_size.0 as f64 * base.spacing_mm.1,
                base.image_size.1 as f64 * base.spacing_mm.2,
            );
            let mut grng = ChaCha8Rng::seed_from_u64(geo_seed);
            let ears = sample_geometry(&mut grng, stack_mm);
            let spec = spec_for_modality(modality, ears, cfg.noise_sigma);
            let render_seed = derive_seed(cfg.seed, &[61, p as u64, modality as u64]);
            let phantom = generate_phantom(&spec, &pid, render_seed)?;

            // ground truth volumes once (identical mm semi-axes per modality;
            // z centers differ with the stack, volumes do not)
            if modality == Modality::SpaceMrc {
                for side in Side::BOTH {
                    let ear = &ears[side.class_id()];
                    let (v, e) = ear.analytic_volumes();
                    gt_rows.push(GroundTruthRow {
                        patient_id: pid.clone(),
                        ear: side,
                        v_vest_mm3: v,
                        v_endo_mm3: e,
                        elr_percent: ear.true_elr(),
                    });
                }
            }

            let dir = out_dir.join(modality.token()).join(&pid);
            fs::create_dir_all(&dir)?;
            export_stack(&phantom.volume, &dir).map_err(|e| PhantomError::Emit(e.to_string()))?;

            // per-slice labels + annotation files. Each ear contributes a
            // box only where its inner-ear complex is solidly visible (the
            // annotator-verified subset); slices may carry two, one, or
            // zero boxes.
            let detectable = [
                spec.detectable_slices_for(Side::Left, DETECTABLE_MIN_SEMI_MM),
                spec.detectable_slices_for(Side::Right, DETECTABLE_MIN_SEMI_MM),
            ];
            for (k, &label) in phantom.labels.iter().enumerate() {
                label_rows.push(LabelRow {
                    patient_id: pid.clone(),
                    modality,
                    slice_index: k,
                    label,
                });
                let stem = standardize_filename(&pid, modality, k);
                let stem = stem.trim_end_matches(".tif");
                let ann_path = dir.join(format!("{stem}.txt"));
                let mut boxes = Vec::new();
                if label == 1 {
                    for side in Side::BOTH {
                        if !detectable[side.class_id()].contains(&k) {
                            continue;
                        }
                        let (cx, cy) = phantom.centroids[side.class_id()];
                        boxes.push(
                            centroid_to_box(
                                cx,
                                cy,
                                spec.image_size.1,
                                spec.image_size.0,
                                cfg.box_px,
                                cfg.box_px,
                                side,
                            )
                            .expect("phantom centroids are inside the image"),
                        );
                        centroid_rows.push(CentroidRow {
                            image_id: stem.to_string(),
                            side,
                            x_px: cx,
                            y_px: cy,
                        });
                    }
                }
                write_yolo_file(&ann_path, &boxes)
                    .map_err(|e| PhantomError::Emit(e.to_string()))?;
            }

            // full-slice target masks over the ear range
            let mask_dir = dir.join("masks");
            fs::create_dir_all(&mask_dir)?;
            for (&k, mask) in &phantom.target_masks {
                let stem = standardize_filename(&pid, modality, k);
                let stem = stem.trim_end_matches(".tif");
                write_mask_png(&mask_dir.join(format!("{stem}.png")), mask)
                    .map_err(|e| PhantomError::Emit(e.to_string()))?;
            }

            // 3–6 annotated slices per ear around the maximal cross-section
            let (lo, hi) = phantom.ear_range;
            for side in Side::BOTH {
                let ear = &ears[side.class_id()];
                let center_k = (ear.center_mm.0 / spec.spacing_mm.0) as usize;
                let eligible = &detectable[side.class_id()];
                let n = cfg.annot_slices.clamp(3, 6);
                let mut picked = Vec::new();
                let mut offset = 0isize;
                while picked.len() < n {
                    let k = center_k as isize + offset;
                    if k >= lo as isize && (k as usize) < hi && eligible.contains(&(k as usize))
                    {
                        picked.push(k as usize);
                    }
                    // alternate around the center: 0, +1, -1, +2, -2, ...
                    offset = if offset >= 0 { -offset - 1 } else { -offset };
                    if offset.unsigned_abs() > (hi - lo) {
                        break;
                    }
                }
                picked.sort_unstable();
                for k in picked {
                    annotated.push(AnnotatedSlice {
                        patient_id: pid.clone(),
                        modality,
                        ear: side,
                        slice_index: k,
                    });
                }
            }
        }
    }
    Ok(PatientRows {
        labels: label_rows,
        centroids: centroid_rows,
        annotated,
        gt: gt_rows,
    })
}

fn dummy_ears() -> [EarSpec; 2] {
    let e = EarSpec {
        center_mm: (14.0, 80.0, 48.0),
        labyrinth_semi_mm: (4.5, 4.5, 4.5),
        vest_semi_mm: (2.5, 2.5, 2.5),
        endo_center_mm: (14.0, 80.0, 48.0),
        endo_semi_mm: (1.5, 1.5, 1.5),
    };
    [e, e]
}

pub fn write_ground_truth_csv(path: &Path, rows: &[GroundTruthRow]) -> Result<(), PhantomError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "patient_id,ear,v_vest_mm3,v_endo_mm3,elr_percent")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{:.6},{:.6},{:.4}",
            r.patient_id, r.ear, r.v_vest_mm3, r.v_endo_mm3, r.elr_percent
        )?;
    }
    Ok(())
}

pub fn read_ground_truth_csv(path: &Path) -> Result<Vec<GroundTruthRow>, PhantomError> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(PhantomError::Emit(format!(
                "{}:{}: expected 5 fields",
                path.display(),
                lineno + 1
            )));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| PhantomError::Emit(format!("bad number {s}")))
        };
        rows.push(GroundTruthRow {
            patient_id: fields[0].to_string(),
            ear: Side::parse(fields[1])
                .ok_or_else(|| PhantomError::Emit(format!("bad side {}", fields[1])))?,
            v_vest_mm3: parse(fields[2])?,
            v_endo_mm3: parse(fields[3])?,
            elr_percent: parse(fields[4])?,
        });
    }
    Ok(rows)
}

pub fn write_annotations_csv(path: &Path, rows: &[AnnotatedSlice]) -> Result<(), PhantomError> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "patient_id,modality,ear,slice_index")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{}",
            r.patient_id,
            r.modality.token(),
            r.ear,
            r.slice_index
        )?;
    }
    Ok(())
}

pub fn read_annotations_csv(path: &Path) -> Result<Vec<AnnotatedSlice>, PhantomError> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(PhantomError::Emit(format!(
                "{}:{}: expected 4 fields",
                path.display(),
                lineno + 1
            )));
        }
        rows.push(AnnotatedSlice {
            patient_id: fields[0].to_string(),
            modality: Modality::parse(fields[1])
                .ok_or_else(|| PhantomError::Emit(format!("bad modality {}", fields[1])))?,
            ear: Side::parse(fields[2])
                .ok_or_else(|| PhantomError::Emit(format!("bad side {}", fields[2])))?,
            slice_index: fields[3]
                .parse()
                .map_err(|_| PhantomError::Emit("bad slice index".into()))?,
        });
    }
    Ok(rows)
}
