//! Detection-time training augmentation: mosaic tiling, random perspective,
//! random scale/crop. Boxes are carried through each transform and dropped
//! when they degenerate or leave the frame.

use super::boxes::{NormalizedBox, Side};
use crate::data::resize_bilinear;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    pub mosaic: bool,
    pub perspective: bool,
    pub scale_crop: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mosaic: true,
            perspective: true,
            scale_crop: true,
        }
    }
}

/// Random zoom (0.8–1.2×) plus translation, resampled onto a same-size
/// canvas. Boxes follow the affine map; those whose center leaves the frame
/// are dropped, the rest are clipped.
pub fn random_scale_crop(
    image: &Array2<f32>,
    boxes: &[NormalizedBox],
    rng: &mut ChaCha8Rng,
) -> (Array2<f32>, Vec<NormalizedBox>) {
    let scale = rng.gen_range(0.8f64..1.2);
    let tx = rng.gen_range(-0.1f64..0.1);
    let ty = rng.gen_range(-0.1f64..0.1);
    let (h, w) = (image.nrows(), image.ncols());
    // output(u,v) = input((u - ty·h)/scale, (v - tx·w)/scale)
    let out = Array2::from_shape_fn((h, w), |(i, j)| {
        let sy = (i as f64 - ty * h as f64) / scale;
        let sx = (j as f64 - tx * w as f64) / scale;
        sample(image, sy, sx)
    });
    let mut out_boxes = Vec::new();
    for b in boxes {
        let x = b.x_center * scale + tx;
        let y = b.y_center * scale + ty;
        if !(0.0..1.0).contains(&x) || !(0.0..1.0).contains(&y) {
            continue;
        }
        if let Some(nb) = clip_box(b.side, x, y, b.width * scale, b.height * scale) {
            out_boxes.push(nb);
        }
    }
    (out, out_boxes)
}

/// Mild random perspective: the four corners jitter by up to 5% of the image
/// side; pixels are pulled through the inverse homography, boxes are mapped
/// corner-wise and replaced by their clipped axis-aligned hull.
pub fn random_perspective(
    image: &Array2<f32>,
    boxes: &[NormalizedBox],
    rng: &mut ChaCha8Rng,
) -> (Array2<f32>, Vec<NormalizedBox>) {
    let (h, w) = (image.nrows(), image.ncols());
    let jitter = 0.05;
    let mut dst = [[0.0f64; 2]; 4];
    let src = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        d[0] = s[0] + rng.gen_range(-jitter..jitter);
        d[1] = s[1] + rng.gen_range(-jitter..jitter);
    }
    let fwd = homography_from_pairs(&src, &dst);
    let inv = homography_from_pairs(&dst, &src);
    let out = Array2::from_shape_fn((h, w), |(i, j)| {
        let u = (j as f64 + 0.5) / w as f64;
        let v = (i as f64 + 0.5) / h as f64;
        let (x, y) = apply_h(&inv, u, v);
        sample(image, y * h as f64 - 0.5, x * w as f64 - 0.5)
    });
    let mut out_boxes = Vec::new();
    for b in boxes {
        let (x0, y0, x1, y1) = b.corners();
        let corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)];
        let mut mn = (f64::INFINITY, f64::INFINITY);
        let mut mx = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (cx, cy) in corners {
            let (tx, ty) = apply_h(&fwd, cx, cy);
            mn = (mn.0.min(tx), mn.1.min(ty));
            mx = (mx.0.max(tx), mx.1.max(ty));
        }
        let cx = (mn.0 + mx.0) / 2.0;
        let cy = (mn.1 + mx.1) / 2.0;
        if !(0.0..1.0).contains(&cx) || !(0.0..1.0).contains(&cy) {
            continue;
        }
        if let Some(nb) = clip_box(b.side, cx, cy, mx.0 - mn.0, mx.1 - mn.1) {
            out_boxes.push(nb);
        }
    }
    (out, out_boxes)
}

/// Classic four-image mosaic: a random center splits the canvas into
/// quadrants, each filled with one input resized to fit. Box coordinates are
/// rescaled into their quadrant.
pub fn mosaic_tile(
    tiles: &[(&Array2<f32>, &[NormalizedBox]); 4],
    rng: &mut ChaCha8Rng,
) -> (Array2<f32>, Vec<NormalizedBox>) {
    let (h, w) = (tiles[0].0.nrows(), tiles[0].0.ncols());
    let cx = rng.gen_range(0.3f64..0.7);
    let cy = rng.gen_range(0.3f64..0.7);
    let split_x = ((cx * w as f64) as usize).clamp(1, w - 1);
    let split_y = ((cy * h as f64) as usize).clamp(1, h - 1);
    let mut out = Array2::zeros((h, w));
    let mut out_boxes = Vec::new();
    // (row range, col range) per quadrant
    let regions = [
        (0..split_y, 0..split_x),
        (0..split_y, split_x..w),
        (split_y..h, 0..split_x),
        (split_y..h, split_x..w),
    ];
    for ((img, boxes), (rows, cols)) in tiles.iter().zip(regions.into_iter()) {
        let rh = rows.end - rows.start;
        let cw = cols.end - cols.start;
        let tile = resize_bilinear(img, rh, cw);
        for (ti, i) in rows.clone().enumerate() {
            for (tj, j) in cols.clone().enumerate() {
                out[[i, j]] = tile[[ti, tj]];
            }
        }
        let sx = cw as f64 / w as f64;
        let sy = rh as f64 / h as f64;
        let ox = cols.start as f64 / w as f64;
        let oy = rows.start as f64 / h as f64;
        for b in boxes.iter() {
            let x = ox + b.x_center * sx;
            let y = oy + b.y_center * sy;
            if let Some(nb) = clip_box(b.side, x, y, b.width * sx, b.height * sy) {
                out_boxes.push(nb);
            }
        }
    }
    (out, out_boxes)
}

/// Clip a box to the unit square, dropping slivers thinner than 1%.
fn clip_box(side: Side, cx: f64, cy: f64, w: f64, h: f64) -> Option<NormalizedBox> {
    let x0 = (cx - w / 2.0).max(0.0);
    let y0 = (cy - h / 2.0).max(0.0);
    let x1 = (cx + w / 2.0).min(1.0);
    let y1 = (cy + h / 2.0).min(1.0);
    let bw = x1 - x0;
    let bh = y1 - y0;
    if bw < 0.01 || bh < 0.01 {
        return None;
    }
    NormalizedBox::new(side, (x0 + x1) / 2.0, (y0 + y1) / 2.0, bw, bh, 1.0).ok()
}

fn sample(image: &Array2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = (image.nrows(), image.ncols());
    if y < -0.5 || x < -0.5 || y > h as f64 - 0.5 || x > w as f64 - 0.5 {
        return 0.0;
    }
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = (yc - y0 as f64) as f32;
    let tx = (xc - x0 as f64) as f32;
    let a = image[[y0, x0]] * (1.0 - tx) + image[[y0, x1]] * tx;
    let b = image[[y1, x0]] * (1.0 - tx) + image[[y1, x1]] * tx;
    a * (1.0 - ty) + b * ty
}

/// Homography mapping four source points to four destination points, via
/// Gaussian elimination of the standard 8×8 system.
fn homography_from_pairs(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> [f64; 9] {
    let mut a = [[0.0f64; 9]; 8];
    for k in 0..4 {
        let (x, y) = (src[k][0], src[k][1]);
        let (u, v) = (dst[k][0], dst[k][1]);
        a[2 * k] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * k + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // solve A[..8] h = A[..][8] with partial pivoting
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        debug_assert!(p.abs() > 1e-12, "degenerate homography");
        for row in 0..8 {
            if row == col {
                continue;
            }
            let f = a[row][col] / p;
            for c in col..9 {
                a[row][c] -= f * a[col][c];
            }
        }
    }
    let mut h = [0.0f64; 9];
    for i in 0..8 {
        h[i] = a[i][8] / a[i][i];
    }
    h[8] = 1.0;
    h
}

fn apply_h(h: &[f64; 9], x: f64, y: f64) -> (f64, f64) {
    let d = h[6] * x + h[7] * y + h[8];
    (
        (h[0] * x + h[1] * y + h[2]) / d,
        (h[3] * x + h[4] * y + h[5]) / d,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn test_image() -> Array2<f32> {
        Array2::from_shape_fn((64, 64), |(i, j)| ((i * 3 + j) % 17) as f32)
    }

    fn test_boxes() -> Vec<NormalizedBox> {
        vec![
            NormalizedBox::new(Side::Left, 0.3, 0.5, 0.15, 0.15, 1.0).unwrap(),
            NormalizedBox::new(Side::Right, 0.7, 0.5, 0.15, 0.15, 1.0).unwrap(),
        ]
    }

    #[test]
    fn transforms_are_seed_deterministic() {
        let img = test_image();
        let boxes = test_boxes();
        for f in [random_scale_crop, random_perspective] {
            let (a_img, a_boxes) = f(&img, &boxes, &mut ChaCha8Rng::seed_from_u64(5));
            let (b_img, b_boxes) = f(&img, &boxes, &mut ChaCha8Rng::seed_from_u64(5));
            assert_eq!(a_img, b_img);
            assert_eq!(a_boxes.len(), b_boxes.len());
        }
    }

    #[test]
    fn boxes_stay_inside_unit_square() {
        let img = test_image();
        let boxes = test_boxes();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (_, bs) = random_scale_crop(&img, &boxes, &mut rng);
            let (_, bp) = random_perspective(&img, &boxes, &mut rng);
            for b in bs.iter().chain(bp.iter()) {
                assert!(b.validate().is_ok());
            }
        }
    }

    #[test]
    fn mosaic_preserves_shape_and_rescales_boxes() {
        let img = test_image();
        let boxes = test_boxes();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tiles = [
            (&img, boxes.as_slice()),
            (&img, boxes.as_slice()),
            (&img, boxes.as_slice()),
            (&img, boxes.as_slice()),
        ];
        let (out, out_boxes) = mosaic_tile(&tiles, &mut rng);
        assert_eq!(out.shape(), img.shape());
        assert!(!out_boxes.is_empty());
        for b in &out_boxes {
            assert!(b.validate().is_ok());
            assert!(b.width <= 0.15 + 1e-9); // quadrants only shrink boxes
        }
    }

    #[test]
    fn homography_identity_fixed_points() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let h = homography_from_pairs(&pts, &pts);
        for (x, y) in [(0.25, 0.75), (0.5, 0.5), (0.9, 0.1)] {
            let (u, v) = apply_h(&h, x, y);
            assert!((u - x).abs() < 1e-9 && (v - y).abs() < 1e-9);
        }
    }
}
