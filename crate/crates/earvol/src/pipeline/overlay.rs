//! Static QC overlays: detection boxes and mask contours painted on a slice.

use crate::auribox::{NormalizedBox, Side};
use ndarray::Array2;

const LEFT_BOX: [u8; 3] = [64, 128, 255];
const RIGHT_BOX: [u8; 3] = [0, 220, 220];
const CONTOUR: [u8; 3] = [255, 64, 64];

/// Render a grayscale slice with optional detection boxes and a mask
/// contour (foreground pixels bordering background).
pub fn draw_overlay(
    slice: &Array2<f32>,
    boxes: &[NormalizedBox],
    mask: Option<&Array2<u8>>,
) -> image::RgbImage {
    let (h, w) = slice.dim();
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in slice.iter() {
        min = min.min(v);
        max = max.max(v);
    }
    let range = (max - min).max(1e-6);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for ((i, j), &v) in slice.indexed_iter() {
        let g = (((v - min) / range) * 255.0) as u8;
        img.put_pixel(j as u32, i as u32, image::Rgb([g, g, g]));
    }
    for b in boxes {
        let color = match b.side {
            Side::Left => LEFT_BOX,
            Side::Right => RIGHT_BOX,
        };
        let (x0, y0, x1, y1) = b.corners();
        let px0 = ((x0 * w as f64) as i64).clamp(0, w as i64 - 1) as u32;
        let px1 = ((x1 * w as f64) as i64).clamp(0, w as i64 - 1) as u32;
        let py0 = ((y0 * h as f64) as i64).clamp(0, h as i64 - 1) as u32;
        let py1 = ((y1 * h as f64) as i64).clamp(0, h as i64 - 1) as u32;
        for x in px0..=px1 {
            img.put_pixel(x, py0, image::Rgb(color));
            img.put_pixel(x, py1, image::Rgb(color));
        }
        for y in py0..=py1 {
            img.put_pixel(px0, y, image::Rgb(color));
            img.put_pixel(px1, y, image::Rgb(color));
        }
    }
    if let Some(mask) = mask {
        for ((i, j), &v) in mask.indexed_iter() {
            if v == 0 {
                continue;
            }
            let boundary = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|(di, dj)| {
                let ni = i as i64 + di;
                let nj = j as i64 + dj;
                ni < 0
                    || nj < 0
                    || ni >= h as i64
                    || nj >= w as i64
                    || mask[[ni as usize, nj as usize]] == 0
            });
            if boundary {
                img.put_pixel(j as u32, i as u32, image::Rgb(CONTOUR));
            }
        }
    }
    img
}
