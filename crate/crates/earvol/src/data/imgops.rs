//! Small 2D raster operations used for model input preparation and
//! augmentation. All of them are deterministic pure functions.

use ndarray::Array2;

/// Bilinear resize with the half-pixel-center convention.
pub fn resize_bilinear(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    assert!(out_h > 0 && out_w > 0, "resize target must be non-empty");
    let (h, w) = (src.nrows(), src.ncols());
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let fy = ((i as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let fx = ((j as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
        sample_bilinear(src, fy, fx)
    })
}

/// Rotate about the image center by `degrees` (counter-clockwise), bilinear
/// interpolation, out-of-frame samples filled with `fill`.
pub fn rotate_bilinear(src: &Array2<f32>, degrees: f32, fill: f32) -> Array2<f32> {
    let (h, w) = (src.nrows(), src.ncols());
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    Array2::from_shape_fn((h, w), |(i, j)| {
        // inverse mapping: output pixel -> source coordinates
        let dy = i as f32 - cy;
        let dx = j as f32 - cx;
        let fy = cy + sin * dx + cos * dy;
        let fx = cx + cos * dx - sin * dy;
        if fy < 0.0 || fx < 0.0 || fy > (h - 1) as f32 || fx > (w - 1) as f32 {
            fill
        } else {
            sample_bilinear(src, fy, fx)
        }
    })
}

/// Mirror about the vertical axis (column order reversed).
pub fn flip_horizontal(src: &Array2<f32>) -> Array2<f32> {
    let w = src.ncols();
    Array2::from_shape_fn((src.nrows(), w), |(i, j)| src[[i, w - 1 - j]])
}

fn sample_bilinear(src: &Array2<f32>, fy: f32, fx: f32) -> f32 {
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(src.nrows() - 1);
    let x1 = (x0 + 1).min(src.ncols() - 1);
    let ty = fy - y0 as f32;
    let tx = fx - x0 as f32;
    let a = src[[y0, x0]] * (1.0 - tx) + src[[y0, x1]] * tx;
    let b = src[[y1, x0]] * (1.0 - tx) + src[[y1, x1]] * tx;
    a * (1.0 - ty) + b * ty
}
