//! Convolutions as im2col + GEMM, batch-parallel.

use super::{Layer, Param};
use crate::par;
use ndarray::{Array2, Array4, ArrayD, ArrayView2, ArrayView3, Axis, Ix1, Ix2};
use rand_chacha::ChaCha8Rng;

/// 2D convolution with square kernel, symmetric padding.
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// (out_c, in_c * k * k)
    pub weight: Param,
    pub bias: Param,
    cache_x: Option<Array4<f32>>,
}

impl Conv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Conv2d {
        let fan_in = in_c * k * k;
        let weight = super::init::kaiming_normal(rng, &[out_c, fan_in], fan_in);
        Conv2d {
            in_c,
            out_c,
            k,
            stride,
            pad,
            weight: Param::new(weight),
            bias: Param::new(ArrayD::zeros(vec![out_c])),
            cache_x: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn weight2(&self) -> ArrayView2<'_, f32> {
        self.weight.w.view().into_dimensionality::<Ix2>().unwrap()
    }

    fn run(&self, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = dim4(x);
        assert_eq!(c, self.in_c, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let wmat = self.weight2();
        let bias = self.bias.w.view().into_dimensionality::<Ix1>().unwrap();
        let outs = par::map_indexed(n, |i| {
            let xi = x.index_axis(Axis(0), i);
            let cols = im2col(&xi, self.k, self.stride, self.pad, ho, wo);
            let mut y = wmat.dot(&cols);
            for (mut row, &b) in y.outer_iter_mut().zip(bias.iter()) {
                row.mapv_inplace(|v| v + b);
            }
            y
        });
        collect4(outs, n, self.out_c, ho, wo)
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: Array4<f32>, train: bool) -> Array4<f32> {
        let y = self.run(&x);
        if train {
            self.cache_x = Some(x);
        }
        y
    }

    fn backward(&mut self, gy: Array4<f32>) -> Array4<f32> {
        let x = self.cache_x.take().expect("conv backward without forward");
        let (n, _, h, w) = dim4(&x);
        let (ho, wo) = self.out_hw(h, w);
        let wmat = self.weight2().to_owned();
        let k = self.k;
        let (stride, pad) = (self.stride, self.pad);

        // Per-sample gradients, reduced in index order afterwards.
        let grads = par::map_indexed(n, |i| {
            let gyi = gy
                .index_axis(Axis(0), i)
                .to_shape((self.out_c, ho * wo))
                .unwrap()
                .to_owned();
            let xi = x.index_axis(Axis(0), i);
            let cols = im2col(&xi, k, stride, pad, ho, wo);
            let gw = gyi.dot(&cols.t());
            let gb = gyi.sum_axis(Axis(1));
            let gcols = wmat.t().dot(&gyi);
            let gx = col2im(&gcols, self.in_c, h, w, k, stride, pad, ho, wo);
            (gw, gb, gx)
        });

        let mut gx = Array4::zeros((n, self.in_c, h, w));
        {
            let gw_acc = self.weight.grad_mut();
            let mut gw_view = gw_acc.view_mut().into_dimensionality::<Ix2>().unwrap();
            for (gw, _, _) in grads.iter() {
                gw_view += gw;
            }
        }
        {
            let gb_acc = self.bias.grad_mut();
            let mut gb_view = gb_acc.view_mut().into_dimensionality::<Ix1>().unwrap();
            for (_, gb, _) in grads.iter() {
                gb_view += gb;
            }
        }
        for (i, (_, _, gxi)) in grads.into_iter().enumerate() {
            gx.index_axis_mut(Axis(0), i).assign(&gxi);
        }
        gx
    }

    fn infer(&self, x: Array4<f32>) -> Array4<f32> {
        self.run(&x)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}

/// Transposed convolution with 2×2 kernel, stride 2 (the U-Net upsampler).
/// Output positions do not overlap, so forward is a GEMM plus a scatter.
pub struct ConvTranspose2x2 {
    pub in_c: usize,
    pub out_c: usize,
    /// (in_c, out_c * 4)
    pub weight: Param,
    pub bias: Param,
    cache_x: Option<Array4<f32>>,
}

impl ConvTranspose2x2 {
    pub fn new(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> ConvTranspose2x2 {
        let weight = super::init::kaiming_normal(rng, &[in_c, out_c * 4], in_c);
        ConvTranspose2x2 {
            in_c,
            out_c,
            weight: Param::new(weight),
            bias: Param::new(ArrayD::zeros(vec![out_c])),
            cache_x: None,
        }
    }

    fn weight2(&self) -> ArrayView2<'_, f32> {
        self.weight.w.view().into_dimensionality::<Ix2>().unwrap()
    }

    fn run(&self, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = dim4(x);
        assert_eq!(c, self.in_c, "conv_transpose input channels");
        let wmat = self.weight2();
        let bias = self.bias.w.view().into_dimensionality::<Ix1>().unwrap();
        let outs = par::map_indexed(n, |i| {
            let xi = x
                .index_axis(Axis(0), i)
                .to_shape((self.in_c, h * w))
                .unwrap()
                .to_owned();
            // (out_c*4, h*w)
            let cols = wmat.t().dot(&xi);
            let mut y = Array2::zeros((self.out_c, 4 * h * w));
            scatter2x2(&cols, &mut y, self.out_c, h, w);
            for (mut row, &b) in y.outer_iter_mut().zip(bias.iter()) {
                row.mapv_inplace(|v| v + b);
            }
            y
        });
        collect4(outs, n, self.out_c, 2 * h, 2 * w)
    }
}

impl Layer for ConvTranspose2x2 {
    fn forward(&mut self, x: Array4<f32>, train: bool) -> Array4<f32> {
        let y = self.run(&x);
        if train {
            self.cache_x = Some(x);
        }
        y
    }

    fn backward(&mut self, gy: Array4<f32>) -> Array4<f32> {
        let x = self.cache_x.take().expect("backward without forward");
        let (n, _, h, w) = dim4(&x);
        let wmat = self.weight2().to_owned();
        let grads = par::map_indexed(n, |i| {
            let gyi = gy.index_axis(Axis(0), i);
            // gather back into the (out_c*4, h*w) column layout
            let mut gcols = Array2::zeros((self.out_c * 4, h * w));
            gather2x2(&gyi, &mut gcols, self.out_c, h, w);
            let xi = x
                .index_axis(Axis(0), i)
                .to_shape((self.in_c, h * w))
                .unwrap()
                .to_owned();
            let gw = xi.dot(&gcols.t());
            let gb = gyi
                .to_shape((self.out_c, 4 * h * w))
                .unwrap()
                .sum_axis(Axis(1));
            let gx = wmat.dot(&gcols);
            (gw, gb, gx)
        });

        let mut gx = Array4::zeros((n, self.in_c, h, w));
        {
            let gw_acc = self.weight.grad_mut();
            let mut gw_view = gw_acc.view_mut().into_dimensionality::<Ix2>().unwrap();
            for (gw, _, _) in grads.iter() {
                gw_view += gw;
            }
        }
        {
            let gb_acc = self.bias.grad_mut();
            let mut gb_view = gb_acc.view_mut().into_dimensionality::<Ix1>().unwrap();
            for (_, gb, _) in grads.iter() {
                gb_view += gb;
            }
        }
        for (i, (_, _, gxi)) in grads.into_iter().enumerate() {
            let gxi = gxi.into_shape_with_order((self.in_c, h, w)).unwrap();
            gx.index_axis_mut(Axis(0), i).assign(&gxi);
        }
        gx
    }

    fn infer(&self, x: Array4<f32>) -> Array4<f32> {
        self.run(&x)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}

pub(crate) fn dim4(x: &Array4<f32>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

pub(crate) fn collect4(
    outs: Vec<Array2<f32>>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Array4<f32> {
    let mut y = Array4::zeros((n, c, h, w));
    for (i, o) in outs.into_iter().enumerate() {
        let o = o.into_shape_with_order((c, h, w)).unwrap();
        y.index_axis_mut(Axis(0), i).assign(&o);
    }
    y
}

/// Lower one sample to the (in_c·k·k, ho·wo) patch matrix.
fn im2col(
    x: &ArrayView3<f32>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f32> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::<f32>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        let xc = x.index_axis(Axis(0), ci);
        for ki in 0..k {
            for kj in 0..k {
                let row_idx = (ci * k + ki) * k + kj;
                let mut row = cols.row_mut(row_idx);
                let out = row.as_slice_mut().expect("cols row contiguous");
                // valid output column range for this kernel tap
                let oj_lo = pad.saturating_sub(kj).div_ceil(stride.max(1));
                if oj_lo >= wo {
                    continue;
                }
                for oi in 0..ho {
                    let iy = (oi * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = xc.row(iy as usize);
                    let src = src.as_slice().expect("input row contiguous");
                    if stride == 1 {
                        let ix_lo = oj_lo + kj - pad; // first in-bounds source col
                        if ix_lo >= w {
                            continue;
                        }
                        let len = (w - ix_lo).min(wo - oj_lo);
                        out[oi * wo + oj_lo..oi * wo + oj_lo + len]
                            .copy_from_slice(&src[ix_lo..ix_lo + len]);
                    } else {
                        for oj in oj_lo..wo {
                            let ix = (oj * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[oi * wo + oj] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulate patch-matrix gradients back to the image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    gcols: &Array2<f32>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array3<f32> {
    let mut gx = ndarray::Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        let mut gxc = gx.index_axis_mut(Axis(0), ci);
        for ki in 0..k {
            for kj in 0..k {
                let row_idx = (ci * k + ki) * k + kj;
                let row = gcols.row(row_idx);
                let row = row.as_slice().expect("gcols row contiguous");
                for oi in 0..ho {
                    let iy = (oi * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let mut dst = gxc.row_mut(iy as usize);
                    let dst = dst.as_slice_mut().expect("grad row contiguous");
                    for oj in 0..wo {
                        let ix = (oj * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[ix as usize] += row[oi * wo + oj];
                    }
                }
            }
        }
    }
    gx
}

fn scatter2x2(cols: &Array2<f32>, y: &mut Array2<f32>, out_c: usize, h: usize, w: usize) {
    // cols rows are (oc, di, dj); y rows are oc over a (2h, 2w) grid
    for oc in 0..out_c {
        for di in 0..2 {
            for dj in 0..2 {
                let src = cols.row((oc * 2 + di) * 2 + dj);
                let src = src.as_slice().unwrap();
                let mut dst_row = y.row_mut(oc);
                let dst = dst_row.as_slice_mut().unwrap();
                for i in 0..h {
                    let base = (2 * i + di) * 2 * w + dj;
                    for j in 0..w {
                        dst[base + 2 * j] = src[i * w + j];
                    }
                }
            }
        }
    }
}

fn gather2x2(gy: &ArrayView3<f32>, gcols: &mut Array2<f32>, out_c: usize, h: usize, w: usize) {
    for oc in 0..out_c {
        let gyc = gy.index_axis(Axis(0), oc);
        for di in 0..2 {
            for dj in 0..2 {
                let mut dst_row = gcols.row_mut((oc * 2 + di) * 2 + dj);
                let dst = dst_row.as_slice_mut().unwrap();
                for i in 0..h {
                    let src = gyc.row(2 * i + di);
                    let src = src.as_slice().unwrap();
                    for j in 0..w {
                        dst[i * w + j] = src[2 * j + dj];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    /// Direct convolution reference used as the oracle for the im2col path.
    fn conv_reference(x: &Array4<f32>, l: &Conv2d) -> Array4<f32> {
        let (n, c, h, w) = dim4(x);
        let (ho, wo) = l.out_hw(h, w);
        let wm = l.weight.w.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = Array4::zeros((n, l.out_c, ho, wo));
        for b in 0..n {
            for oc in 0..l.out_c {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = l.bias.w[oc];
                        for ic in 0..c {
                            for ki in 0..l.k {
                                for kj in 0..l.k {
                                    let iy = (oi * l.stride + ki) as isize - l.pad as isize;
                                    let ix = (oj * l.stride + kj) as isize - l.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[[b, ic, iy as usize, ix as usize]]
                                        * wm[[oc, (ic * l.k + ki) * l.k + kj]];
                                }
                            }
                        }
                        y[[b, oc, oi, oj]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut r = rng();
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (7, 2, 3), (2, 2, 0)] {
            let mut layer = Conv2d::new(3, 5, k, stride, pad, &mut r);
            for p in layer.params_mut() {
                p.w.mapv_inplace(|_| r.gen_range(-0.5..0.5));
            }
            let x = Array4::from_shape_fn((2, 3, 11, 9), |_| r.gen_range(-1.0..1.0));
            let got = layer.infer(x.clone());
            let want = conv_reference(&x, &layer);
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng();
        let mut layer = Conv2d::new(2, 3, 3, 1, 1, &mut r);
        let x = Array4::from_shape_fn((2, 2, 5, 5), |_| r.gen_range(-1.0f32..1.0));
        // loss = sum(y^2)/2 so dL/dy = y
        let y = layer.forward(x.clone(), true);
        let gx = layer.backward(y.clone());

        let eps = 1e-3f32;
        let mut worst = 0.0f32;
        for idx in [[0, 0, 0, 0], [1, 1, 2, 3], [0, 1, 4, 4], [1, 0, 2, 2]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let lp: f32 = layer.infer(xp).iter().map(|v| v * v).sum::<f32>() / 2.0;
            let lm: f32 = layer.infer(xm).iter().map(|v| v * v).sum::<f32>() / 2.0;
            let fd = (lp - lm) / (2.0 * eps);
            worst = worst.max((gx[idx] - fd).abs() / fd.abs().max(1.0));
        }
        assert!(worst < 1e-2, "input grad rel err {worst}");

        // weight gradient check
        let widx = 7usize;
        let wgrad = layer.weight.g.as_ref().unwrap().as_slice().unwrap()[widx];
        let orig = layer.weight.w.as_slice().unwrap()[widx];
        layer.weight.w.as_slice_mut().unwrap()[widx] = orig + eps;
        let lp: f32 = layer.infer(x.clone()).iter().map(|v| v * v).sum::<f32>() / 2.0;
        layer.weight.w.as_slice_mut().unwrap()[widx] = orig - eps;
        let lm: f32 = layer.infer(x.clone()).iter().map(|v| v * v).sum::<f32>() / 2.0;
        let fd = (lp - lm) / (2.0 * eps);
        assert!(
            (wgrad - fd).abs() / fd.abs().max(1.0) < 1e-2,
            "weight grad {wgrad} vs fd {fd}"
        );
    }

    #[test]
    fn transpose_upsamples_2x_and_roundtrips_gradient() {
        let mut r = rng();
        let mut up = ConvTranspose2x2::new(4, 2, &mut r);
        let x = Array4::from_shape_fn((2, 4, 3, 5), |_| r.gen_range(-1.0f32..1.0));
        let y = up.forward(x.clone(), true);
        assert_eq!(y.shape(), &[2, 2, 6, 10]);

        let gx = up.backward(y.clone());
        assert_eq!(gx.shape(), x.shape());

        // finite-difference spot check on the input gradient
        let eps = 1e-3f32;
        let idx = [1, 2, 1, 3];
        let mut xp = x.clone();
        xp[idx] += eps;
        let mut xm = x.clone();
        xm[idx] -= eps;
        let lp: f32 = up.infer(xp).iter().map(|v| v * v).sum::<f32>() / 2.0;
        let lm: f32 = up.infer(xm).iter().map(|v| v * v).sum::<f32>() / 2.0;
        let fd = (lp - lm) / (2.0 * eps);
        assert!((gx[idx] - fd).abs() / fd.abs().max(1.0) < 1e-2);
    }
}
