//! Normalization, pooling, activation, dropout, and dense layers.

use super::{Layer, NnError, Param, StateIter};
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NORM_EPS: f32 = 1e-5;
const RUNNING_MOMENTUM: f32 = 0.1;

/// Batch normalization over (N, H, W) per channel, with running statistics
/// for inference.
pub struct BatchNorm2d {
    pub c: usize,
    pub gamma: Param,
    pub beta: Param,
    running_mean: Array1<f32>,
    running_var: Array1<f32>,
    cache: Option<BnCache>,
}

struct BnCache {
    xhat: Array4<f32>,
    inv_std: Array1<f32>,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> BatchNorm2d {
        BatchNorm2d {
            c,
            gamma: Param::new(ArrayD::from_elem(vec![c], 1.0)),
            beta: Param::new(ArrayD::zeros(vec![c])),
            running_mean: Array1::zeros(c),
            running_var: Array1::ones(c),
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: Array4<f32>, train: bool) -> Array4<f32> {
        if !train {
            return self.infer(x);
        }
        let (n, c, h, w) = super::conv::dim4(&x);
        assert_eq!(c, self.c);
        let m = (n * h * w) as f64;
        let mut mean = Array1::<f32>::zeros(c);
        let mut var = Array1::<f32>::zeros(c);
        for ci in 0..c {
            let xc = x.index_axis(Axis(1), ci);
            let mu = xc.iter().map(|&v| v as f64).sum::<f64>() / m;
            let s2 = xc.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / m;
            mean[ci] = mu as f32;
            var[ci] = s2 as f32;
        }
        let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
        let mut xhat = x;
        for ci in 0..c {
            let (mu, is) = (mean[ci], inv_std[ci]);
            xhat.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|v| (v - mu) * is);
        }
        // unbiased variance feeds the running estimate
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 } as f32;
        for ci in 0..c {
            self.running_mean[ci] =
                (1.0 - RUNNING_MOMENTUM) * self.running_mean[ci] + RUNNING_MOMENTUM * mean[ci];
            self.running_var[ci] = (1.0 - RUNNING_MOMENTUM) * self.running_var[ci]
                + RUNNING_MOMENTUM * var[ci] * unbias;
        }
        let gamma = self.gamma.w.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.w.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = xhat.clone();
        for ci in 0..c {
            let (g, b) = (gamma[ci], beta[ci]);
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| g * v + b);
        }
        self.cache = Some(BnCache { xhat, inv_std });
        y
    }

    fn backward(&mut self, gy: Array4<f32>) -> Array4<f32> {
        let BnCache { xhat, inv_std } = self.cache.take().expect("bn backward without forward");
        let (n, c, h, w) = super::conv::dim4(&gy);
        let m = (n * h * w) as f32;
        let gamma = self.gamma.w.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut gx = Array4::zeros(gy.raw_dim());
        let mut g_gamma = Array1::<f32>::zeros(c);
        let mut g_beta = Array1::<f32>::zeros(c);
        for ci in 0..c {
            let gyc = gy.index_axis(Axis(1), ci);
            let xhc = xhat.index_axis(Axis(1), ci);
            let sum_gy: f32 = gyc.iter().sum();
            let sum_gy_xhat: f32 = gyc.iter().zip(xhc.iter()).map(|(a, b)| a * b).sum();
            g_gamma[ci] = sum_gy_xhat;
            g_beta[ci] = sum_gy;
            let k = gamma[ci] * inv_std[ci] / m;
            let mut gxc = gx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut gxc)
                .and(&gyc)
                .and(&xhc)
                .for_each(|o, &g, &xh| {
                    *o = k * (m * g - sum_gy - xh * sum_gy_xhat);
                });
        }
        {
            let mut gg = self.gamma.grad_mut().view_mut().into_dimensionality::<Ix1>().unwrap();
            gg += &g_gamma;
        }
        {
            let mut gb = self.beta.grad_mut().view_mut().into_dimensionality::<Ix1>().unwrap();
            gb += &g_beta;
        }
        gx
    }

    fn infer(&self, mut x: Array4<f32>) -> Array4<f32> {
        let gamma = self.gamma.w.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.w.view().into_dimensionality::<Ix1>().unwrap();
        for ci in 0..self.c {
            let scale = gamma[ci] / (self.running_var[ci] + NORM_EPS).sqrt();
            let shift = beta[ci] - self.running_mean[ci] * scale;
            x.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|v| v * scale + shift);
        }
        x
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn save_state(&self, out: &mut Vec<ArrayD<f32>>) {
        out.push(self.gamma.w.clone());
        out.push(self.beta.w.clone());
        out.push(self.running_mean.clone().into_dyn());
        out.push(self.running_var.clone().into_dyn());
    }

    fn load_state(&mut self, inp: &mut StateIter) -> Result<(), NnError> {
        self.gamma.w = inp.take(&[self.c])?;
        self.beta.w = inp.take(&[self.c])?;
        self.running_mean = inp.take(&[self.c])?.into_dimensionality::<Ix1>().unwrap();
        self.running_var = inp.take(&[self.c])?.into_dimensionality::<Ix1>().unwrap();
        Ok(())
    }
}

/// Group normalization; statistics per (sample, channel group). With
/// `groups == c` this is instance normalization.
pub struct GroupNorm {
    pub c: usize,
    pub groups: usize,
    pub gamma: Param,
    pub beta: Param,
    cache: Option<GnCache>,
}

struct GnCache {
    xhat: Array4<f32>,
    inv_std: Array2<f32>, // (n, groups)
}

impl GroupNorm {
    pub fn new(c: usize, groups: usize) -> GroupNorm {
        let groups = groups.min(c).max(1);
        assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
        GroupNorm {
            c,
            groups,
            gamma: Param::new(ArrayD::from_elem(vec![c], 1.0)),
            beta: Param::new(ArrayD::zeros(vec![c])),
            cache: None,
        }
    }

    /// Instance normalization (one group per channel).
    pub fn instance(c: usize) -> GroupNorm {
        GroupNorm::new(c, c)
    }

    fn normalize(&self, x: &Array4<f32>) -> (Array4<f32>, Array2<f32>) {
        let (n, c, h, w) = super::conv::dim4(x);
        assert_eq!(c, self.c);
        let cg = c / self.groups;
        let m = (cg * h * w) as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array2::<f32>::zeros((n, self.groups));
        for ni in 0..n {
            for gi in 0..self.groups {
                let mut block = xhat.slice_mut(ndarray::s![ni, gi * cg..(gi + 1) * cg, .., ..]);
                let mu = block.iter().map(|&v| v as f64).sum::<f64>() / m;
                let var = block.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / m;
                let is = 1.0 / ((var as f32) + NORM_EPS).sqrt();
                inv_std[[ni, gi]] = is;
                let mu = mu as f32;
                block.mapv_inplace(|v| (v - mu) * is);
            }
        }
        (xhat, inv_std)
    }

    fn affine(&self, xhat: &Array4<f32>) -> Array4<f32> {
        let gamma = self.gamma.w.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.w.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = xhat.clone();
        for ci in 0..self.c {
            let (g, b) = (gamma[ci], beta[ci]);
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| g * v + b);
        }
        y
    }
}

impl Layer for GroupNorm {
    fn forward(&mut self, x: Array4<f32>, train: bool) -> Array4<f32> {
        let (xhat, inv_std) = self.normalize(&x);
        let y = self.affine(&xhat);
        if train {
            self.cache = Some(GnCache { xhat, inv_std });
        }
        y
    }

    fn backward(&mut self, gy: Array4<f32>) -> Array4<f32> {
        let GnCache { xhat, inv_std } = self.cache.take().expect("gn backward without forward");
        let (n, c, h, w) = super::conv::dim4(&gy);
        let cg = c / self.groups;
        let m = (cg * h * w) as f32;
        let gamma = self.gamma.w.view().into_dimensionality::<Ix1>().unwrap().to_owned();

        // parameter gradients per channel
        let mut g_gamma = Array1::<f32>::zeros(c);
        let mut g_beta = Array1::<f32>::zeros(c);
        for ci in 0..c {
            let gyc = gy.index_axis(Axis(1), ci);
            let xhc = xhat.index_axis(Axis(1), ci);
            g_gamma[ci] = gyc.iter().zip(xhc.iter()).map(|(a, b)| a * b).sum();
            g_beta[ci] = gyc.iter().sum();
        }

        let mut gx = Array4::zeros(gy.raw_dim());
        for ni in 0..n {
            for gi in 0..self.groups {
                let ch = gi * cg..(gi + 1) * cg;
                // gxhat = gy * gamma within the group
                let gyb = gy.slice(ndarray::s![ni, ch.clone(), .., ..]);
                let xhb = xhat.slice(ndarray::s![ni, ch.clone(), .., ..]);
                let mut sum_gxh = 0.0f32;
                let mut sum_gxh_xh = 0.0f32;
                for (ci_rel, (gyc, xhc)) in
                    gyb.outer_iter().zip(xhb.outer_iter()).enumerate()
                {
                    let g = gamma[gi * cg + ci_rel];
                    for (&a, &b) in gyc.iter().zip(xhc.iter()) {
                        sum_gxh += g * a;
                        sum_gxh_xh += g * a * b;
                    }
                }
                let is = inv_std[[ni, gi]];
                let mut gxb = gx.slice_mut(ndarray::s![ni, ch.clone(), .., ..]);
                for (ci_rel, ((mut gxc, gyc), xhc)) in gxb
                    .outer_iter_mut()
                    .zip(gyb.outer_iter())
                    .zip(xhb.outer_iter())
                    .enumerate()
                {
                    let g = gamma[gi * cg + ci_rel];
                    ndarray::Zip::from(&mut gxc).and(&gyc).and(&xhc).for_each(
                        |o, &gyv, &xhv| {
                            let gxh = g * gyv;
                            *o = is * (gxh - (sum_gxh + xhv * sum_gxh_xh) / m);
                        },
                    );
                }
            }
        }
        {
            let mut gg = self.gamma.grad_mut().view_mut().into_dimensionality::<Ix1>().unwrap();
            gg += &g_gamma;
        }
        {
            let mut gb = self.beta.grad_mut().view_mut().into_dimensionality::<Ix1>().unwrap();
            gb += &g_beta;
        }
        gx
    }

    fn infer(&self, x: Array4<f32>) -> Array4<f32> {
        let (xhat, _) = self.normalize(&x);
        self.affine(&xhat)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }
}

/// ReLU.
pub struct Relu {
    cache: Option<Array4<f32>>,
}

impl Relu {
    pub fn new() -> Relu {
        Relu { cache: None }
    }
}

impl Default for Relu {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: Array4<f32>, train: bool) -> Array4<f32> {
        let y = x.mapv(|v| v.max(0.0));
        if train {
            self.cache = Some(x);
        }
        y
    }

    fn backward(&mut self, mut gy: Array4<f32>) -> Array4<f32> {
        let x = self.cache.take().expect("relu backward without forward");
        ndarray::Zip::from(&mut gy).and(&x).for_each(|g, &v| {
            if v <= 0.0 {
                *g = 0.0;
            }
        });
        gy
    }

    fn infer(&self, x: Array4<f32>) -> Array4<f32> {
        x.mapv(|v| v.max(0.0))
    }
}

/// LeakyReLU with fixed negative slope.
pub struct LeakyRelu {
    pub slope: f32,
    cache: Option<Array4<f32>>,
}

impl LeakyRelu {
    pub fn new(slope: f32) -> LeakyRelu {
        LeakyRelu { slope, cache: None }
    }
}

impl Layer for LeakyRelu {
    fn forward(&mut self, x: Array4<f32>, train: bool) -> Array4<f32> {
        let s = self.slope;
        let y = x.mapv(|v| if v >= 0.0 { v } else { s * v });
        if train {
            self.cache = Some(x);
        }
        y
    }

    fn backward(&mut self, mut gy: Array4<f32>) -> Array4<f32> {
        let x = self.cache.take().expect("leaky relu backward without forward");
        let s = self.slope;
        ndarray::Zip::from(&mut gy).and(&x).for_each(|g, &v| {
            if v < 0.0 {
                *g *= s;
            }
        });
        gy
    }

    fn infer(&self, x: Array4<f32>) -> Array4<f32> {
        let s = self.slope;
        x.mapv(|v| if v >= 0.0 { v } else { s * v })
    }
}

/// Max pooling with square window; `pad` positions are treated as -inf.
pub struct MaxPool2d {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<PoolCache>,
}

struct PoolCache {
    argmax: Vec<u32>, // flat input index per output element
    in_shape: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn new(k: usize, stride: usize, pad: usize) -> MaxPool2d {
        MaxPool2d {
            k,
            stride,
            pad,
            cache: None,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn run(&self, x: &Array4<f32>, want_argmax: bool) -> (Array4<f32>, Vec<u32>) {
        let (n, c, h, w) = super::conv::dim4(x);
        let (ho, wo) = self.out_hw(h, w);
        let mut y = Array4::zeros((n, c, ho, wo));
        let mut argmax = if want_argmax {
            vec![0u32; n * c * ho * wo]
        } else {
            Vec::new()
        };
        let xs = x.as_slice().expect("pool input contiguous");
        let ys = y.as_slice_mut().unwrap();
        let mut oidx = 0usize;
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ki in 0..self.k {
                            let iy = (oi * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..self.k {
                                let ix = (oj * self.stride + kj) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = base + iy as usize * w + ix as usize;
                                let v = xs[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        ys[oidx] = best;
                        if want_argmax {
                            argmax[oidx] = best_idx as u32;
                        }
                        oidx += 1;
                    }
                }
            }
        }
        (y, argmax)
    }
}

impl Layer for MaxPool2d {
    fn forward(&mut self, x: Array4<f32>, train: bool) -> Array4<f32> {
        let (y, argmax) = self.run(&x, train);
        if train {
            self.cache = Some(PoolCache {
                argmax,
                in_shape: super::conv::dim4(&x),
            });
        }
        y
    }

    fn backward(&mut self, gy: Array4<f32>) -> Array4<f32> {
        let cache = self.cache.take().expect("pool backward without forward");
        let (n, c, h, w) = cache.in_shape;
        let mut gx = Array4::zeros((n, c, h, w));
        let gxs = gx.as_slice_mut().unwrap();
        for (g, &idx) in gy.iter().zip(cache.argmax.iter()) {
            gxs[idx as usize] += g;
        }
        gx
    }

    fn infer(&self, x: Array4<f32>) -> Array4<f32> {
        self.run(&x, false).0
    }
}

/// Inverted dropout; identity at inference.
pub struct Dropout {
    pub p: f32,
    rng: ChaCha8Rng,
    mask: Option<Array4<f32>>,
}

impl Dropout {
    pub fn new(p: f32, seed: u64) -> Dropout {
        assert!((0.0..1.0).contains(&p));
        Dropout {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
        }
    }
}

impl Layer for Dropout {
    fn forward(&mut self, x: Array4<f32>, train: bool) -> Array4<f32> {
        if !train || self.p == 0.0 {
            return x;
        }
        let keep = 1.0 - self.p;
        let scale = 1.0 / keep;
        let mask = Array4::from_shape_fn(x.raw_dim(), |_| {
            if self.rng.gen::<f32>() < keep {
                scale
            } else {
                0.0
            }
        });
        let y = &x * &mask;
        self.mask = Some(mask);
        y
    }

    fn backward(&mut self, gy: Array4<f32>) -> Array4<f32> {
        match self.mask.take() {
            Some(mask) => gy * &mask,
            None => gy,
        }
    }

    fn infer(&self, x: Array4<f32>) -> Array4<f32> {
        x
    }
}

/// (N, C, H, W) -> (N, C·H·W, 1, 1); keeps the head inside the NCHW chain.
pub struct Flatten {
    in_shape: Option<(usize, usize, usize, usize)>,
}

impl Flatten {
    pub fn new() -> Flatten {
        Flatten { in_shape: None }
    }
}

impl Default for Flatten {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for Flatten {
    fn forward(&mut self, x: Array4<f32>, train: bool) -> Array4<f32> {
        let dims = super::conv::dim4(&x);
        if train {
            self.in_shape = Some(dims);
        }
        let (n, c, h, w) = dims;
        x.into_shape_with_order((n, c * h * w, 1, 1)).unwrap()
    }

    fn backward(&mut self, gy: Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = self.in_shape.take().expect("flatten backward without forward");
        gy.into_shape_with_order((n, c, h, w)).unwrap()
    }

    fn infer(&self, x: Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = super::conv::dim4(&x);
        x.into_shape_with_order((n, c * h * w, 1, 1)).unwrap()
    }
}

/// Spatial mean per channel: (N, C, H, W) -> (N, C, 1, 1).
pub struct GlobalAvgPool {
    in_shape: Option<(usize, usize, usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> GlobalAvgPool {
        GlobalAvgPool { in_shape: None }
    }
}

impl Default for GlobalAvgPool {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: Array4<f32>, train: bool) -> Array4<f32> {
        if train {
            self.in_shape = Some(super::conv::dim4(&x));
        }
        self.infer(x)
    }

    fn backward(&mut self, gy: Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = self.in_shape.take().expect("gap backward without forward");
        let scale = 1.0 / (h * w) as f32;
        let mut gx = Array4::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let g = gy[[ni, ci, 0, 0]] * scale;
                gx.slice_mut(ndarray::s![ni, ci, .., ..]).fill(g);
            }
        }
        gx
    }

    fn infer(&self, x: Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = super::conv::dim4(&x);
        let scale = 1.0 / (h * w) as f32;
        let mut y = Array4::zeros((n, c, 1, 1));
        for ni in 0..n {
            for ci in 0..c {
                y[[ni, ci, 0, 0]] = x.slice(ndarray::s![ni, ci, .., ..]).sum() * scale;
            }
        }
        y
    }
}

/// Dense layer on flattened activations (N, F, 1, 1) -> (N, O, 1, 1).
pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    /// (out_f, in_f)
    pub weight: Param,
    pub bias: Param,
    cache_x: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(in_f: usize, out_f: usize, rng: &mut ChaCha8Rng) -> Linear {
        let weight = super::init::kaiming_normal(rng, &[out_f, in_f], in_f);
        Linear {
            in_f,
            out_f,
            weight: Param::new(weight),
            bias: Param::new(ArrayD::zeros(vec![out_f])),
            cache_x: None,
        }
    }

    fn run(&self, x2: &Array2<f32>) -> Array2<f32> {
        let wmat = self.weight.w.view().into_dimensionality::<Ix2>().unwrap();
        let bias = self.bias.w.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x2.dot(&wmat.t());
        for mut row in y.outer_iter_mut() {
            row += &bias;
        }
        y
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: Array4<f32>, train: bool) -> Array4<f32> {
        let n = x.shape()[0];
        let x2 = x.into_shape_with_order((n, self.in_f)).unwrap();
        let y = self.run(&x2);
        if train {
            self.cache_x = Some(x2);
        }
        y.into_shape_with_order((n, self.out_f, 1, 1)).unwrap()
    }

    fn backward(&mut self, gy: Array4<f32>) -> Array4<f32> {
        let x2 = self.cache_x.take().expect("linear backward without forward");
        let n = gy.shape()[0];
        let gy2 = gy.into_shape_with_order((n, self.out_f)).unwrap();
        {
            let gw = self.weight.grad_mut();
            let mut gw2 = gw.view_mut().into_dimensionality::<Ix2>().unwrap();
            gw2 += &gy2.t().dot(&x2);
        }
        {
            let gb = self.bias.grad_mut();
            let mut gb1 = gb.view_mut().into_dimensionality::<Ix1>().unwrap();
            gb1 += &gy2.sum_axis(Axis(0));
        }
        let wmat = self.weight.w.view().into_dimensionality::<Ix2>().unwrap();
        let gx = gy2.dot(&wmat);
        gx.into_shape_with_order((n, self.in_f, 1, 1)).unwrap()
    }

    fn infer(&self, x: Array4<f32>) -> Array4<f32> {
        let n = x.shape()[0];
        let x2 = x.into_shape_with_order((n, self.in_f)).unwrap();
        let y = self.run(&x2);
        y.into_shape_with_order((n, self.out_f, 1, 1)).unwrap()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}
