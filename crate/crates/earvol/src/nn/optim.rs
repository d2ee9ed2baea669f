//! Optimizers and training-loop control (plateau LR schedule, early stop).

use super::Param;
use ndarray::ArrayD;

pub trait Optimizer {
    /// Apply one update. The parameter list must be the same (same order,
    /// same shapes) on every call; per-parameter state is kept positionally.
    fn step(&mut self, params: &mut [&mut Param]);
    fn lr(&self) -> f32;
    fn set_lr(&mut self, lr: f32);
}

/// SGD with classical momentum and L2 weight decay.
pub struct Sgd {
    lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<ArrayD<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Sgd {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut [&mut Param]) {
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| ArrayD::zeros(p.w.raw_dim()))
                .collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "parameter list changed");
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let Some(g) = p.g.as_ref() else { continue };
            ndarray::Zip::from(v.view_mut())
                .and(g)
                .and(&p.w)
                .for_each(|vv, &gv, &wv| {
                    *vv = self.momentum * *vv + gv + self.weight_decay * wv;
                });
            ndarray::Zip::from(&mut p.w).and(&*v).for_each(|wv, &vv| {
                *wv -= self.lr * vv;
            });
        }
    }

    fn lr(&self) -> f32 {
        self.lr
    }

    fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }
}

/// Adam with L2 weight decay added to the gradient.
pub struct Adam {
    lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    t: i32,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(lr: f32, weight_decay: f32) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [&mut Param]) {
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| ArrayD::zeros(p.w.raw_dim()))
                .collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let step = self.lr * bc2.sqrt() / bc1;
        for ((p, m), v) in params
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let Some(g) = p.g.as_ref() else { continue };
            ndarray::Zip::from(&mut p.w)
                .and(m.view_mut())
                .and(v.view_mut())
                .and(g)
                .for_each(|wv, mv, vv, &gv| {
                    let grad = gv + self.weight_decay * *wv;
                    *mv = self.beta1 * *mv + (1.0 - self.beta1) * grad;
                    *vv = self.beta2 * *vv + (1.0 - self.beta2) * grad * grad;
                    *wv -= step * *mv / (vv.sqrt() + self.eps);
                });
        }
    }

    fn lr(&self) -> f32 {
        self.lr
    }

    fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }
}

/// Scale all gradients down so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(params: &mut [&mut Param], max_norm: f32) -> f32 {
    let mut sq = 0.0f64;
    for p in params.iter() {
        if let Some(g) = p.g.as_ref() {
            sq += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
    }
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.g.as_mut() {
                g.mapv_inplace(|v| v * scale);
            }
        }
    }
    norm
}

/// Reduce-on-plateau: multiply the learning rate by `factor` after
/// `patience` consecutive epochs without improvement of the monitored value
/// (lower is better).
pub struct PlateauScheduler {
    pub factor: f32,
    pub patience: usize,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f32, patience: usize) -> PlateauScheduler {
        PlateauScheduler {
            factor,
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Record an epoch metric; returns the new LR if a reduction fired.
    pub fn observe(&mut self, metric: f64, opt: &mut dyn Optimizer) -> Option<f32> {
        if metric < self.best - 1e-12 {
            self.best = metric;
            self.stale = 0;
            return None;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            let lr = opt.lr() * self.factor;
            opt.set_lr(lr);
            return Some(lr);
        }
        None
    }
}

/// Early stopping after `patience` consecutive epochs without improvement
/// (lower is better).
pub struct EarlyStopper {
    pub patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> EarlyStopper {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Record an epoch metric; true means stop.
    pub fn observe(&mut self, metric: f64) -> bool {
        if metric < self.best - 1e-12 {
            self.best = metric;
            self.stale = 0;
            false
        } else {
            self.stale += 1;
            self.stale >= self.patience
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    fn quadratic_param(x0: f32) -> Param {
        Param::new(ArrayD::from_elem(vec![1], x0))
    }

    /// Minimize f(w) = (w - 3)^2 with both optimizers.
    fn converges(opt: &mut dyn Optimizer) -> f32 {
        let mut p = quadratic_param(0.0);
        for _ in 0..300 {
            let w = p.w[[0]];
            p.zero_grad();
            p.grad_mut()[[0]] = 2.0 * (w - 3.0);
            opt.step(&mut [&mut p]);
        }
        p.w[[0]]
    }

    #[test]
    fn sgd_minimizes_quadratic() {
        let mut opt = Sgd::new(0.05, 0.9, 0.0);
        let w = converges(&mut opt);
        assert!((w - 3.0).abs() < 1e-3, "w {w}");
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Adam::new(0.1, 0.0);
        let w = converges(&mut opt);
        assert!((w - 3.0).abs() < 1e-2, "w {w}");
    }

    #[test]
    fn weight_decay_shrinks_toward_zero() {
        let mut opt = Sgd::new(0.1, 0.0, 0.5);
        let mut p = quadratic_param(1.0);
        for _ in 0..100 {
            p.zero_grad();
            p.grad_mut()[[0]] = 0.0;
            opt.step(&mut [&mut p]);
        }
        assert!(p.w[[0]].abs() < 1e-2);
    }

    #[test]
    fn plateau_reduces_after_patience() {
        let mut opt = Sgd::new(1.0, 0.0, 0.0);
        let mut sched = PlateauScheduler::new(0.1, 3);
        assert!(sched.observe(1.0, &mut opt).is_none()); // improvement
        assert!(sched.observe(1.0, &mut opt).is_none()); // stale 1
        assert!(sched.observe(1.0, &mut opt).is_none()); // stale 2
        let lr = sched.observe(1.0, &mut opt); // stale 3 -> fire
        assert_eq!(lr, Some(0.1));
        assert!((opt.lr() - 0.1).abs() < 1e-6);
    }

    #[test]
    fn early_stop_after_stagnation() {
        let mut stop = EarlyStopper::new(2);
        assert!(!stop.observe(5.0));
        assert!(!stop.observe(4.0));
        assert!(!stop.observe(4.0));
        assert!(stop.observe(4.2));
    }
}
