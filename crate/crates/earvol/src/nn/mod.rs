//! Minimal CPU training stack for the three pipeline models.
//!
//! Tensors are `ndarray` arrays in NCHW layout. Layers cache what they need
//! during a training forward pass and consume the cache in `backward`; the
//! separate `infer` path is `&self`, caches nothing, and is safe to call from
//! parallel workers over a shared model. Convolutions lower to im2col + GEMM
//! and fan out over the batch through [`crate::par`], with gradient reductions
//! in index order so results do not depend on thread count.

mod checkpoint;
mod classify;
mod conv;
mod init;
mod layers;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use classify::{accuracy, cls_loss_and_grad, softmax_rows, ClsLoss};
pub use conv::{Conv2d, ConvTranspose2x2};
pub use init::kaiming_normal;
pub use layers::{
    BatchNorm2d, Dropout, Flatten, GlobalAvgPool, GroupNorm, LeakyRelu, Linear, MaxPool2d, Relu,
};
pub use optim::{clip_grad_norm, Adam, EarlyStopper, Optimizer, PlateauScheduler, Sgd};

use ndarray::{Array4, ArrayD};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A trainable tensor plus its (lazily allocated) gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub w: ArrayD<f32>,
    pub g: Option<ArrayD<f32>>,
}

impl Param {
    pub fn new(w: ArrayD<f32>) -> Param {
        Param { w, g: None }
    }

    /// Gradient buffer, allocated on first use.
    pub fn grad_mut(&mut self) -> &mut ArrayD<f32> {
        if self.g.is_none() {
            self.g = Some(ArrayD::zeros(self.w.raw_dim()));
        }
        self.g.as_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.g.as_mut() {
            g.fill(0.0);
        }
    }
}

/// One differentiable stage operating on NCHW activations.
pub trait Layer: Send + Sync {
    /// Training-mode forward; caches whatever `backward` will need.
    fn forward(&mut self, x: Array4<f32>, train: bool) -> Array4<f32>;
    /// Propagate the loss gradient, accumulating parameter gradients.
    fn backward(&mut self, gy: Array4<f32>) -> Array4<f32>;
    /// Evaluation-mode forward without caching; usable from parallel workers.
    fn infer(&self, x: Array4<f32>) -> Array4<f32>;

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    /// Tensors persisted in checkpoints, in a stable order. Defaults to the
    /// trainable parameters; layers with extra state (running statistics)
    /// override both methods.
    fn save_state(&self, out: &mut Vec<ArrayD<f32>>) {
        for p in self.params() {
            out.push(p.w.clone());
        }
    }
    fn load_state(&mut self, inp: &mut StateIter) -> Result<(), NnError> {
        for p in self.params_mut() {
            let t = inp.take(p.w.shape())?;
            p.w = t;
        }
        Ok(())
    }
}

/// Iterator over checkpoint tensors with shape validation.
pub struct StateIter {
    tensors: std::vec::IntoIter<ArrayD<f32>>,
}

impl StateIter {
    pub fn new(tensors: Vec<ArrayD<f32>>) -> StateIter {
        StateIter {
            tensors: tensors.into_iter(),
        }
    }

    pub fn take(&mut self, shape: &[usize]) -> Result<ArrayD<f32>, NnError> {
        let t = self
            .tensors
            .next()
            .ok_or_else(|| NnError::Checkpoint("ran out of tensors".into()))?;
        if t.shape() != shape {
            return Err(NnError::Checkpoint(format!(
                "tensor shape {:?} does not match model {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    }

    pub fn finish(mut self) -> Result<(), NnError> {
        if self.tensors.next().is_some() {
            return Err(NnError::Checkpoint("unused tensors remain".into()));
        }
        Ok(())
    }
}

/// A plain chain of layers.
pub struct Sequential {
    pub layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Sequential {
        Sequential { layers }
    }
}

impl Layer for Sequential {
    fn forward(&mut self, mut x: Array4<f32>, train: bool) -> Array4<f32> {
        for l in &mut self.layers {
            x = l.forward(x, train);
        }
        x
    }

    fn backward(&mut self, mut gy: Array4<f32>) -> Array4<f32> {
        for l in self.layers.iter_mut().rev() {
            gy = l.backward(gy);
        }
        gy
    }

    fn infer(&self, mut x: Array4<f32>) -> Array4<f32> {
        for l in &self.layers {
            x = l.infer(x);
        }
        x
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn save_state(&self, out: &mut Vec<ArrayD<f32>>) {
        for l in &self.layers {
            l.save_state(out);
        }
    }

    fn load_state(&mut self, inp: &mut StateIter) -> Result<(), NnError> {
        for l in &mut self.layers {
            l.load_state(inp)?;
        }
        Ok(())
    }
}

/// Count of trainable scalars across a parameter list.
pub fn parameter_count(params: &[&Param]) -> usize {
    params.iter().map(|p| p.w.len()).sum()
}
