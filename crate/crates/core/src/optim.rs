//! SGD with momentum and L2 weight decay folded into the gradient.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;
pub const DEFAULT_BASE_LR: f64 = 0.05;
/// Batch size the base learning rate is quoted for.
pub const LR_REFERENCE_BATCH: f64 = 256.0;

#[derive(Clone, Debug)]
pub struct SgdState {
    velocity: Vec<Tensor>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    batch_size: usize,
}

impl SgdState {
    pub fn new(momentum: f64, weight_decay: f64, base_lr: f64, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        Ok(Self {
            velocity: Vec::new(),
            momentum,
            weight_decay,
            base_lr,
            batch_size,
        })
    }

    pub fn with_defaults(batch_size: usize) -> Result<Self> {
        Self::new(DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY, DEFAULT_BASE_LR, batch_size)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn set_batch_size(&mut self, batch_size: usize) -> Result<()> {
        if batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        self.batch_size = batch_size;
        Ok(())
    }

    /// `base_lr * batch_size / 256`.
    pub fn effective_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / LR_REFERENCE_BATCH
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// One update: `g' = g + wd·p`, `v ← μ·v + g'`, `p ← p − lr·v`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(invalid("optimizer state does not match parameter count"));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if p.shape() != g.shape() {
                return Err(shape_err("sgd_step", p.shape(), g.shape()));
            }
            if p.shape() != v.shape() {
                return Err(shape_err("sgd_step velocity", p.shape(), v.shape()));
            }
        }
        let lr = self.effective_lr();
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let g_dec = gv + self.weight_decay * *pv;
                *vv = self.momentum * *vv + g_dec;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
