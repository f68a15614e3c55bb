//! Momentum gradient descent over an ordered parameter list.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-2,
            momentum: 0.9,
        }
    }
}

/// Classic momentum SGD: `buf = mu * buf + g; w -= lr * buf`.
/// Buffers align positionally with the parameter order, which is fixed by
/// the model's parameter registry.
pub struct Momentum {
    cfg: OptimConfig,
    buffers: Vec<Tensor>,
}

impl Momentum {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {}",
                cfg.lr
            )));
        }
        if !(0.0..1.0).contains(&cfg.momentum) {
            return Err(Error::Parameter(format!(
                "momentum must be in [0, 1), got {}",
                cfg.momentum
            )));
        }
        Ok(Momentum {
            cfg,
            buffers: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Usage(format!(
                "optimizer step: {} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for ((param, grad), buf) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            if param.shape() != grad.shape() {
                return Err(Error::Dimension(format!(
                    "optimizer step: param shape {:?} vs grad shape {:?}",
                    param.shape(),
                    grad.shape()
                )));
            }
            for ((w, g), b) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(buf.data_mut())
            {
                *b = self.cfg.momentum * *b + g;
                *w -= self.cfg.lr * *b;
            }
        }
        Ok(())
    }
}
