//! Trainable parameter container and SGD with momentum.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// A trainable tensor: value plus accumulated gradient and momentum buffer,
/// all the same shape. Gradients accumulate across backward calls and are
/// zeroed by the optimizer step.
#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub value: Matrix,
    pub grad: Matrix,
    pub momentum: Matrix,
}

impl ParamTensor {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        ParamTensor {
            value,
            grad: Matrix::zeros(r, c),
            momentum: Matrix::zeros(r, c),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn n_elements(&self) -> usize {
        self.value.rows() * self.value.cols()
    }
}

/// SGD hyperparameters with a step-decay learning-rate schedule:
/// `lr(epoch) = learning_rate * lr_decay_factor^(epoch / lr_decay_every_epochs)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must be in (0,1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_every_epochs == 0 {
            return Err(Error::Config("lr_decay_every_epochs must be positive".into()));
        }
        Ok(())
    }

    /// Piecewise-constant learning rate for the given epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.lr_decay_every_epochs) as i32;
        self.learning_rate * self.lr_decay_factor.powi(steps)
    }
}

/// One SGD-with-momentum update over a set of parameters:
///
/// ```text
/// v     <- momentum * v + (grad + weight_decay * value)
/// value <- value - lr(epoch) * v
/// ```
///
/// Gradients are zeroed afterwards. Weight decay enters the gradient (the
/// classic coupled formulation).
pub fn sgd_step(params: &mut [&mut ParamTensor], cfg: &SgdConfig, epoch: usize) -> Result<()> {
    let lr = cfg.lr_at(epoch);
    for p in params.iter_mut() {
        if p.grad.shape() != p.value.shape() || p.momentum.shape() != p.value.shape() {
            return Err(Error::Shape(format!(
                "param value {:?}, grad {:?}, momentum {:?}",
                p.value.shape(),
                p.grad.shape(),
                p.momentum.shape()
            )));
        }
        let (value, grad, momentum) = (
            p.value.as_mut_slice(),
            p.grad.as_mut_slice(),
            p.momentum.as_mut_slice(),
        );
        for ((v, g), m) in value.iter_mut().zip(grad.iter()).zip(momentum.iter_mut()) {
            *m = cfg.momentum * *m + (*g + cfg.weight_decay * *v);
            *v -= lr * *m;
        }
        p.zero_grad();
    }
    Ok(())
}
