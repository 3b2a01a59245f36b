use crate::autograd::{Param, Tensor};
use crate::error::{Error, Result};

/// Mini-batch SGD with heavy-ball momentum: `v ← μv + g; θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocities: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocities: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Applies one update and clears every gradient. All parameters must
    /// carry a gradient; a missing one means the backward pass skipped it.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(Error::State(format!("parameter {i} has no gradient at the optimizer step")));
        }
        if self.velocities.is_empty() {
            self.velocities = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        if self.velocities.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, got {}",
                self.velocities.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocities) {
            let g = p.grad.take().expect("checked above");
            if g.shape() != v.shape() {
                return Err(Error::shape("sgd_step", v.shape(), g.shape()));
            }
            for ((vi, gi), ti) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *ti -= self.lr * *vi;
            }
        }
        Ok(())
    }
}
