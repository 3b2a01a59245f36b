use super::Mode;
use crate::autograd::{Param, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Per-column mean and biased variance of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(features: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[features], 1.0)),
            beta: Param::new(Tensor::zeros(&[features])),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum,
            eps,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalizes `x`. `gamma`/`beta` are this layer's parameters recorded on
    /// `tape`. Train mode returns the batch statistics so the caller can fold
    /// them into the running estimates with [`BatchNormState::update_running`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
                Ok((y, Some(BatchStats { mean, var })))
            }
            Mode::Eval => {
                let y = tape.batch_norm_eval(
                    x,
                    gamma,
                    beta,
                    &self.running_mean,
                    &self.running_var,
                    self.eps,
                )?;
                Ok((y, None))
            }
        }
    }

    pub fn update_running(&mut self, stats: &BatchStats) -> Result<()> {
        if stats.mean.len() != self.features() || stats.var.len() != self.features() {
            return Err(Error::shape(
                "update_running",
                &[self.features()],
                &[stats.mean.len()],
            ));
        }
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
        Ok(())
    }
}

/// Standalone batch norm on a tensor: binds the layer parameters, runs the
/// forward pass and, in train mode, updates the running statistics.
pub fn batchnorm(tape: &mut Tape, x: Var, state: &mut BatchNormState, mode: Mode) -> Result<(Var, Var, Var)> {
    let gamma = tape.leaf(state.gamma.value.clone(), true);
    let beta = tape.leaf(state.beta.value.clone(), true);
    let (y, stats) = state.forward(tape, x, gamma, beta, mode)?;
    if let Some(stats) = stats {
        state.update_running(&stats)?;
    }
    Ok((y, gamma, beta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn standardized() -> Tensor {
        // each column has mean 0 and biased variance 1
        Tensor::from_rows(&[[1.0, -1.0], [-1.0, 1.0], [1.0, 1.0], [-1.0, -1.0]]).unwrap()
    }

    #[test]
    fn identity_on_standardized_input() {
        let mut t = Tape::new();
        let mut bn = BatchNormState::new(2, DEFAULT_BN_MOMENTUM, DEFAULT_BN_EPS);
        let x = t.constant(standardized());
        let (y, _, _) = batchnorm(&mut t, x, &mut bn, Mode::Train).unwrap();
        for (a, b) in t.value(y).data().iter().zip(standardized().data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn affine_case() {
        let mut t = Tape::new();
        let mut bn = BatchNormState::new(2, DEFAULT_BN_MOMENTUM, DEFAULT_BN_EPS);
        bn.gamma.value = Tensor::full(&[2], 2.0);
        bn.beta.value = Tensor::full(&[2], 3.0);
        let x = t.constant(standardized());
        let (y, _, _) = batchnorm(&mut t, x, &mut bn, Mode::Train).unwrap();
        for (a, b) in t.value(y).data().iter().zip(standardized().data()) {
            assert!((a - (2.0 * b + 3.0)).abs() < 1e-4);
        }
    }

    #[test]
    fn running_stats_update_and_eval_uses_them() {
        let mut t = Tape::new();
        let mut bn = BatchNormState::new(1, 0.1, DEFAULT_BN_EPS);
        let x = t.constant(Tensor::from_rows(&[[2.0], [4.0]]).unwrap());
        batchnorm(&mut t, x, &mut bn, Mode::Train).unwrap();
        assert!((bn.running_mean[0] - 0.3).abs() < 1e-15);
        assert!((bn.running_var[0] - (0.9 + 0.1)).abs() < 1e-15);

        let before = bn.clone();
        let (y1, _, _) = batchnorm(&mut t, x, &mut bn, Mode::Eval).unwrap();
        let (y2, _, _) = batchnorm(&mut t, x, &mut bn, Mode::Eval).unwrap();
        assert_eq!(bn, before);
        assert_eq!(t.value(y1).data(), t.value(y2).data());
        let expected = (2.0 - 0.3) / (1.0f64 + 1e-5).sqrt();
        assert!((t.value(y1).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn single_sample_train_batch_rejected() {
        let mut t = Tape::new();
        let mut bn = BatchNormState::new(3, DEFAULT_BN_MOMENTUM, DEFAULT_BN_EPS);
        let x = t.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            batchnorm(&mut t, x, &mut bn, Mode::Train),
            Err(Error::Data(_))
        ));
        assert!(batchnorm(&mut t, x, &mut bn, Mode::Eval).is_ok());
    }
}
