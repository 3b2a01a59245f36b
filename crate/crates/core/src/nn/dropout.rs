use rand::Rng;

use super::Mode;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

/// How kept activations are rescaled during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutVariant {
    /// Scale by `1/(1-p)`: preserves the expected L1 norm.
    L1Preserving,
    /// Scale by `1/sqrt(1-p)`: preserves the expected squared L2 norm.
    L2Preserving,
}

impl DropoutVariant {
    pub fn name(self) -> &'static str {
        match self {
            DropoutVariant::L1Preserving => "l1",
            DropoutVariant::L2Preserving => "l2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1" | "l1_preserving" => Ok(DropoutVariant::L1Preserving),
            "l2" | "l2_preserving" => Ok(DropoutVariant::L2Preserving),
            other => Err(Error::Config(format!("unknown dropout variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutSpec {
    p: f64,
    variant: DropoutVariant,
}

impl DropoutSpec {
    pub fn new(p: f64, variant: DropoutVariant) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        Ok(Self { p, variant })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn variant(&self) -> DropoutVariant {
        self.variant
    }

    /// Factor applied to kept elements.
    pub fn scale(&self) -> f64 {
        match self.variant {
            DropoutVariant::L1Preserving => 1.0 / (1.0 - self.p),
            DropoutVariant::L2Preserving => 1.0 / (1.0 - self.p).sqrt(),
        }
    }

    /// Draws `a_k ~ Bernoulli(1 - p)` for each of `len` elements.
    pub fn sample_mask<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<bool> {
        (0..len).map(|_| rng.random::<f64>() >= self.p).collect()
    }

    /// `a_k * scale * x_k` without recording anything.
    pub fn apply_mask(&self, x: &[f64], mask: &[bool]) -> Vec<f64> {
        let s = self.scale();
        x.iter()
            .zip(mask)
            .map(|(v, &keep)| if keep { v * s } else { 0.0 })
            .collect()
    }
}

/// Dropout layer. Eval mode returns `x` itself.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    spec: &DropoutSpec,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train => {
            let mask = spec.sample_mask(tape.value(x).len(), rng);
            dropout_with_mask(tape, x, spec, &mask)
        }
    }
}

/// Train-mode dropout with a caller-supplied mask.
pub fn dropout_with_mask(tape: &mut Tape, x: Var, spec: &DropoutSpec, mask: &[bool]) -> Result<Var> {
    let s = spec.scale();
    let factors = mask.iter().map(|&k| if k { s } else { 0.0 }).collect();
    tape.scale_by(x, factors)
}
