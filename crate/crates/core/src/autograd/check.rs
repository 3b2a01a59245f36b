use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    /// First coordinate where either estimate was NaN or infinite.
    pub non_finite_at: Option<usize>,
    /// Set when the function itself failed to evaluate.
    pub error: Option<String>,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.error.is_none() && self.non_finite_at.is_none() && self.max_rel_err < tol
    }

    fn failed(msg: String) -> Self {
        Self {
            max_rel_err: f64::INFINITY,
            worst_index: None,
            non_finite_at: None,
            error: Some(msg),
        }
    }
}

fn evaluate<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), false);
    let y = f(&mut tape, x)?;
    Ok(tape.value(y).item())
}

/// Checks the gradient of the scalar function `f` at `point` coordinate by
/// coordinate with step `h`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> GradCheck
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let analytic = match f(&mut tape, x).and_then(|y| tape.backward(y)) {
        Ok(()) => tape
            .grad(x)
            .unwrap_or_else(|| Tensor::zeros(point.shape())),
        Err(e) => return GradCheck::failed(e.to_string()),
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_index: None,
        non_finite_at: None,
        error: None,
    };
    let mut probe = point.clone();
    for k in 0..point.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = evaluate(&f, &probe);
        probe.data_mut()[k] = orig - h;
        let minus = evaluate(&f, &probe);
        probe.data_mut()[k] = orig;
        let (plus, minus) = match (plus, minus) {
            (Ok(p), Ok(m)) => (p, m),
            (Err(e), _) | (_, Err(e)) => return GradCheck::failed(format!("coordinate {k}: {e}")),
        };
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[k];
        if !numeric.is_finite() || !a.is_finite() {
            report.non_finite_at = Some(k);
            report.max_rel_err = f64::INFINITY;
            report.worst_index = Some(k);
            return report;
        }
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if rel > report.max_rel_err || report.worst_index.is_none() {
            report.max_rel_err = rel;
            report.worst_index = Some(k);
        }
    }
    report
}
