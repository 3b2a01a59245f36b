//! Losses and statistics over bottleneck features.
//!
//! All norm-based terms use batch means in place of full-dataset expectations.

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.05;
pub const DEFAULT_RADIUS: f64 = 25.0;
pub const DEFAULT_DELTA_R: f64 = 1.0;
pub const DEFAULT_ENT_WEIGHT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    SourceOnly,
    Hafn,
    Safn,
    SafnCapped,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::Hafn => "hafn",
            Variant::Safn => "safn",
            Variant::SafnCapped => "safn_capped",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source_only" => Ok(Variant::SourceOnly),
            "hafn" => Ok(Variant::Hafn),
            "safn" => Ok(Variant::Safn),
            "safn_capped" => Ok(Variant::SafnCapped),
            other => Err(Error::Config(format!(
                "unknown objective variant `{other}` (expected source_only, hafn, safn or safn_capped)"
            ))),
        }
    }
}

/// Adaptation variant and its hyperparameters.
///
/// The distance between a norm and its target is always the squared
/// difference.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    pub lambda: f64,
    /// Shared target norm `R` (hafn) or terminal floor (safn_capped).
    pub radius: Option<f64>,
    /// Per-iteration enlargement step `Δr` (safn variants).
    pub delta_r: Option<f64>,
    /// Adds the target entropy term when set.
    pub ent: bool,
    pub ent_weight: f64,
}

impl ObjectiveConfig {
    pub fn source_only() -> Self {
        Self {
            variant: Variant::SourceOnly,
            lambda: 0.0,
            radius: None,
            delta_r: None,
            ent: false,
            ent_weight: DEFAULT_ENT_WEIGHT,
        }
    }

    /// λ = 0.05, R = 25.
    pub fn hafn() -> Self {
        Self {
            variant: Variant::Hafn,
            lambda: DEFAULT_LAMBDA,
            radius: Some(DEFAULT_RADIUS),
            ..Self::source_only()
        }
    }

    /// λ = 0.05, Δr = 1.0.
    pub fn safn() -> Self {
        Self {
            variant: Variant::Safn,
            lambda: DEFAULT_LAMBDA,
            delta_r: Some(DEFAULT_DELTA_R),
            ..Self::source_only()
        }
    }

    pub fn safn_capped() -> Self {
        Self {
            variant: Variant::SafnCapped,
            radius: Some(DEFAULT_RADIUS),
            ..Self::safn()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.ent_weight >= 0.0) {
            return Err(Error::Config(format!("ent_weight must be >= 0, got {}", self.ent_weight)));
        }
        match self.variant {
            Variant::SourceOnly => {}
            Variant::Hafn => {
                self.require_radius()?;
            }
            Variant::Safn => {
                self.require_delta_r()?;
            }
            Variant::SafnCapped => {
                self.require_radius()?;
                self.require_delta_r()?;
            }
        }
        Ok(())
    }

    fn require_radius(&self) -> Result<f64> {
        match self.radius {
            Some(r) if r > 0.0 => Ok(r),
            Some(r) => Err(Error::Config(format!("radius R must be > 0, got {r}"))),
            None => Err(Error::Config(format!(
                "variant {} requires the radius R",
                self.variant.name()
            ))),
        }
    }

    fn require_delta_r(&self) -> Result<f64> {
        match self.delta_r {
            Some(d) if d > 0.0 => Ok(d),
            Some(d) => Err(Error::Config(format!("delta_r must be > 0, got {d}"))),
            None => Err(Error::Config(format!(
                "variant {} requires delta_r",
                self.variant.name()
            ))),
        }
    }
}

/// Mean softmax cross-entropy of `logits` (batch × C) against class indices.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let log_probs = tape.log_softmax(logits)?;
    let picked = tape.pick(log_probs, labels)?;
    let mean = tape.mean(picked);
    Ok(tape.scalar_mul(mean, -1.0))
}

/// Per-sample L2 norm of a batch × E feature matrix.
pub fn feature_norms(tape: &mut Tape, features: Var) -> Result<Var> {
    tape.row_l2_norm(features)
}

/// Difference of mean feature norms between the source and target samples.
pub fn mmfnd(source_norms: &[f64], target_norms: &[f64]) -> Result<f64> {
    if source_norms.is_empty() || target_norms.is_empty() {
        return Err(Error::Data("mmfnd needs nonempty source and target norms".into()));
    }
    Ok(mean_of(source_norms) - mean_of(target_norms))
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `(mean(source_norms) − R)² + (mean(target_norms) − R)²`.
pub fn hafn_penalty(tape: &mut Tape, source_norms: Var, target_norms: Var, radius: f64) -> Result<Var> {
    let ms = tape.mean(source_norms);
    let mt = tape.mean(target_norms);
    let ds = tape.scalar_add(ms, -radius);
    let dt = tape.scalar_add(mt, -radius);
    let ps = tape.square(ds);
    let pt = tape.square(dt);
    tape.add(ps, pt)
}

/// Per-sample norm targets: the current norm (no gradient) plus `Δr`,
/// raised to at least `cap` when one is given.
pub fn safn_targets(norms: &[f64], delta_r: f64, cap: Option<f64>) -> Vec<f64> {
    norms
        .iter()
        .map(|&n| {
            let t = n + delta_r;
            match cap {
                Some(r) => t.max(r),
                None => t,
            }
        })
        .collect()
}

/// `mean_i (target_i − ‖f_i‖)²` with targets from [`safn_targets`] held
/// fixed. `norms` covers the combined source and target batch.
pub fn safn_penalty(tape: &mut Tape, norms: Var, delta_r: f64, cap: Option<f64>) -> Result<Var> {
    let anchor = tape.value(norms).data().to_vec();
    safn_penalty_anchored(tape, norms, &anchor, delta_r, cap)
}

/// As [`safn_penalty`], but the targets grow from `anchor` (norms of the
/// same samples under the previous parameters) instead of the current norms.
pub fn safn_penalty_anchored(
    tape: &mut Tape,
    norms: Var,
    anchor: &[f64],
    delta_r: f64,
    cap: Option<f64>,
) -> Result<Var> {
    let current = tape.value(norms);
    if anchor.len() != current.len() {
        return Err(Error::shape("safn_penalty", current.shape(), &[anchor.len()]));
    }
    let targets = Tensor::new(current.shape().to_vec(), safn_targets(anchor, delta_r, cap))?;
    let targets = tape.constant(targets);
    let diff = tape.sub(targets, norms)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Mean Shannon entropy of `softmax(logits)` per row.
pub fn entropy_min(tape: &mut Tape, logits: Var) -> Result<Var> {
    let log_p = tape.log_softmax(logits)?;
    let p = tape.exp(log_p);
    let plogp = tape.mul(p, log_p)?;
    let s = tape.sum(plogp);
    let rows = tape.value(logits).rows() as f64;
    Ok(tape.scalar_mul(s, -1.0 / rows))
}

/// The pieces of one iteration's objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveTerms {
    pub total: Var,
    pub classification: Var,
    /// λ-weighted norm penalty; `None` for source_only.
    pub norm_penalty: Option<Var>,
    /// Weighted entropy term, when enabled.
    pub entropy: Option<Var>,
    pub source_norms: Var,
    pub target_norms: Var,
}

/// Inputs of [`objective`] for one source batch and one target batch.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub source_features: Var,
    pub target_features: Var,
    pub source_logits: Var,
    pub target_logits: Var,
    pub labels: &'a [usize],
    /// Norms of the combined source+target batch to grow from in the SAFN
    /// variants. `None` uses the current forward's norms with gradient
    /// flow cut.
    pub anchor_norms: Option<&'a [f64]>,
}

/// Assembles the configured objective.
pub fn objective(tape: &mut Tape, batch: Batch<'_>, cfg: &ObjectiveConfig) -> Result<ObjectiveTerms> {
    cfg.validate()?;
    let ce = cross_entropy(tape, batch.source_logits, batch.labels)?;
    let sn = feature_norms(tape, batch.source_features)?;
    let tn = feature_norms(tape, batch.target_features)?;

    let raw_penalty = match cfg.variant {
        Variant::SourceOnly => None,
        Variant::Hafn => Some(hafn_penalty(tape, sn, tn, cfg.require_radius()?)?),
        Variant::Safn | Variant::SafnCapped => {
            let cap = match cfg.variant {
                Variant::SafnCapped => Some(cfg.require_radius()?),
                _ => None,
            };
            let all = tape.concat_rows(batch.source_features, batch.target_features)?;
            let norms = feature_norms(tape, all)?;
            let delta_r = cfg.require_delta_r()?;
            Some(match batch.anchor_norms {
                Some(anchor) => safn_penalty_anchored(tape, norms, anchor, delta_r, cap)?,
                None => safn_penalty(tape, norms, delta_r, cap)?,
            })
        }
    };
    let norm_penalty = raw_penalty.map(|p| tape.scalar_mul(p, cfg.lambda));
    let entropy = if cfg.ent {
        let e = entropy_min(tape, batch.target_logits)?;
        Some(tape.scalar_mul(e, cfg.ent_weight))
    } else {
        None
    };

    let mut total = ce;
    for term in [norm_penalty, entropy].into_iter().flatten() {
        total = tape.add(total, term)?;
    }
    Ok(ObjectiveTerms {
        total,
        classification: ce,
        norm_penalty,
        entropy,
        source_norms: sn,
        target_norms: tn,
    })
}

/// HAFN objective: cross-entropy plus the λ-weighted hard norm penalty.
pub fn hafn(
    tape: &mut Tape,
    source_f: Var,
    target_f: Var,
    source_logits: Var,
    labels: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<Var> {
    if cfg.variant != Variant::Hafn {
        return Err(Error::Config("hafn called with a non-hafn config".into()));
    }
    let terms = objective(
        tape,
        Batch {
            source_features: source_f,
            target_features: target_f,
            source_logits,
            target_logits: source_logits,
            labels,
            anchor_norms: None,
        },
        &ObjectiveConfig { ent: false, ..cfg.clone() },
    )?;
    Ok(terms.total)
}

/// SAFN objective (uncapped or capped, per `cfg.variant`).
pub fn safn(
    tape: &mut Tape,
    source_f: Var,
    target_f: Var,
    source_logits: Var,
    labels: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<Var> {
    if !matches!(cfg.variant, Variant::Safn | Variant::SafnCapped) {
        return Err(Error::Config("safn called with a non-safn config".into()));
    }
    let terms = objective(
        tape,
        Batch {
            source_features: source_f,
            target_features: target_f,
            source_logits,
            target_logits: source_logits,
            labels,
            anchor_norms: None,
        },
        &ObjectiveConfig { ent: false, ..cfg.clone() },
    )?;
    Ok(terms.total)
}
