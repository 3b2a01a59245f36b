//! Invariant suite behind `afn selfcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check, BackwardFault, GradCheck, Tape, Tensor, Var};
use crate::error::Result;
use crate::metrics::Gaps;
use crate::nn::{Architecture, DropoutSpec, DropoutVariant, ModelParams, Mode};
use crate::objectives::{
    cross_entropy, entropy_min, feature_norms, objective, safn_penalty, safn_targets, Batch, ObjectiveConfig,
};
use crate::train::{checkpoint_to_string, parse_checkpoint};

pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-6;

/// Losses covered by the gradient suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    CrossEntropy,
    Hafn,
    Safn,
    SafnCapped,
    EntropyMin,
}

pub const GRAD_TARGETS: [GradTarget; 5] = [
    GradTarget::CrossEntropy,
    GradTarget::Hafn,
    GradTarget::Safn,
    GradTarget::SafnCapped,
    GradTarget::EntropyMin,
];

impl GradTarget {
    pub fn name(self) -> &'static str {
        match self {
            GradTarget::CrossEntropy => "cross_entropy",
            GradTarget::Hafn => "hafn",
            GradTarget::Safn => "safn",
            GradTarget::SafnCapped => "safn_capped",
            GradTarget::EntropyMin => "entropy_min",
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// A small random model (one backbone layer, one bottleneck block, head)
/// with dropout off and non-trivial batch-norm running statistics.
pub fn probe_model(seed: u64) -> ModelParams {
    let mut arch = Architecture::new(4, 3);
    arch.hidden = vec![5];
    arch.embedding_size = 4;
    arch.dropout = DropoutSpec::new(0.0, DropoutVariant::L2Preserving).expect("p = 0");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = ModelParams::init(arch, &mut rng).expect("valid probe architecture");
    for b in &mut m.bottleneck {
        b.bn.gamma.value = uniform(&mut rng, &[4], 0.5, 1.5);
        b.bn.beta.value = uniform(&mut rng, &[4], -0.5, 0.5);
        b.bn.running_mean = (0..4).map(|_| rng.random_range(-0.3..0.3)).collect();
        b.bn.running_var = (0..4).map(|_| rng.random_range(0.5..2.0)).collect();
    }
    m
}

/// Analytic vs central finite-difference gradient of one loss with respect
/// to every parameter of [`probe_model`], in eval mode. SAFN anchors are
/// evaluated at the check point and held fixed.
pub fn objective_grad_check(target: GradTarget, seed: u64, fault: Option<BackwardFault>) -> GradCheck {
    let model = probe_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let xs = uniform(&mut rng, &[6, 4], -2.0, 2.0);
    let xt = uniform(&mut rng, &[6, 4], -2.0, 2.0);
    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
    let theta0 = Tensor::vector(model.flatten());

    let forward = |tape: &mut Tape, theta: Var| -> Result<(Var, Var, Var, Var)> {
        let bound = model.bind_flat(tape, theta)?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let s = tape.constant(xs.clone());
        let t = tape.constant(xt.clone());
        let so = model.forward(tape, &bound, s, Mode::Eval, &mut unused)?;
        let to = model.forward(tape, &bound, t, Mode::Eval, &mut unused)?;
        Ok((so.features, to.features, so.logits, to.logits))
    };

    let anchor: Vec<f64> = {
        let mut tape = Tape::new();
        let theta = tape.constant(theta0.clone());
        match forward(&mut tape, theta).and_then(|(sf, tf, _, _)| {
            let all = tape.concat_rows(sf, tf)?;
            feature_norms(&mut tape, all)
        }) {
            Ok(n) => tape.value(n).data().to_vec(),
            Err(e) => {
                return GradCheck {
                    max_rel_err: f64::INFINITY,
                    worst_index: None,
                    non_finite_at: None,
                    error: Some(e.to_string()),
                }
            }
        }
    };
    let delta_r = 1.0;
    // floor in the middle of the grown norms so both branches of the max occur
    let mut grown = safn_targets(&anchor, delta_r, None);
    grown.sort_by(f64::total_cmp);
    let floor = grown[grown.len() / 2];

    let cfg = match target {
        GradTarget::Hafn => ObjectiveConfig {
            radius: Some(3.0),
            ..ObjectiveConfig::hafn()
        },
        GradTarget::Safn => ObjectiveConfig::safn(),
        GradTarget::SafnCapped => ObjectiveConfig {
            radius: Some(floor),
            ..ObjectiveConfig::safn_capped()
        },
        _ => ObjectiveConfig::source_only(),
    };

    grad_check(
        |tape: &mut Tape, theta: Var| {
            if let Some(f) = fault {
                tape.inject_fault(f);
            }
            let (sf, tf, sl, tl) = forward(tape, theta)?;
            match target {
                GradTarget::CrossEntropy => cross_entropy(tape, sl, &labels),
                GradTarget::EntropyMin => entropy_min(tape, tl),
                _ => Ok(objective(
                    tape,
                    Batch {
                        source_features: sf,
                        target_features: tf,
                        source_logits: sl,
                        target_logits: tl,
                        labels: &labels,
                        anchor_norms: Some(&anchor),
                    },
                    &cfg,
                )?
                .total),
            }
        },
        &theta0,
        FD_STEP,
    )
}

/// Monte Carlo relative errors `(l1, l2²)` of the expected masked norms
/// against the unmasked norms of a fixed vector.
pub fn dropout_preservation(p: f64, variant: DropoutVariant, draws: usize, seed: u64) -> Result<(f64, f64)> {
    let spec = DropoutSpec::new(p, variant)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let l1 = x.iter().map(|v| v.abs()).sum::<f64>();
    let l2 = x.iter().map(|v| v * v).sum::<f64>();
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..draws {
        let mask = spec.sample_mask(x.len(), &mut rng);
        let y = spec.apply_mask(&x, &mask);
        s1 += y.iter().map(|v| v.abs()).sum::<f64>();
        s2 += y.iter().map(|v| v * v).sum::<f64>();
    }
    let n = draws as f64;
    Ok(((s1 / n - l1).abs() / l1, (s2 / n - l2).abs() / l2))
}

/// `(max |penalty − Δr²|, max per-sample |⟨∇_f penalty, f⟩ + 2Δr‖f‖/n|)`
/// on random features.
pub fn safn_identity(seed: u64, delta_r: f64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 8;
    let f0 = uniform(&mut rng, &[n, 5], -3.0, 3.0);
    let mut tape = Tape::new();
    let f = tape.leaf(f0.clone(), true);
    let norms = feature_norms(&mut tape, f)?;
    let pen = safn_penalty(&mut tape, norms, delta_r, None)?;
    let pen_err = (tape.value(pen).item() - delta_r * delta_r).abs();
    tape.backward(pen)?;
    let g = tape.grad(f).expect("leaf gradient");
    let mut inner_err: f64 = 0.0;
    for i in 0..n {
        let dot: f64 = g.row(i).iter().zip(f0.row(i)).map(|(a, b)| a * b).sum();
        let norm = f0.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        inner_err = inner_err.max((dot + 2.0 * delta_r * norm / n as f64).abs());
    }
    Ok((pen_err, inner_err))
}

/// One named invariant's outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Runs every invariant. `fault` corrupts backward rules inside the
/// gradient checks only, to show the suite catches it.
pub fn run_selfcheck(fault: Option<BackwardFault>) -> Vec<Check> {
    let mut out = Vec::new();
    for target in GRAD_TARGETS {
        let worst = (0..3)
            .map(|seed| objective_grad_check(target, seed, fault))
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("three seeds");
        out.push(Check::new(
            format!("grad_check.{}", target.name()),
            worst.passed(GRAD_TOL),
            format!("max_rel_err={:.3e}", worst.max_rel_err),
        ));
    }

    for p in [0.1, 0.5] {
        for (variant, label) in [(DropoutVariant::L1Preserving, "l1"), (DropoutVariant::L2Preserving, "l2")] {
            let check = dropout_preservation(p, variant, 100_000, 7).map(|(e1, e2)| {
                let e = if variant == DropoutVariant::L1Preserving { e1 } else { e2 };
                Check::new(
                    format!("dropout.{label}_preserved.p{p}"),
                    e < 0.02,
                    format!("rel_err={e:.3e}"),
                )
            });
            out.push(check.unwrap_or_else(|e| Check::new(format!("dropout.{label}.p{p}"), false, e.to_string())));
        }
    }

    out.push(match safn_identity(3, 1.0) {
        Ok((pen, inner)) => Check::new(
            "safn.step_identity",
            pen < 1e-12 && inner < 1e-8,
            format!("penalty_err={pen:.3e} inner_err={inner:.3e}"),
        ),
        Err(e) => Check::new("safn.step_identity", false, e.to_string()),
    });

    let capped = safn_targets(&[10.0, 30.0], 1.0, Some(25.0));
    out.push(Check::new(
        "safn_capped.targets",
        capped == [25.0, 31.0],
        format!("{capped:?}"),
    ));

    let rows = [(5.0, 15.6, 20.6), (18.7, 25.0, 43.7)];
    let ok = rows.iter().all(|&(c, o, p)| Gaps::from_parts(c, o).png == p);
    out.push(Check::new("gaps.png_is_cng_plus_ong", ok, "published rows"));

    let model = probe_model(11);
    let round = parse_checkpoint(&checkpoint_to_string(&model));
    out.push(Check::new(
        "checkpoint.round_trip",
        round.as_ref().is_ok_and(|m| *m == model),
        round.err().map(|e| e.to_string()).unwrap_or_else(|| "bitwise".into()),
    ));
    out
}

/// `invariant,status,detail` lines.
pub fn report_csv(checks: &[Check]) -> String {
    let mut s = String::from("invariant,status,detail\n");
    for c in checks {
        s.push_str(&format!(
            "{},{},{}\n",
            c.name,
            if c.passed { "pass" } else { "fail" },
            c.detail
        ));
    }
    s
}
