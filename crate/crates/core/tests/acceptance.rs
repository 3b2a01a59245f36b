//! Acceptance suite. Prints one PASS/FAIL line per criterion, in order, and
//! exits nonzero if any fails. Runs without the libtest harness so the lines
//! are never captured.

use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use afn_core::cli::selfcheck::{dropout_preservation, objective_grad_check, safn_identity, GRAD_TARGETS};
use afn_core::cli::{main_with_args, selfcheck::GRAD_TOL};
use afn_core::data::{gen_synthetic, make_partial, DomainDataset, ShiftSpec};
use afn_core::metrics::{robustness_gaps, robustness_protocol, Gaps};
use afn_core::nn::DropoutVariant;
use afn_core::objectives::{safn_targets, ObjectiveConfig};
use afn_core::train::{evaluate, feature_norms_eval, initial_model, run, RunMetrics, TrainConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const SEEDS: [u64; 3] = [0, 1, 2];

struct Task {
    source: DomainDataset,
    target: DomainDataset,
}

fn vanilla() -> &'static Task {
    static T: OnceLock<Task> = OnceLock::new();
    T.get_or_init(|| {
        let (source, target) = gen_synthetic(&ShiftSpec::canned()).expect("canned task");
        Task { source, target }
    })
}

fn partial() -> &'static Task {
    static T: OnceLock<Task> = OnceLock::new();
    T.get_or_init(|| {
        let v = vanilla();
        let (source, target) =
            make_partial(&v.source, &v.target, &ShiftSpec::canned_partial_keep()).expect("partial task");
        Task { source, target }
    })
}

struct Trained {
    acc_tgt: f64,
    norm_src: f64,
    norm_tgt: f64,
    metrics: RunMetrics,
    elapsed: Duration,
}

fn train(task: &Task, objective: ObjectiveConfig, seed: u64) -> Trained {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::with_objective(objective)
    };
    let start = Instant::now();
    let (model, metrics) = run(&cfg, &task.source, &task.target).expect("training run");
    let elapsed = start.elapsed();
    let acc_tgt = evaluate(&model, &task.target).expect("evaluate").overall;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let norm_src = mean(feature_norms_eval(&model, task.source.features()).expect("norms"));
    let norm_tgt = mean(feature_norms_eval(&model, task.target.features()).expect("norms"));
    Trained {
        acc_tgt,
        norm_src,
        norm_tgt,
        metrics,
        elapsed,
    }
}

fn runs(
    cell: &'static OnceLock<Vec<Trained>>,
    task: fn() -> &'static Task,
    objective: fn() -> ObjectiveConfig,
) -> &'static [Trained] {
    cell.get_or_init(|| SEEDS.iter().map(|&s| train(task(), objective(), s)).collect())
}

fn vanilla_source_only() -> &'static [Trained] {
    static R: OnceLock<Vec<Trained>> = OnceLock::new();
    runs(&R, vanilla, ObjectiveConfig::source_only)
}

fn vanilla_safn() -> &'static [Trained] {
    static R: OnceLock<Vec<Trained>> = OnceLock::new();
    runs(&R, vanilla, ObjectiveConfig::safn)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for target in GRAD_TARGETS {
        for seed in 0..10 {
            let gc = objective_grad_check(target, seed, None);
            worst = worst.max(gc.max_rel_err);
            if !gc.passed(GRAD_TOL) {
                failures.push(format!("{}@{seed}", target.name()));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        failures.is_empty() && secs < 30.0,
        format!("max rel err {worst:.2e} over 5 objectives x 10 seeds in {secs:.2} s; failing {failures:?}"),
    )
}

fn dropout_preservation_suite() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for p in [0.1, 0.5] {
        let (l1, _) = dropout_preservation(p, DropoutVariant::L1Preserving, 100_000, 11).map_err(|e| e.to_string())?;
        let (_, l2) = dropout_preservation(p, DropoutVariant::L2Preserving, 100_000, 12).map_err(|e| e.to_string())?;
        ok &= l1 < 0.02 && l2 < 0.02;
        parts.push(format!("p={p}: l1 {l1:.2e}, l2sq {l2:.2e}"));
    }
    check(ok, parts.join("; "))
}

fn safn_identity_suite() -> Outcome {
    let mut worst = (0.0f64, 0.0f64);
    for seed in 0..10 {
        for dr in [0.5, 1.0, 2.0] {
            let (pen, inner) = safn_identity(seed, dr).map_err(|e| e.to_string())?;
            worst = (worst.0.max(pen), worst.1.max(inner));
        }
    }
    check(
        worst.0 <= 1e-12 && worst.1 <= 1e-8,
        format!("penalty err {:.2e}, inner product err {:.2e}", worst.0, worst.1),
    )
}

fn hafn_convergence() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for &seed in &SEEDS {
        let t = train(vanilla(), ObjectiveConfig::hafn(), seed);
        let m = &t.metrics;
        let last = m.last_epoch().ok_or("no iterations")?;
        let src = m.epoch_mean(last, |r| r.mean_norm_src).unwrap();
        let tgt = m.epoch_mean(last, |r| r.mean_norm_tgt).unwrap();
        let first = m.mmfnd_epoch(1).unwrap().abs();
        let end = m.mmfnd_epoch(last).unwrap().abs();
        let in_band = |v: f64| (22.5..=27.5).contains(&v);
        let reduced = end <= 0.2 * first;
        let fast = t.elapsed < Duration::from_secs(300);
        ok &= in_band(src) && in_band(tgt) && reduced && fast;
        parts.push(format!(
            "seed {seed}: norms {src:.2}/{tgt:.2}, |mmfnd| {first:.3} -> {end:.3}, {:.1} s",
            t.elapsed.as_secs_f64()
        ));
    }
    check(ok, parts.join("; "))
}

fn transfer_ordering() -> Outcome {
    static PS: OnceLock<Vec<Trained>> = OnceLock::new();
    static PO: OnceLock<Vec<Trained>> = OnceLock::new();
    let tasks = [
        ("vanilla", vanilla_safn(), vanilla_source_only()),
        ("partial", runs(&PS, partial, ObjectiveConfig::safn), runs(&PO, partial, ObjectiveConfig::source_only)),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, safn, so) in tasks {
        for (i, (a, b)) in safn.iter().zip(so).enumerate() {
            ok &= a.acc_tgt > b.acc_tgt;
            parts.push(format!("{name} seed {i}: safn {:.4} vs source_only {:.4}", a.acc_tgt, b.acc_tgt));
        }
    }
    check(ok, parts.join("; "))
}

fn robustness_identity() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    // SAFN and DAN rows of the published negative-transfer table
    for (cng, ong, png) in [(5.0, 15.6, 20.6), (18.7, 25.0, 43.7)] {
        let fixture = Gaps::from_parts(cng, ong);
        ok &= fixture.png == png && fixture.png == fixture.cng + fixture.ong;
        parts.push(format!("fixture {cng} + {ong} = {}", fixture.png));
    }
    let v = vanilla();
    let cfg = TrainConfig::with_objective(ObjectiveConfig::safn());
    let r = robustness_protocol(&cfg, &v.source, &v.target, &ShiftSpec::canned_partial_keep(), 5.0)
        .map_err(|e| e.to_string())?;
    let rep = &r.report;
    let again = robustness_gaps(rep.a_labeled, rep.a_shared, rep.a_full).map_err(|e| e.to_string())?;
    ok &= rep.png == rep.cng + rep.ong && rep.ong.is_finite() && again.png == rep.png;
    parts.push(format!(
        "protocol a={:.2} b={:.2} c={:.2}: cng {:.2} + ong {:.2} = png {:.2}",
        rep.a_labeled, rep.a_shared, rep.a_full, rep.cng, rep.ong, rep.png
    ));
    check(ok, parts.join("; "))
}

fn norm_gap() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, (so, sa)) in vanilla_source_only().iter().zip(vanilla_safn()).enumerate() {
        let gap = (sa.norm_src - sa.norm_tgt).abs() / sa.norm_src;
        ok &= so.norm_tgt < so.norm_src && gap <= 0.25 && sa.norm_tgt > so.norm_tgt;
        parts.push(format!(
            "seed {i}: source_only {:.2}/{:.2}, safn {:.2}/{:.2} (gap {:.1}%)",
            so.norm_src,
            so.norm_tgt,
            sa.norm_src,
            sa.norm_tgt,
            100.0 * gap
        ));
    }
    check(ok, parts.join("; "))
}

fn cli(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("afn").chain(args.iter().copied()))
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .expect("out dir")
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let commands: [&[&str]; 6] = [
        &["gen-data"],
        &["train", "--set", "train.epochs=5"],
        &["eval"],
        &["dump-features"],
        &["robustness", "--set", "train.epochs=5", "--set", "data.keep=0,1"],
        &["selfcheck"],
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, args) in commands.iter().enumerate() {
        let mut snapshots = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("c{i}r{rep}"));
            let mut full: Vec<&str> = args.to_vec();
            let out_s = out.to_string_lossy().into_owned();
            if args[0] == "eval" || args[0] == "dump-features" {
                // reuse the checkpoint of the matching train run
                let src = tmp.path().join(format!("c1r{rep}"));
                std::fs::create_dir_all(&out).unwrap();
                std::fs::copy(src.join("checkpoint"), out.join("checkpoint")).unwrap();
            }
            full.extend(["--out", &out_s]);
            let code = cli(&full);
            if code != 0 {
                return Err(format!("{} exited {code}", args[0]));
            }
            snapshots.push(dir_bytes(&out));
        }
        let same = snapshots[0] == snapshots[1];
        ok &= same;
        let names: Vec<&str> = snapshots[0].iter().map(|(n, _)| n.as_str()).collect();
        parts.push(format!("{} [{}] {}", args[0], names.join(","), if same { "identical" } else { "DIFFER" }));
    }
    check(ok, parts.join("; "))
}

fn capped_variant() -> Outcome {
    let v = vanilla();
    let delta_r = 1.0;
    let base = TrainConfig {
        max_iterations: Some(10),
        epochs: 1,
        ..TrainConfig::with_objective(ObjectiveConfig::safn())
    };
    let init = initial_model(&base, v.source.dim(), 4).map_err(|e| e.to_string())?;
    let min_norm = feature_norms_eval(&init, v.source.features())
        .map_err(|e| e.to_string())?
        .into_iter()
        .chain(feature_norms_eval(&init, v.target.features()).map_err(|e| e.to_string())?)
        .fold(f64::INFINITY, f64::min);
    // below every norm and below Δr, so n + Δr always wins the max
    let low_r = 0.5 * min_norm.min(delta_r);
    let capped = TrainConfig {
        objective: ObjectiveConfig {
            radius: Some(low_r),
            ..ObjectiveConfig::safn_capped()
        },
        ..base.clone()
    };
    let (m_safn, r_safn) = run(&base, &v.source, &v.target).map_err(|e| e.to_string())?;
    let (m_cap, r_cap) = run(&capped, &v.source, &v.target).map_err(|e| e.to_string())?;
    let bits = |m: &afn_core::nn::ModelParams| m.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let same_traj = r_safn.iters == r_cap.iters && r_safn.iters.len() == 10;
    let same_model = bits(&m_safn) == bits(&m_cap);

    let norms = feature_norms_eval(&init, v.source.features()).map_err(|e| e.to_string())?;
    let high_r = norms.iter().cloned().fold(0.0, f64::max) + delta_r + 1.0;
    let lifted = safn_targets(&norms, delta_r, Some(high_r)).iter().all(|&t| t == high_r);
    let fixture = safn_targets(&[0.0, 2.5, 24.0, 30.0], 1.0, Some(25.0)) == [25.0, 25.0, 25.0, 31.0];

    check(
        min_norm > low_r && same_traj && same_model && lifted && fixture,
        format!(
            "R={low_r:.3} (min init norm {min_norm:.3}): {} iterations, trajectory {} and parameters {}; \
             R={high_r:.2} lifts all {} targets: {lifted}; fixture: {fixture}",
            r_cap.iters.len(),
            if same_traj { "bitwise equal" } else { "differ" },
            if same_model { "bitwise equal" } else { "differ" },
            norms.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient suite", gradient_suite),
        ("dropout preservation", dropout_preservation_suite),
        ("safn identity", safn_identity_suite),
        ("hafn convergence", hafn_convergence),
        ("transfer ordering", transfer_ordering),
        ("robustness identity", robustness_identity),
        ("norm gap", norm_gap),
        ("determinism", determinism),
        ("capped variant", capped_variant),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {name}: {detail} [{:.1} s]", start.elapsed().as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
