//! Negative-transfer gaps, the three-regime robustness protocol, and the
//! metrics CSV files.
//!
//! Floats are written as `{:.16e}` (17 significant digits), which parses
//! back to the identical `f64`. Lines end in `\n` and the decimal separator
//! is always `.`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::thread;

use crate::data::{make_partial, subsample_labeled_target, with_domain, Domain, DomainDataset};
use crate::error::{Error, Result};
use crate::objectives::ObjectiveConfig;
use crate::train::{evaluate, run_with_eval, EpochRecord, IterRecord, RunMetrics, TrainConfig};

pub const ITER_HEADER: &str = "iter,epoch,loss_total,loss_cls,loss_norm,mean_norm_src,mean_norm_tgt,mmfnd_abs";
pub const EPOCH_HEADER: &str = "epoch,acc_src,acc_tgt,acc_tgt_per_class";
pub const ROBUSTNESS_HEADER: &str = "variant,l_percent,a_labeled,a_shared,a_full,cng,ong,png";

/// Closed, outlier and partial negative gaps, in accuracy points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaps {
    pub cng: f64,
    pub ong: f64,
    pub png: f64,
}

impl Gaps {
    /// Builds the triple from its two independent parts. `png` is their sum,
    /// so `png == cng + ong` holds bit for bit.
    pub fn from_parts(cng: f64, ong: f64) -> Self {
        Self { cng, ong, png: cng + ong }
    }
}

/// `cng = a_labeled − a_shared`, `ong = a_shared − a_full`,
/// `png = a_labeled − a_full`. Inputs are percentages.
pub fn robustness_gaps(a_labeled: f64, a_shared: f64, a_full: f64) -> Result<Gaps> {
    for (name, v) in [("a_labeled", a_labeled), ("a_shared", a_shared), ("a_full", a_full)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::Data(format!("{name} = {v} is outside [0, 100]")));
        }
    }
    Ok(Gaps::from_parts(a_labeled - a_shared, a_shared - a_full))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessReport {
    pub variant: String,
    pub l_percent: f64,
    pub a_labeled: f64,
    pub a_shared: f64,
    pub a_full: f64,
    pub cng: f64,
    pub ong: f64,
    pub png: f64,
}

impl RobustnessReport {
    pub fn new(variant: &str, l_percent: f64, a_labeled: f64, a_shared: f64, a_full: f64) -> Result<Self> {
        let g = robustness_gaps(a_labeled, a_shared, a_full)?;
        Ok(Self {
            variant: variant.to_string(),
            l_percent,
            a_labeled,
            a_shared,
            a_full,
            cng: g.cng,
            ong: g.ong,
            png: g.png,
        })
    }
}

/// Datasets of the three protocol regimes.
#[derive(Clone, Debug)]
pub struct RegimeData {
    /// Stratified l% labeled subsample of the kept target classes (regime a).
    pub labeled: DomainDataset,
    /// Source restricted to the kept classes (regime b).
    pub shared_source: DomainDataset,
    /// Full source including outlier classes (regime c).
    pub full_source: DomainDataset,
    /// Target restricted to the kept classes: the unlabeled training target of
    /// regimes b and c, and the evaluation set of all three.
    pub target: DomainDataset,
}

pub fn regime_datasets(
    source: &DomainDataset,
    target: &DomainDataset,
    keep: &[usize],
    l_percent: f64,
    seed: u64,
) -> Result<RegimeData> {
    let (full_source, target) = make_partial(source, target, keep)?;
    let kept: BTreeSet<usize> = keep.iter().copied().collect();
    let shared_source = if kept == *source.label_space() {
        source.clone()
    } else {
        source.filter_classes(&kept)?
    };
    let labeled = subsample_labeled_target(&target, l_percent, seed)?;
    Ok(RegimeData {
        labeled,
        shared_source,
        full_source,
        target,
    })
}

/// Result of [`robustness_protocol`].
#[derive(Clone, Debug)]
pub struct RobustnessRun {
    pub report: RobustnessReport,
    /// Fingerprint of the one evaluation set all regimes were scored on.
    pub eval_fingerprint: String,
    /// Training metrics of regimes a, b and c.
    pub runs: [RunMetrics; 3],
}

pub const REGIMES: [&str; 3] = ["labeled", "shared", "full"];

/// Runs the three regimes with identical hyperparameters and seed:
/// (a) supervised on the l% labeled target subsample with no adaptation
/// term, (b) adaptation from the source restricted to `keep`, (c) adaptation
/// from the full source. All three are scored on the same target set.
pub fn robustness_protocol(
    base: &TrainConfig,
    source: &DomainDataset,
    target: &DomainDataset,
    keep: &[usize],
    l_percent: f64,
) -> Result<RobustnessRun> {
    base.validate()?;
    let data = regime_datasets(source, target, keep, l_percent, base.seed)?;
    // one output layer shape for all regimes
    let num_classes = source.label_space().iter().next_back().map_or(0, |&c| c + 1);
    let mut cfg = base.clone();
    cfg.model.num_classes = Some(cfg.model.num_classes.unwrap_or(num_classes));
    let supervised_cfg = TrainConfig {
        objective: ObjectiveConfig::source_only(),
        ..cfg.clone()
    };
    let labeled_as_source = with_domain(&data.labeled, Domain::Source)?;
    let eval = &data.target;

    let results: Vec<Result<(f64, RunMetrics)>> = thread::scope(|s| {
        let jobs = [
            (&supervised_cfg, &labeled_as_source, labeled_as_source.unlabeled()),
            (&cfg, &data.shared_source, eval.unlabeled()),
            (&cfg, &data.full_source, eval.unlabeled()),
        ];
        let handles: Vec<_> = jobs
            .into_iter()
            .map(|(c, src, tgt)| {
                s.spawn(move || {
                    let (model, metrics) = run_with_eval(c, src, tgt, Some(eval))?;
                    Ok((100.0 * evaluate(&model, eval)?.overall, metrics))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("regime thread panicked"))
            .collect()
    });
    let mut accs = [0.0; 3];
    let mut runs: [RunMetrics; 3] = Default::default();
    for (i, r) in results.into_iter().enumerate() {
        let (acc, metrics) = r.map_err(|e| e.context(format!("regime {}", REGIMES[i])))?;
        accs[i] = acc;
        runs[i] = metrics;
    }
    Ok(RobustnessRun {
        report: RobustnessReport::new(base.objective.variant.name(), l_percent, accs[0], accs[1], accs[2])?,
        eval_fingerprint: eval.fingerprint(),
        runs,
    })
}

fn f(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(f).unwrap_or_default()
}

pub fn iter_csv(metrics: &RunMetrics) -> String {
    let mut s = format!("{ITER_HEADER}\n");
    for r in &metrics.iters {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.iter,
            r.epoch,
            f(r.loss_total),
            f(r.loss_cls),
            f(r.loss_norm),
            f(r.mean_norm_src),
            f(r.mean_norm_tgt),
            f(r.mmfnd_abs)
        )
        .unwrap();
    }
    s
}

pub fn epoch_csv(metrics: &RunMetrics) -> String {
    let mut s = format!("{EPOCH_HEADER}\n");
    for r in &metrics.epochs {
        writeln!(
            s,
            "{},{},{},{}",
            r.epoch,
            f(r.acc_src),
            opt(r.acc_tgt),
            opt(r.acc_tgt_per_class)
        )
        .unwrap();
    }
    s
}

pub fn robustness_csv(reports: &[RobustnessReport]) -> String {
    let mut s = format!("{ROBUSTNESS_HEADER}\n");
    for r in reports {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.variant,
            f(r.l_percent),
            f(r.a_labeled),
            f(r.a_shared),
            f(r.a_full),
            f(r.cng),
            f(r.ong),
            f(r.png)
        )
        .unwrap();
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the per-iteration and per-epoch files of a run.
pub fn emit_run_metrics(metrics: &RunMetrics, iter_path: &Path, epoch_path: &Path) -> Result<()> {
    write_text(iter_path, &iter_csv(metrics))?;
    write_text(epoch_path, &epoch_csv(metrics))
}

pub fn emit_robustness(reports: &[RobustnessReport], path: &Path) -> Result<()> {
    write_text(path, &robustness_csv(reports))
}

fn records(text: &str, header: &str) -> Result<Vec<csv::StringRecord>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let got = rd
        .headers()
        .map_err(|e| Error::Format(format!("metrics header: {e}")))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if got != header {
        return Err(Error::Format(format!("expected header `{header}`, got `{got}`")));
    }
    rd.records()
        .map(|r| r.map_err(|e| Error::Format(format!("metrics row: {e}"))))
        .collect()
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse().map_err(|_| {
        let line = rec.position().map_or(0, |p| p.line());
        Error::Format(format!("line {line}: bad value `{raw}` in column {}", i + 1))
    })
}

fn opt_field(rec: &csv::StringRecord, i: usize) -> Result<Option<f64>> {
    match rec.get(i) {
        Some("") | None => Ok(None),
        Some(_) => field(rec, i).map(Some),
    }
}

pub fn parse_iter_csv(text: &str) -> Result<Vec<IterRecord>> {
    records(text, ITER_HEADER)?
        .iter()
        .map(|r| {
            Ok(IterRecord {
                iter: field(r, 0)?,
                epoch: field(r, 1)?,
                loss_total: field(r, 2)?,
                loss_cls: field(r, 3)?,
                loss_norm: field(r, 4)?,
                mean_norm_src: field(r, 5)?,
                mean_norm_tgt: field(r, 6)?,
                mmfnd_abs: field(r, 7)?,
            })
        })
        .collect()
}

pub fn parse_epoch_csv(text: &str) -> Result<Vec<EpochRecord>> {
    records(text, EPOCH_HEADER)?
        .iter()
        .map(|r| {
            Ok(EpochRecord {
                epoch: field(r, 0)?,
                acc_src: field(r, 1)?,
                acc_tgt: opt_field(r, 2)?,
                acc_tgt_per_class: opt_field(r, 3)?,
            })
        })
        .collect()
}

pub fn parse_robustness_csv(text: &str) -> Result<Vec<RobustnessReport>> {
    records(text, ROBUSTNESS_HEADER)?
        .iter()
        .map(|r| {
            Ok(RobustnessReport {
                variant: field(r, 0)?,
                l_percent: field(r, 1)?,
                a_labeled: field(r, 2)?,
                a_shared: field(r, 3)?,
                a_full: field(r, 4)?,
                cng: field(r, 5)?,
                ong: field(r, 6)?,
                png: field(r, 7)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, ShiftSpec};
    use crate::train::ModelConfig;
    use proptest::prelude::*;

    /// Published gap rows: (method, task, cng, ong, png).
    const TABLE7: [(&str, &str, f64, f64, f64); 2] = [
        ("SAFN", "VisDA2017", 5.0, 15.6, 20.6),
        ("DAN", "VisDA2017", 18.7, 25.0, 43.7),
    ];

    #[test]
    fn published_rows_satisfy_the_identity() {
        for (method, task, cng, ong, png) in TABLE7 {
            let g = Gaps::from_parts(cng, ong);
            assert_eq!(g.png, png, "{method} on {task}");
            // replayed through accuracies that produce those gaps
            let a_full = 50.0;
            let a_shared = a_full + ong;
            let a_labeled = a_shared + cng;
            let g = robustness_gaps(a_labeled, a_shared, a_full).unwrap();
            assert_eq!(g.png.to_bits(), (g.cng + g.ong).to_bits());
            assert!((g.png - png).abs() < 1e-9, "{method}: {g:?}");
        }
    }

    #[test]
    fn equal_accuracies_give_zero_gaps() {
        let g = robustness_gaps(61.5, 61.5, 61.5).unwrap();
        assert_eq!((g.cng, g.ong, g.png), (0.0, 0.0, 0.0));
    }

    #[test]
    fn out_of_range_inputs_rejected() {
        assert!(robustness_gaps(101.0, 50.0, 50.0).is_err());
        assert!(robustness_gaps(50.0, -0.1, 50.0).is_err());
        assert!(robustness_gaps(50.0, 50.0, f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn identity_holds_for_all_inputs(a in 0.0f64..=100.0, b in 0.0f64..=100.0, c in 0.0f64..=100.0) {
            let g = robustness_gaps(a, b, c).unwrap();
            prop_assert_eq!(g.png.to_bits(), (g.cng + g.ong).to_bits());
            prop_assert!((g.png - (a - c)).abs() <= 1e-12);
        }
    }

    fn sample_metrics() -> RunMetrics {
        RunMetrics {
            iters: (1..=3)
                .map(|i| IterRecord {
                    iter: i,
                    epoch: 1,
                    loss_total: 0.1 + i as f64 / 3.0,
                    loss_cls: 1.0 / 7.0,
                    loss_norm: 1e-300 * i as f64,
                    mean_norm_src: 25.000000000000004,
                    mean_norm_tgt: std::f64::consts::PI,
                    mmfnd_abs: 0.3,
                })
                .collect(),
            epochs: vec![
                EpochRecord {
                    epoch: 1,
                    acc_src: 0.9,
                    acc_tgt: Some(2.0 / 3.0),
                    acc_tgt_per_class: Some(0.1 + 0.2),
                },
                EpochRecord {
                    epoch: 2,
                    acc_src: 1.0,
                    acc_tgt: None,
                    acc_tgt_per_class: None,
                },
            ],
            norms: Vec::new(),
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = sample_metrics();
        assert_eq!(parse_iter_csv(&iter_csv(&m)).unwrap(), m.iters);
        assert_eq!(parse_epoch_csv(&epoch_csv(&m)).unwrap(), m.epochs);
        let r = RobustnessReport::new("safn", 5.0, 80.1, 75.3, 60.0).unwrap();
        assert_eq!(parse_robustness_csv(&robustness_csv(std::slice::from_ref(&r))).unwrap(), vec![r]);
    }

    #[test]
    fn empty_metrics_give_header_only_files() {
        let m = RunMetrics::default();
        assert_eq!(iter_csv(&m), format!("{ITER_HEADER}\n"));
        assert_eq!(epoch_csv(&m), format!("{EPOCH_HEADER}\n"));
        assert!(parse_epoch_csv(&epoch_csv(&m)).unwrap().is_empty());
    }

    #[test]
    fn emitted_text_is_stable_and_plain() {
        let m = sample_metrics();
        let a = iter_csv(&m);
        assert_eq!(a, iter_csv(&m));
        assert!(!a.contains('\r'));
        assert!(a.lines().nth(1).unwrap().contains(",1.4285714285714285e-1,"));
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("i.csv"), dir.path().join("e.csv"));
        emit_run_metrics(&m, &p1, &p2).unwrap();
        assert_eq!(fs::read_to_string(&p1).unwrap(), a);
        assert!(emit_run_metrics(&m, &dir.path().join("missing/x.csv"), &p2).is_err());
    }

    #[test]
    fn wrong_header_is_a_format_error() {
        assert!(matches!(parse_iter_csv("a,b\n1,2\n"), Err(Error::Format(_))));
        let bad = format!("{EPOCH_HEADER}\n1,x,,\n");
        assert!(matches!(parse_epoch_csv(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn shared_and_full_sources_differ_only_in_outlier_rows() {
        let (s, t) = gen_synthetic(&ShiftSpec::canned()).unwrap();
        let keep = ShiftSpec::canned_partial_keep();
        let d = regime_datasets(&s, &t, &keep, 5.0, 0).unwrap();
        assert_eq!(d.full_source, s);
        let labels = s.labels().unwrap();
        let kept_rows: Vec<usize> = (0..s.len()).filter(|&i| keep.contains(&labels[i])).collect();
        assert_eq!(d.shared_source, s.subset(&kept_rows).unwrap().filter_classes(&keep.iter().copied().collect()).unwrap());
        assert_eq!(d.full_source.len() - d.shared_source.len(), s.len() - kept_rows.len());
        assert!(d.target.labels().unwrap().iter().all(|y| keep.contains(y)));
        assert!(d.labeled.labels().unwrap().iter().all(|y| keep.contains(y)));
        assert_eq!(d.labeled.len(), 50);
    }

    #[test]
    fn protocol_report_satisfies_identity() {
        let spec = ShiftSpec {
            samples: 160,
            dim: 6,
            ..ShiftSpec::canned()
        };
        let (s, t) = gen_synthetic(&spec).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            model: ModelConfig {
                hidden: vec![8],
                embedding_size: 4,
                ..ModelConfig::default()
            },
            ..TrainConfig::with_objective(ObjectiveConfig::safn())
        };
        let r = robustness_protocol(&cfg, &s, &t, &[0, 1], 25.0).unwrap();
        let rep = &r.report;
        assert_eq!(rep.png.to_bits(), (rep.cng + rep.ong).to_bits());
        assert_eq!(rep.variant, "safn");
        for a in [rep.a_labeled, rep.a_shared, rep.a_full] {
            assert!((0.0..=100.0).contains(&a));
        }
        let d = regime_datasets(&s, &t, &[0, 1], 25.0, 0).unwrap();
        assert_eq!(r.eval_fingerprint, d.target.fingerprint());
        assert!(r.runs.iter().all(|m| !m.iters.is_empty()));
    }

    #[test]
    fn protocol_errors_name_the_regime() {
        let (s, t) = gen_synthetic(&ShiftSpec {
            samples: 40,
            dim: 3,
            ..ShiftSpec::canned()
        })
        .unwrap();
        let mut x = t.features().clone();
        x.data_mut()[0] = f64::NAN;
        let t = DomainDataset::new(x, t.labels().map(<[usize]>::to_vec), t.label_space().clone(), t.domain()).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            model: ModelConfig {
                hidden: vec![4],
                embedding_size: 3,
                ..ModelConfig::default()
            },
            ..TrainConfig::with_objective(ObjectiveConfig::hafn())
        };
        let err = robustness_protocol(&cfg, &s, &t, &[0, 1, 2, 3], 100.0).unwrap_err();
        assert!(err.to_string().starts_with("regime "), "{err}");
        assert!(matches!(err.root(), Error::NonFinite { .. }));
    }
}
