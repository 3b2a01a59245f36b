use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::Config;
use super::selfcheck::{report_csv, run_selfcheck};
use crate::data::{gen_synthetic, load_csv, load_csv_with_space, make_partial, write_csv, Domain, DomainDataset};
use crate::error::{Error, Result};
use crate::metrics::{emit_robustness, emit_run_metrics, robustness_protocol, write_text};
use crate::nn::ModelParams;
use crate::train::{evaluate, load_checkpoint, run, save_checkpoint};

/// A parsed invocation: effective config plus where artifacts go.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub config: Config,
    pub config_path: Option<PathBuf>,
    pub out: PathBuf,
}

impl RunSpec {
    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.config.checkpoint().unwrap_or_else(|| self.path("checkpoint"))
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the manifest of `command`: the full config snapshot (reloadable
/// with `--config`), then `manifest.*` lines with artifact hashes and
/// results.
fn write_manifest(spec: &RunSpec, command: &str, artifacts: &[&str], results: &[(&str, String)]) -> Result<PathBuf> {
    let mut s = format!("# afn {command}\n");
    s.push_str(&spec.config.snapshot());
    writeln!(s, "manifest.command = {command}").unwrap();
    for name in artifacts {
        writeln!(s, "manifest.sha256.{name} = {}", sha256_file(&spec.path(name))?).unwrap();
    }
    for (k, v) in results {
        writeln!(s, "manifest.result.{k} = {v}").unwrap();
    }
    let file = if command == "train" {
        "manifest".to_string()
    } else {
        format!("manifest.{command}")
    };
    let path = spec.path(&file);
    write_text(&path, &s)?;
    Ok(path)
}

/// Reads `key = value` results back out of a manifest.
pub fn manifest_result(path: &Path, key: &str) -> Result<Option<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let wanted = format!("manifest.result.{key}");
    Ok(text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == wanted).then(|| v.trim().to_string())
    }))
}

/// Source and target per the config: CSV files when given, otherwise the
/// synthetic generator; then the partial restriction when `data.keep` is set.
pub fn load_data(config: &Config) -> Result<(DomainDataset, DomainDataset)> {
    let (source, target) = match config.data_paths()? {
        Some((sp, tp)) => {
            let source = load_csv(&sp)?;
            let target = load_csv_with_space(&tp, Some(source.label_space()))?;
            for (ds, want, p) in [(&source, Domain::Source, &sp), (&target, Domain::Target, &tp)] {
                if ds.domain() != want {
                    return Err(Error::Data(format!(
                        "{} holds {} rows, expected {}",
                        p.display(),
                        ds.domain().name(),
                        want.name()
                    )));
                }
            }
            (source, target)
        }
        None => gen_synthetic(&config.shift_spec()?)?,
    };
    match config.keep()? {
        Some(keep) => make_partial(&source, &target, &keep),
        None => Ok((source, target)),
    }
}

pub fn cmd_gen_data(spec: &RunSpec) -> Result<()> {
    let shift = spec.config.shift_spec()?;
    let (s, t) = gen_synthetic(&shift)?;
    spec.ensure_out()?;
    write_csv(&s, spec.path("source.csv"))?;
    write_csv(&t, spec.path("target.csv"))?;
    let (ns, nt) = (s.mean_input_norm(), t.mean_input_norm());
    println!(
        "wrote {} source and {} target rows to {}",
        s.len(),
        t.len(),
        spec.out.display()
    );
    println!(
        "mean input norm: source {ns:.4}, target {nt:.4}, ratio {:.4} (scale {})",
        nt / ns,
        shift.scale
    );
    write_manifest(
        spec,
        "gen-data",
        &["source.csv", "target.csv"],
        &[("mean_norm_source", fmt(ns)), ("mean_norm_target", fmt(nt))],
    )?;
    Ok(())
}

pub fn cmd_train(spec: &RunSpec) -> Result<()> {
    let (s, t) = load_data(&spec.config)?;
    let mut cfg = spec.config.train_config()?;
    spec.ensure_out()?;
    cfg.last_good_path = Some(spec.path("checkpoint.last_good"));
    println!(
        "training {} for {} epochs on {} source / {} target samples (seed {})",
        cfg.objective.variant.name(),
        cfg.epochs,
        s.len(),
        t.len(),
        cfg.seed
    );
    let (model, metrics) = run(&cfg, &s, &t)?;
    save_checkpoint(&model, &spec.path("checkpoint"))?;
    emit_run_metrics(&metrics, &spec.path("metrics_iter.csv"), &spec.path("metrics_epoch.csv"))?;
    let (ms, mt) = write_features(&model, &s, &t, &spec.path("features.csv"))?;

    let last = metrics.epochs.last().expect("at least one epoch");
    let mut results = vec![
        ("acc_src", fmt(last.acc_src)),
        ("mean_norm_src", fmt(ms)),
        ("mean_norm_tgt", fmt(mt)),
    ];
    if let (Some(a), Some(p)) = (last.acc_tgt, last.acc_tgt_per_class) {
        results.push(("acc_tgt", fmt(a)));
        results.push(("acc_tgt_per_class", fmt(p)));
    }
    write_manifest(
        spec,
        "train",
        &["checkpoint", "metrics_iter.csv", "metrics_epoch.csv", "features.csv"],
        &results,
    )?;
    println!(
        "done: acc_src {:.4}, acc_tgt {}, mean norms {ms:.3} / {mt:.3}",
        last.acc_src,
        last.acc_tgt.map_or("n/a".into(), |a| format!("{a:.4}"))
    );
    println!("artifacts in {}", spec.out.display());
    Ok(())
}

fn load_model(spec: &RunSpec) -> Result<ModelParams> {
    let path = spec.checkpoint_path();
    let model = load_checkpoint(&path)?;
    Ok(model)
}

fn check_input_dim(model: &ModelParams, ds: &DomainDataset) -> Result<()> {
    if model.arch().input_dim != ds.dim() {
        return Err(Error::Data(format!(
            "checkpoint expects {} input features, {} data has {}",
            model.arch().input_dim,
            ds.domain().name(),
            ds.dim()
        )));
    }
    Ok(())
}

pub fn cmd_eval(spec: &RunSpec) -> Result<()> {
    let model = load_model(spec)?;
    let (s, t) = load_data(&spec.config)?;
    check_input_dim(&model, &s)?;
    spec.ensure_out()?;
    let mut report = String::from("domain,n,accuracy,per_class_mean\n");
    let mut results = Vec::new();
    for (ds, key) in [(&s, "src"), (&t, "tgt")] {
        if ds.labels().is_none() {
            println!("{}: no labels, skipped", ds.domain().name());
            continue;
        }
        let acc = evaluate(&model, ds)?;
        println!(
            "{}: accuracy {:.4}, per-class mean {:.4} over {} samples",
            ds.domain().name(),
            acc.overall,
            acc.per_class_mean(),
            ds.len()
        );
        writeln!(
            report,
            "{},{},{},{}",
            ds.domain().name(),
            ds.len(),
            fmt(acc.overall),
            fmt(acc.per_class_mean())
        )
        .unwrap();
        results.push((key, acc));
    }
    write_text(&spec.path("eval_report.csv"), &report)?;
    let flat: Vec<(&str, String)> = results
        .iter()
        .flat_map(|(k, a)| {
            let (acc_key, pc_key) = if *k == "src" {
                ("acc_src", "acc_src_per_class")
            } else {
                ("acc_tgt", "acc_tgt_per_class")
            };
            [(acc_key, fmt(a.overall)), (pc_key, fmt(a.per_class_mean()))]
        })
        .collect();
    write_manifest(spec, "eval", &["eval_report.csv"], &flat)?;
    Ok(())
}

pub fn cmd_robustness(spec: &RunSpec) -> Result<()> {
    let keep = spec
        .config
        .keep()?
        .ok_or_else(|| Error::Config("robustness needs data.keep (the shared target classes)".into()))?;
    let l_percent = spec.config.l_percent()?;
    let mut config = spec.config.clone();
    config.set("data.keep", "")?;
    let (s, t) = load_data(&config)?;
    let cfg = spec.config.train_config()?;
    spec.ensure_out()?;
    println!(
        "robustness protocol: {} with l% = {l_percent}, keep {keep:?}, three runs of {} epochs",
        cfg.objective.variant.name(),
        cfg.epochs
    );
    let result = robustness_protocol(&cfg, &s, &t, &keep, l_percent)?;
    let r = &result.report;
    emit_robustness(std::slice::from_ref(r), &spec.path("robustness.csv"))?;
    println!(
        "a_labeled {:.2}  a_shared {:.2}  a_full {:.2}  cng {:.2}  ong {:.2}  png {:.2}",
        r.a_labeled, r.a_shared, r.a_full, r.cng, r.ong, r.png
    );
    write_manifest(
        spec,
        "robustness",
        &["robustness.csv"],
        &[
            ("eval_fingerprint", result.eval_fingerprint.clone()),
            ("png", fmt(r.png)),
        ],
    )?;
    Ok(())
}

/// Writes `domain,label,norm,f0..f{E-1}` rows for both domains and returns
/// the mean norms.
pub fn write_features(model: &ModelParams, s: &DomainDataset, t: &DomainDataset, path: &Path) -> Result<(f64, f64)> {
    let e = model.arch().embedding_size;
    let mut out = String::from("domain,label,norm");
    for j in 0..e {
        write!(out, ",f{j}").unwrap();
    }
    out.push('\n');
    let mut means = [0.0; 2];
    for (k, ds) in [s, t].into_iter().enumerate() {
        check_input_dim(model, ds)?;
        let (f, _) = model.predict(ds.features())?;
        let mut total = 0.0;
        for i in 0..ds.len() {
            let row = f.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            total += norm;
            let label = ds.labels().map(|l| l[i].to_string()).unwrap_or_default();
            write!(out, "{},{label},{}", ds.domain().name(), fmt(norm)).unwrap();
            for v in row {
                write!(out, ",{}", fmt(*v)).unwrap();
            }
            out.push('\n');
        }
        means[k] = total / ds.len() as f64;
    }
    write_text(path, &out)?;
    Ok((means[0], means[1]))
}

pub fn cmd_dump_features(spec: &RunSpec) -> Result<()> {
    let model = load_model(spec)?;
    let (s, t) = load_data(&spec.config)?;
    spec.ensure_out()?;
    let (ms, mt) = write_features(&model, &s, &t, &spec.path("features.csv"))?;
    println!(
        "wrote {} feature rows (E = {}); mean norm source {ms:.4}, target {mt:.4}",
        s.len() + t.len(),
        model.arch().embedding_size
    );
    write_manifest(
        spec,
        "dump-features",
        &["features.csv"],
        &[("mean_norm_src", fmt(ms)), ("mean_norm_tgt", fmt(mt))],
    )?;
    Ok(())
}

/// Returns whether every invariant held.
pub fn cmd_selfcheck(spec: &RunSpec) -> Result<bool> {
    let fault = spec.config.fault()?;
    let checks = run_selfcheck(fault);
    for c in &checks {
        println!("{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    spec.ensure_out()?;
    write_text(&spec.path("selfcheck.csv"), &report_csv(&checks))?;
    write_manifest(spec, "selfcheck", &["selfcheck.csv"], &[])?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} invariants hold", checks.len());
        Ok(true)
    } else {
        println!("failed invariants: {}", failed.join(", "));
        Ok(false)
    }
}
