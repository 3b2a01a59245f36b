//! Python bindings: datasets, training, evaluation, checkpoints and the
//! robustness gaps.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use afn_core::autograd::Tensor;
use afn_core::cli::selfcheck;
use afn_core::data::{self, Domain, DomainDataset, ShiftSpec};
use afn_core::metrics;
use afn_core::nn::{DropoutSpec, DropoutVariant, ModelParams};
use afn_core::objectives::{self, ObjectiveConfig, Variant};
use afn_core::train::{self as trainer, ModelConfig, RunMetrics, TrainConfig};
use afn_core::Error;

fn py_err(e: Error) -> PyErr {
    match e.root() {
        Error::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::State(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for afn_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

type Rows = Vec<Vec<f64>>;

fn to_rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("need at least one row"));
    }
    Tensor::from_rows(rows).py()
}

fn parse_domain(s: &str) -> PyResult<Domain> {
    match s {
        "source" => Ok(Domain::Source),
        "target" => Ok(Domain::Target),
        _ => Err(PyValueError::new_err(format!("domain must be 'source' or 'target', got {s:?}"))),
    }
}

/// Samples of one domain, labels all present or all absent.
#[pyclass(name = "Dataset", module = "afn", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: DomainDataset,
}

#[pymethods]
impl PyDataset {
    /// Builds a dataset from feature rows. The label space defaults to the
    /// labels present.
    #[new]
    #[pyo3(signature = (features, labels=None, domain="source", label_space=None))]
    fn new(
        features: Vec<Vec<f64>>,
        labels: Option<Vec<usize>>,
        domain: &str,
        label_space: Option<Vec<usize>>,
    ) -> PyResult<Self> {
        let space: BTreeSet<usize> = match (&label_space, &labels) {
            (Some(s), _) => s.iter().copied().collect(),
            (None, Some(l)) => l.iter().copied().collect(),
            (None, None) => BTreeSet::new(),
        };
        let inner = DomainDataset::new(from_rows(&features)?, labels, space, parse_domain(domain)?).py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, label_space=None))]
    fn load_csv(path: PathBuf, label_space: Option<Vec<usize>>) -> PyResult<Self> {
        let space: Option<BTreeSet<usize>> = label_space.map(|s| s.into_iter().collect());
        let inner = data::load_csv_with_space(&path, space.as_ref()).py()?;
        Ok(Self { inner })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        data::write_csv(&self.inner, &path).py()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.features())
    }

    #[getter]
    fn labels(&self) -> Option<Vec<usize>> {
        self.inner.labels().map(<[usize]>::to_vec)
    }

    #[getter]
    fn label_space(&self) -> Vec<usize> {
        self.inner.label_space().iter().copied().collect()
    }

    #[getter]
    fn domain(&self) -> &'static str {
        self.inner.domain().name()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.inner.class_counts()
    }

    fn mean_input_norm(&self) -> f64 {
        self.inner.mean_input_norm()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn strip_labels(&self) -> Self {
        Self {
            inner: self.inner.strip_labels(),
        }
    }

    fn subset(&self, indices: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.subset(&indices).py()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(domain={}, n={}, dim={}, labeled={})",
            self.domain(),
            self.inner.len(),
            self.inner.dim(),
            self.inner.labels().is_some()
        )
    }
}

/// Synthetic shifted pair of domains. Defaults give the canned benchmark.
#[pyfunction]
#[pyo3(signature = (n_classes=4, dim=16, samples=2000, radius=4.0, noise=1.2, angle_deg=30.0, scale=0.5, translation=None, seed=0))]
#[allow(clippy::too_many_arguments)]
fn gen_synthetic(
    n_classes: usize,
    dim: usize,
    samples: usize,
    radius: f64,
    noise: f64,
    angle_deg: f64,
    scale: f64,
    translation: Option<Vec<f64>>,
    seed: u64,
) -> PyResult<(PyDataset, PyDataset)> {
    let spec = ShiftSpec {
        n_classes,
        dim,
        samples,
        radius,
        noise,
        angle: angle_deg.to_radians(),
        scale,
        translation: translation.unwrap_or_default(),
        seed,
    };
    let (s, t) = data::gen_synthetic(&spec).py()?;
    Ok((PyDataset { inner: s }, PyDataset { inner: t }))
}

/// Keeps the source and restricts the target to `keep`.
#[pyfunction]
fn make_partial(source: &PyDataset, target: &PyDataset, keep: Vec<usize>) -> PyResult<(PyDataset, PyDataset)> {
    let (s, t) = data::make_partial(&source.inner, &target.inner, &keep).py()?;
    Ok((PyDataset { inner: s }, PyDataset { inner: t }))
}

/// A trained (or freshly initialized) model.
#[pyclass(name = "Model", module = "afn")]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::load_checkpoint(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&self.inner, &path).py()
    }

    /// Eval-mode `(features, logits)` for the given rows.
    fn predict(&self, x: Rows) -> PyResult<(Rows, Rows)> {
        let (f, l) = self.inner.predict(&from_rows(&x)?).py()?;
        Ok((to_rows(&f), to_rows(&l)))
    }

    fn feature_norms(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        trainer::feature_norms_eval(&self.inner, &from_rows(&x)?).py()
    }

    /// `{"overall": .., "per_class_mean": .., "per_class": {c: ..}}`.
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let acc = trainer::evaluate(&self.inner, &dataset.inner).py()?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("overall", acc.overall)?;
        d.set_item("per_class_mean", acc.per_class_mean())?;
        d.set_item("per_class", acc.per_class)?;
        Ok(d)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.arch().num_classes
    }

    #[getter]
    fn embedding_size(&self) -> usize {
        self.inner.arch().embedding_size
    }

    fn __repr__(&self) -> String {
        let a = self.inner.arch();
        format!(
            "Model(input_dim={}, hidden={:?}, embedding_size={}, num_classes={})",
            a.input_dim, a.hidden, a.embedding_size, a.num_classes
        )
    }
}

fn objective_config(
    variant: &str,
    lambda: Option<f64>,
    radius: Option<f64>,
    delta_r: Option<f64>,
    ent: bool,
) -> PyResult<ObjectiveConfig> {
    let mut cfg = match Variant::parse(variant).py()? {
        Variant::SourceOnly => ObjectiveConfig::source_only(),
        Variant::Hafn => ObjectiveConfig::hafn(),
        Variant::Safn => ObjectiveConfig::safn(),
        Variant::SafnCapped => ObjectiveConfig::safn_capped(),
    };
    if let Some(l) = lambda {
        cfg.lambda = l;
    }
    if radius.is_some() {
        cfg.radius = radius;
    }
    if delta_r.is_some() {
        cfg.delta_r = delta_r;
    }
    cfg.ent = ent;
    cfg.validate().py()?;
    Ok(cfg)
}

/// Keyword arguments shared by `train` and `robustness_protocol`.
#[allow(clippy::too_many_arguments)]
fn train_config(
    objective: &str,
    epochs: usize,
    lr: f64,
    momentum: f64,
    batch_size: usize,
    seed: u64,
    lambda: Option<f64>,
    radius: Option<f64>,
    delta_r: Option<f64>,
    ent: bool,
    hidden: Option<Vec<usize>>,
    embedding_size: usize,
    dropout: f64,
    dropout_variant: &str,
    max_iterations: Option<usize>,
) -> PyResult<TrainConfig> {
    let model = ModelConfig {
        hidden: hidden.unwrap_or_else(|| ModelConfig::default().hidden),
        embedding_size,
        dropout: DropoutSpec::new(dropout, DropoutVariant::parse(dropout_variant).py()?).py()?,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        objective: objective_config(objective, lambda, radius, delta_r, ent)?,
        learning_rate: lr,
        momentum,
        epochs,
        batch_size,
        seed,
        model,
        max_iterations,
        last_good_path: None,
    };
    cfg.validate().py()?;
    Ok(cfg)
}

fn metrics_dict<'py>(py: Python<'py>, m: &RunMetrics) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let iters: Vec<BTreeMap<&str, f64>> = m
        .iters
        .iter()
        .map(|r| {
            BTreeMap::from([
                ("iter", r.iter as f64),
                ("epoch", r.epoch as f64),
                ("loss_total", r.loss_total),
                ("loss_cls", r.loss_cls),
                ("loss_norm", r.loss_norm),
                ("mean_norm_src", r.mean_norm_src),
                ("mean_norm_tgt", r.mean_norm_tgt),
                ("mmfnd_abs", r.mmfnd_abs),
            ])
        })
        .collect();
    let epochs: Vec<BTreeMap<&str, Option<f64>>> = m
        .epochs
        .iter()
        .map(|r| {
            BTreeMap::from([
                ("epoch", Some(r.epoch as f64)),
                ("acc_src", Some(r.acc_src)),
                ("acc_tgt", r.acc_tgt),
                ("acc_tgt_per_class", r.acc_tgt_per_class),
            ])
        })
        .collect();
    let norms: Vec<(usize, f64, f64)> = m
        .norms
        .iter()
        .map(|n| (n.epoch, n.mean_norm_src, n.mean_norm_tgt))
        .collect();
    let d = pyo3::types::PyDict::new(py);
    d.set_item("iters", iters)?;
    d.set_item("epochs", epochs)?;
    d.set_item("eval_norms", norms)?;
    Ok(d)
}

/// Trains on labeled `source` and unlabeled `target`; returns the model and
/// a dict of per-iteration and per-epoch metrics. Target labels, if any, are
/// used only for the accuracy records.
#[pyfunction]
#[pyo3(signature = (
    source, target, objective="safn", epochs=200, lr=1e-3, momentum=0.9, batch_size=32, seed=0,
    lambda_=None, radius=None, delta_r=None, ent=false,
    hidden=None, embedding_size=64, dropout=0.5, dropout_variant="l2", max_iterations=None
))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    source: &PyDataset,
    target: &PyDataset,
    objective: &str,
    epochs: usize,
    lr: f64,
    momentum: f64,
    batch_size: usize,
    seed: u64,
    lambda_: Option<f64>,
    radius: Option<f64>,
    delta_r: Option<f64>,
    ent: bool,
    hidden: Option<Vec<usize>>,
    embedding_size: usize,
    dropout: f64,
    dropout_variant: &str,
    max_iterations: Option<usize>,
) -> PyResult<(PyModel, Bound<'py, pyo3::types::PyDict>)> {
    let cfg = train_config(
        objective,
        epochs,
        lr,
        momentum,
        batch_size,
        seed,
        lambda_,
        radius,
        delta_r,
        ent,
        hidden,
        embedding_size,
        dropout,
        dropout_variant,
        max_iterations,
    )?;
    let (s, t) = (&source.inner, &target.inner);
    let (model, m) = py.detach(|| trainer::run(&cfg, s, t)).py()?;
    Ok((PyModel { inner: model }, metrics_dict(py, &m)?))
}

/// Runs the three-regime protocol and returns its report as a dict.
#[pyfunction]
#[pyo3(signature = (
    source, target, keep, l_percent=5.0, objective="safn", epochs=200, lr=1e-3, momentum=0.9,
    batch_size=32, seed=0, lambda_=None, radius=None, delta_r=None, ent=false
))]
#[allow(clippy::too_many_arguments)]
fn robustness_protocol(
    py: Python<'_>,
    source: &PyDataset,
    target: &PyDataset,
    keep: Vec<usize>,
    l_percent: f64,
    objective: &str,
    epochs: usize,
    lr: f64,
    momentum: f64,
    batch_size: usize,
    seed: u64,
    lambda_: Option<f64>,
    radius: Option<f64>,
    delta_r: Option<f64>,
    ent: bool,
) -> PyResult<BTreeMap<&'static str, f64>> {
    let d = ModelConfig::default();
    let cfg = train_config(
        objective,
        epochs,
        lr,
        momentum,
        batch_size,
        seed,
        lambda_,
        radius,
        delta_r,
        ent,
        None,
        d.embedding_size,
        d.dropout.p(),
        d.dropout.variant().name(),
        None,
    )?;
    let (s, t) = (&source.inner, &target.inner);
    let r = py
        .detach(|| metrics::robustness_protocol(&cfg, s, t, &keep, l_percent))
        .py()?
        .report;
    Ok(BTreeMap::from([
        ("l_percent", r.l_percent),
        ("a_labeled", r.a_labeled),
        ("a_shared", r.a_shared),
        ("a_full", r.a_full),
        ("cng", r.cng),
        ("ong", r.ong),
        ("png", r.png),
    ]))
}

/// `(cng, ong, png)` from the three regime accuracies in percent.
#[pyfunction]
fn robustness_gaps(a_labeled: f64, a_shared: f64, a_full: f64) -> PyResult<(f64, f64, f64)> {
    let g = metrics::robustness_gaps(a_labeled, a_shared, a_full).py()?;
    Ok((g.cng, g.ong, g.png))
}

/// Source mean norm minus target mean norm.
#[pyfunction]
fn mmfnd(source_norms: Vec<f64>, target_norms: Vec<f64>) -> PyResult<f64> {
    objectives::mmfnd(&source_norms, &target_norms).py()
}

/// Per-sample SAFN targets `max(n + Δr, cap)`.
#[pyfunction]
#[pyo3(signature = (norms, delta_r=1.0, cap=None))]
fn safn_targets(norms: Vec<f64>, delta_r: f64, cap: Option<f64>) -> Vec<f64> {
    objectives::safn_targets(&norms, delta_r, cap)
}

/// Monte Carlo relative errors `(l1, l2_squared)` of masked norms.
#[pyfunction]
#[pyo3(signature = (p, variant="l2", draws=100_000, seed=0))]
fn dropout_preservation(p: f64, variant: &str, draws: usize, seed: u64) -> PyResult<(f64, f64)> {
    selfcheck::dropout_preservation(p, DropoutVariant::parse(variant).py()?, draws, seed).py()
}

/// Invariant suite as `(name, passed, detail)` triples.
#[pyfunction]
fn run_selfcheck() -> Vec<(String, bool, String)> {
    selfcheck::run_selfcheck(None)
        .into_iter()
        .map(|c| (c.name, c.passed, c.detail))
        .collect()
}

#[pymodule]
fn afn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(make_partial, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(robustness_protocol, m)?)?;
    m.add_function(wrap_pyfunction!(robustness_gaps, m)?)?;
    m.add_function(wrap_pyfunction!(mmfnd, m)?)?;
    m.add_function(wrap_pyfunction!(safn_targets, m)?)?;
    m.add_function(wrap_pyfunction!(dropout_preservation, m)?)?;
    m.add_function(wrap_pyfunction!(run_selfcheck, m)?)?;
    Ok(())
}
