//! Optimization loop, evaluation and checkpoints.
//!
//! Each iteration draws one source and one target batch, stacks them into a
//! single forward pass (so batch norm sees joint statistics), assembles the
//! configured objective on the split outputs and takes one SGD step.

mod checkpoint;
mod sgd;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Tensor};
use crate::data::{Batcher, DomainDataset, Unlabeled};
use crate::error::{Error, Result};
use crate::nn::{
    Architecture, DropoutSpec, DropoutVariant, ModelParams, Mode, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM,
};
use crate::objectives::{mmfnd, objective, Batch, ObjectiveConfig};

pub use checkpoint::{
    checkpoint_to_string, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_TAG, CHECKPOINT_VERSION,
};
pub use sgd::Sgd;

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPOCHS: usize = 200;
pub const DEFAULT_BATCH_SIZE: usize = 32;

/// Layer sizes and regularization of the model a run trains. Input width
/// comes from the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embedding_size: usize,
    pub bottleneck_blocks: usize,
    pub dropout: DropoutSpec,
    /// Output width; defaults to one past the largest source label.
    pub num_classes: Option<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            embedding_size: 64,
            bottleneck_blocks: 1,
            dropout: DropoutSpec::new(0.5, DropoutVariant::L2Preserving).expect("valid default"),
            num_classes: None,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_eps: DEFAULT_BN_EPS,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, input_dim: usize, num_classes: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.hidden.clone(),
            embedding_size: self.embedding_size,
            bottleneck_blocks: self.bottleneck_blocks,
            num_classes: self.num_classes.unwrap_or(num_classes),
            dropout: self.dropout,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub model: ModelConfig,
    /// Stops after this many iterations, possibly mid-epoch.
    pub max_iterations: Option<usize>,
    /// Where to write the last finite model if the loss turns non-finite.
    pub last_good_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveConfig::source_only(),
            learning_rate: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            model: ModelConfig::default(),
            max_iterations: None,
            last_good_path: None,
        }
    }
}

impl TrainConfig {
    pub fn with_objective(objective: ObjectiveConfig) -> Self {
        Self {
            objective,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        if self.max_iterations == Some(0) {
            return Err(Error::Config("max_iterations must be >= 1".into()));
        }
        Sgd::new(self.learning_rate, self.momentum).map(|_| ())
    }
}

/// Training-mode quantities of one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    /// 1-based, counted across epochs.
    pub iter: usize,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    /// λ-weighted norm penalty; 0 for source_only.
    pub loss_norm: f64,
    pub mean_norm_src: f64,
    pub mean_norm_tgt: f64,
    pub mmfnd_abs: f64,
}

/// Eval-mode accuracies after an epoch, as fractions. Target entries are
/// `None` when no labeled target set was given for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub acc_src: f64,
    pub acc_tgt: Option<f64>,
    pub acc_tgt_per_class: Option<f64>,
}

/// Eval-mode mean feature norms over the full source and training target
/// sets after an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochNorms {
    pub epoch: usize,
    pub mean_norm_src: f64,
    pub mean_norm_tgt: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub iters: Vec<IterRecord>,
    pub epochs: Vec<EpochRecord>,
    pub norms: Vec<EpochNorms>,
}

impl RunMetrics {
    /// Records of the given epoch.
    pub fn iters_in_epoch(&self, epoch: usize) -> impl Iterator<Item = &IterRecord> {
        self.iters.iter().filter(move |r| r.epoch == epoch)
    }

    /// Mean of `field` over the iterations of `epoch`.
    pub fn epoch_mean(&self, epoch: usize, field: impl Fn(&IterRecord) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self.iters_in_epoch(epoch).map(field).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// MMFND of an epoch: difference of the epoch-averaged source and
    /// target batch-mean norms. Averaging before differencing keeps batch
    /// sampling noise from inflating the magnitude.
    pub fn mmfnd_epoch(&self, epoch: usize) -> Option<f64> {
        Some(self.epoch_mean(epoch, |r| r.mean_norm_src)? - self.epoch_mean(epoch, |r| r.mean_norm_tgt)?)
    }

    pub fn last_epoch(&self) -> Option<usize> {
        self.iters.last().map(|r| r.epoch)
    }

    pub fn final_acc_tgt(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.acc_tgt)
    }
}

/// Overall and per-class accuracy of a model on a labeled set, as fractions.
#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    pub overall: f64,
    /// Within-class accuracy of every class present in the set.
    pub per_class: BTreeMap<usize, f64>,
}

impl Accuracy {
    /// Mean over present classes of within-class accuracy.
    pub fn per_class_mean(&self) -> f64 {
        self.per_class.values().sum::<f64>() / self.per_class.len() as f64
    }
}

/// Accuracy from predicted and true labels.
pub fn accuracy_from_predictions(predicted: &[usize], labels: &[usize]) -> Result<Accuracy> {
    if labels.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    if predicted.len() != labels.len() {
        return Err(Error::shape("accuracy", &[predicted.len()], &[labels.len()]));
    }
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct = 0;
    for (&p, &y) in predicted.iter().zip(labels) {
        let e = hits.entry(y).or_insert((0, 0));
        e.1 += 1;
        if p == y {
            e.0 += 1;
            correct += 1;
        }
    }
    Ok(Accuracy {
        overall: correct as f64 / labels.len() as f64,
        per_class: hits.into_iter().map(|(c, (k, n))| (c, k as f64 / n as f64)).collect(),
    })
}

/// Row-wise argmax; the first maximum wins ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Eval-mode accuracy on a labeled dataset.
pub fn evaluate(model: &ModelParams, ds: &DomainDataset) -> Result<Accuracy> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Data(format!("evaluation needs labels ({} set has none)", ds.domain().name())))?;
    let (_, logits) = model.predict(ds.features())?;
    accuracy_from_predictions(&argmax_rows(&logits), labels)
}

/// Per-sample L2 norms of eval-mode bottleneck features.
pub fn feature_norms_eval(model: &ModelParams, x: &Tensor) -> Result<Vec<f64>> {
    let (f, _) = model.predict(x)?;
    Ok((0..f.rows())
        .map(|i| f.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Model, optimizer and dropout stream of one run. [`Trainer::step`] is one
/// iteration of the loop that [`run`] drives.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: ModelParams,
    objective: ObjectiveConfig,
    sgd: Sgd,
    dropout_rng: ChaCha8Rng,
}

/// Scalar results of one step, before the update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_norm: f64,
    pub source_norms: Vec<f64>,
    pub target_norms: Vec<f64>,
}

impl Trainer {
    pub fn new(model: ModelParams, cfg: &TrainConfig, dropout_seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model,
            objective: cfg.objective.clone(),
            sgd: Sgd::new(cfg.learning_rate, cfg.momentum)?,
            dropout_rng: ChaCha8Rng::seed_from_u64(dropout_seed),
        })
    }

    /// One forward/backward/update on a labeled source batch and an
    /// unlabeled target batch. A non-finite loss leaves the model untouched
    /// and reports [`Error::NonFinite`] with iteration 0; [`run`] fills in
    /// the real index.
    pub fn step(&mut self, xs: &Tensor, ys: &[usize], xt: &Tensor) -> Result<StepStats> {
        let (ns, nt) = (xs.rows(), xt.rows());
        if xs.cols() != xt.cols() {
            return Err(Error::shape("train_step", xs.shape(), xt.shape()));
        }
        let mut joint = Vec::with_capacity((ns + nt) * xs.cols());
        joint.extend_from_slice(xs.data());
        joint.extend_from_slice(xt.data());
        let joint = Tensor::new(vec![ns + nt, xs.cols()], joint)?;

        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let x = tape.constant(joint);
        let out = self.model.forward(&mut tape, &bound, x, Mode::Train, &mut self.dropout_rng)?;
        let sf = tape.rows(out.features, 0, ns)?;
        let tf = tape.rows(out.features, ns, ns + nt)?;
        let sl = tape.rows(out.logits, 0, ns)?;
        let tl = tape.rows(out.logits, ns, ns + nt)?;
        let terms = objective(
            &mut tape,
            Batch {
                source_features: sf,
                target_features: tf,
                source_logits: sl,
                target_logits: tl,
                labels: ys,
                anchor_norms: None,
            },
            &self.objective,
        )?;
        let stats = StepStats {
            loss_total: tape.value(terms.total).item(),
            loss_cls: tape.value(terms.classification).item(),
            loss_norm: terms.norm_penalty.map_or(0.0, |p| tape.value(p).item()),
            source_norms: tape.value(terms.source_norms).data().to_vec(),
            target_norms: tape.value(terms.target_norms).data().to_vec(),
        };
        if !stats.loss_total.is_finite() {
            return Err(Error::NonFinite {
                iteration: 0,
                last_good: None,
            });
        }
        tape.backward(terms.total)?;
        self.model.accumulate_grads(&tape, &bound)?;
        self.model.commit_batch_stats(&out.batch_stats)?;
        self.sgd.step(&mut self.model.params_mut())?;
        Ok(stats)
    }
}

/// Independent sub-seeds for initialization, the two batch orders and
/// dropout, all derived from the run seed.
struct Seeds {
    init: u64,
    source_order: u64,
    target_order: u64,
    dropout: u64,
}

impl Seeds {
    fn derive(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            init: rng.random(),
            source_order: rng.random(),
            target_order: rng.random(),
            dropout: rng.random(),
        }
    }
}

/// The initial model of a run with this config and data shape.
pub fn initial_model(cfg: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<ModelParams> {
    let arch = cfg.model.architecture(input_dim, num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(Seeds::derive(cfg.seed).init);
    ModelParams::init(arch, &mut rng)
}

fn num_classes_of(source: &DomainDataset) -> usize {
    source.label_space().iter().next_back().map_or(0, |&c| c + 1)
}

/// Trains on labeled `source` and unlabeled `target`. Target labels, when
/// present, are used only for the per-epoch accuracy records.
pub fn run(cfg: &TrainConfig, source: &DomainDataset, target: &DomainDataset) -> Result<(ModelParams, RunMetrics)> {
    let eval = target.labels().is_some().then_some(target);
    run_with_eval(cfg, source, target.unlabeled(), eval)
}

/// As [`run`], with the training target given as a features-only view and a
/// separate labeled set for target accuracy.
pub fn run_with_eval(
    cfg: &TrainConfig,
    source: &DomainDataset,
    target: Unlabeled<'_>,
    eval_target: Option<&DomainDataset>,
) -> Result<(ModelParams, RunMetrics)> {
    cfg.validate()?;
    let ys_all = source
        .labels()
        .ok_or_else(|| Error::Data("source dataset must be labeled".into()))?;
    if source.dim() != target.features().cols() {
        return Err(Error::Data(format!(
            "source has {} features, target has {}",
            source.dim(),
            target.features().cols()
        )));
    }
    let seeds = Seeds::derive(cfg.seed);
    let model = initial_model(cfg, source.dim(), num_classes_of(source))?;
    let mut trainer = Trainer::new(model, cfg, seeds.dropout)?;
    let mut src_batches = Batcher::new(source.len(), cfg.batch_size, seeds.source_order)?;
    let mut tgt_batches = Batcher::new(target.len(), cfg.batch_size, seeds.target_order)?;
    let source_leads = source.len() >= target.len();

    let mut metrics = RunMetrics::default();
    let mut last_good = trainer.model.clone();
    let mut iter = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = if source_leads {
            src_batches
                .epoch()
                .into_iter()
                .map(|s| {
                    let t = tgt_batches.take(s.len());
                    (s, t)
                })
                .collect()
        } else {
            tgt_batches
                .epoch()
                .into_iter()
                .map(|t| (src_batches.take(t.len()), t))
                .collect()
        };
        for (si, ti) in pairs {
            if cfg.max_iterations.is_some_and(|m| iter >= m) {
                break 'epochs;
            }
            iter += 1;
            let xs = source.features().select_rows(&si);
            let ys: Vec<usize> = si.iter().map(|&i| ys_all[i]).collect();
            let xt = target.features().select_rows(&ti);
            let stats = match trainer.step(&xs, &ys, &xt) {
                Ok(s) => s,
                Err(Error::NonFinite { .. }) => {
                    let saved = match &cfg.last_good_path {
                        Some(p) => {
                            save_checkpoint(&last_good, p)?;
                            Some(p.clone())
                        }
                        None => None,
                    };
                    return Err(Error::NonFinite {
                        iteration: iter,
                        last_good: saved,
                    });
                }
                Err(e) => return Err(e),
            };
            let (ms, mt) = (mean(&stats.source_norms), mean(&stats.target_norms));
            metrics.iters.push(IterRecord {
                iter,
                epoch,
                loss_total: stats.loss_total,
                loss_cls: stats.loss_cls,
                loss_norm: stats.loss_norm,
                mean_norm_src: ms,
                mean_norm_tgt: mt,
                mmfnd_abs: mmfnd(&stats.source_norms, &stats.target_norms)?.abs(),
            });
        }
        record_epoch(&trainer.model, epoch, source, target, eval_target, &mut metrics)?;
        last_good = trainer.model.clone();
    }
    if metrics.epochs.last().map(|e| e.epoch) != metrics.last_epoch() {
        // stopped mid-epoch by max_iterations
        let epoch = metrics.last_epoch().unwrap_or(1);
        record_epoch(&trainer.model, epoch, source, target, eval_target, &mut metrics)?;
    }
    Ok((trainer.model, metrics))
}

fn record_epoch(
    model: &ModelParams,
    epoch: usize,
    source: &DomainDataset,
    target: Unlabeled<'_>,
    eval_target: Option<&DomainDataset>,
    metrics: &mut RunMetrics,
) -> Result<()> {
    let acc_src = evaluate(model, source)?;
    let acc_tgt = eval_target.map(|t| evaluate(model, t)).transpose()?;
    let mean_norm_src = mean(&feature_norms_eval(model, source.features())?);
    let mean_norm_tgt = mean(&feature_norms_eval(model, target.features())?);
    log::info!(
        "epoch {epoch}: acc_src {:.4} acc_tgt {} norms {mean_norm_src:.3}/{mean_norm_tgt:.3}",
        acc_src.overall,
        acc_tgt.as_ref().map_or("-".to_string(), |a| format!("{:.4}", a.overall)),
    );
    metrics.epochs.push(EpochRecord {
        epoch,
        acc_src: acc_src.overall,
        acc_tgt: acc_tgt.as_ref().map(|a| a.overall),
        acc_tgt_per_class: acc_tgt.as_ref().map(Accuracy::per_class_mean),
    });
    metrics.norms.push(EpochNorms {
        epoch,
        mean_norm_src,
        mean_norm_tgt,
    });
    Ok(())
}
