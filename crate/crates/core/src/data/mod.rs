//! Domain datasets: synthetic shift generation, CSV ingestion, label-space
//! handling and batching.

mod batch;
mod csv_io;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub use batch::Batcher;
pub use csv_io::{load_csv, load_csv_with_space, write_csv};
pub use synthetic::{gen_synthetic, ShiftSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Samples of one domain. Labels are all present or all absent.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    features: Tensor,
    labels: Option<Vec<usize>>,
    label_space: BTreeSet<usize>,
    domain: Domain,
}

/// Feature-only view of a dataset. Everything on the training path that
/// touches target data takes this type, so target labels cannot leak in.
#[derive(Clone, Copy, Debug)]
pub struct Unlabeled<'a> {
    features: &'a Tensor,
}

impl<'a> Unlabeled<'a> {
    pub fn features(&self) -> &'a Tensor {
        self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl DomainDataset {
    pub fn new(
        features: Tensor,
        labels: Option<Vec<usize>>,
        label_space: BTreeSet<usize>,
        domain: Domain,
    ) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::Data(format!(
                "features must be a matrix, got shape {:?}",
                features.shape()
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != features.rows() {
                return Err(Error::Data(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    features.rows()
                )));
            }
            if let Some((i, y)) = labels.iter().enumerate().find(|(_, y)| !label_space.contains(y)) {
                return Err(Error::Data(format!(
                    "label {y} of sample {i} is outside the label space {label_space:?}"
                )));
            }
        }
        if domain == Domain::Source && labels.is_none() {
            return Err(Error::Data("source datasets must be labeled".into()));
        }
        Ok(Self {
            features,
            labels,
            label_space,
            domain,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn label_space(&self) -> &BTreeSet<usize> {
        &self.label_space
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn unlabeled(&self) -> Unlabeled<'_> {
        Unlabeled {
            features: &self.features,
        }
    }

    /// Copy with labels removed.
    pub fn strip_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Data("empty subset".into()));
        }
        let features = self.features.select_rows(indices);
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Self {
            features,
            labels,
            label_space: self.label_space.clone(),
            domain: self.domain,
        })
    }

    /// Keeps only samples whose label is in `classes`; the label space
    /// becomes `classes`.
    pub fn filter_classes(&self, classes: &BTreeSet<usize>) -> Result<Self> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("class filtering needs labels".into()))?;
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&labels[i])).collect();
        let mut out = self.subset(&idx)?;
        out.label_space = classes.clone();
        Ok(out)
    }

    /// Sample count per class (labels required).
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        if let Some(labels) = &self.labels {
            for &y in labels {
                *counts.entry(y).or_insert(0) += 1;
            }
        }
        counts
    }

    /// SHA-256 over shape, feature bits and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in self.features.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in self.features.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for &y in labels {
                h.update((y as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Mean L2 norm of the raw input rows.
    pub fn mean_input_norm(&self) -> f64 {
        let n = self.len();
        (0..n)
            .map(|i| self.features.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / n as f64
    }
}

/// Partial setting: keeps the source intact and restricts the target to
/// `keep`. `keep` must be a nonempty subset of the source label space; the
/// full space is accepted and leaves the target unchanged.
pub fn make_partial(
    source: &DomainDataset,
    target: &DomainDataset,
    keep: &[usize],
) -> Result<(DomainDataset, DomainDataset)> {
    let keep: BTreeSet<usize> = keep.iter().copied().collect();
    if keep.is_empty() {
        return Err(Error::Config("partial class subset is empty".into()));
    }
    if let Some(c) = keep.iter().find(|c| !source.label_space().contains(c)) {
        return Err(Error::Config(format!(
            "class {c} is not in the source label space {:?}",
            source.label_space()
        )));
    }
    let target = if keep == *target.label_space() {
        target.clone()
    } else {
        target.filter_classes(&keep)?
    };
    Ok((source.clone(), target))
}

/// Stratified labeled subsample: `ceil(fraction * n_c)` samples from each
/// class `c`, drawn with `seed`.
pub fn subsample_labeled_target(target: &DomainDataset, percent: f64, seed: u64) -> Result<DomainDataset> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Config(format!("l% must lie in (0, 100], got {percent}")));
    }
    let labels = target
        .labels()
        .ok_or_else(|| Error::Data("labeled subsampling needs target labels".into()))?;
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for class in target.label_space() {
        let Some(members) = by_class.get_mut(class) else {
            log::warn!("class {class} has no samples in the labeled subsample");
            continue;
        };
        let take = ((percent / 100.0) * members.len() as f64).ceil() as usize;
        let take = take.min(members.len());
        members.shuffle(&mut rng);
        let mut picked = members[..take].to_vec();
        picked.sort_unstable();
        chosen.extend(picked);
    }
    chosen.sort_unstable();
    let mut out = target.subset(&chosen)?;
    out.domain = Domain::Target;
    Ok(out)
}

/// Relabels a dataset as coming from `domain`.
pub fn with_domain(ds: &DomainDataset, domain: Domain) -> Result<DomainDataset> {
    DomainDataset::new(
        ds.features.clone(),
        ds.labels.clone(),
        ds.label_space.clone(),
        domain,
    )
}
