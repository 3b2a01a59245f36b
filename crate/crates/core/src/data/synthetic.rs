use std::collections::BTreeSet;
use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Domain, DomainDataset};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Parameters of the synthetic two-domain task.
///
/// Source samples are isotropic Gaussian blobs whose means sit on a circle of
/// radius `radius` in the first two coordinates. Target samples come from the
/// same blobs, then get rotated by `angle` in that plane, multiplied by
/// `scale` and shifted by `translation`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSpec {
    pub n_classes: usize,
    pub dim: usize,
    /// Samples per domain, split round-robin over the classes.
    pub samples: usize,
    pub radius: f64,
    pub noise: f64,
    /// Radians, in `[0, 2π)`.
    pub angle: f64,
    pub scale: f64,
    /// Empty means zero; otherwise one entry per dimension.
    pub translation: Vec<f64>,
    pub seed: u64,
}

impl ShiftSpec {
    /// The benchmark used throughout the tests: 4 classes in 16 dimensions,
    /// 2000 samples per domain, 30° rotation and a 0.5 shrink of the target.
    pub fn canned() -> Self {
        Self {
            n_classes: 4,
            dim: 16,
            samples: 2000,
            radius: 4.0,
            noise: 1.2,
            angle: 30f64.to_radians(),
            scale: 0.5,
            translation: Vec::new(),
            seed: 0,
        }
    }

    /// Classes kept in the target for the canned partial task.
    pub fn canned_partial_keep() -> Vec<usize> {
        vec![0, 1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_classes < 2 {
            return bad(format!("shift.n_classes must be >= 2, got {}", self.n_classes));
        }
        if self.dim < 2 {
            return bad(format!("shift.dim must be >= 2, got {}", self.dim));
        }
        if self.samples == 0 {
            return bad("shift.samples must be positive".into());
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return bad(format!("shift.scale must be > 0, got {}", self.scale));
        }
        if !(0.0..TAU).contains(&self.angle) {
            return bad(format!("shift angle must lie in [0, 2π), got {} rad", self.angle));
        }
        if !(self.noise >= 0.0) || !(self.radius >= 0.0) {
            return bad("shift.noise and shift.radius must be >= 0".into());
        }
        if !self.translation.is_empty() && self.translation.len() != self.dim {
            return bad(format!(
                "shift.translation has {} entries, expected 0 or {}",
                self.translation.len(),
                self.dim
            ));
        }
        Ok(())
    }

    fn class_mean(&self, k: usize) -> (f64, f64) {
        let theta = TAU * k as f64 / self.n_classes as f64;
        (self.radius * theta.cos(), self.radius * theta.sin())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
        let mut data = Vec::with_capacity(self.samples * self.dim);
        let mut labels = Vec::with_capacity(self.samples);
        for i in 0..self.samples {
            let k = i % self.n_classes;
            let (mx, my) = self.class_mean(k);
            for j in 0..self.dim {
                let z: f64 = StandardNormal.sample(rng);
                let mu = match j {
                    0 => mx,
                    1 => my,
                    _ => 0.0,
                };
                data.push(mu + self.noise * z);
            }
            labels.push(k);
        }
        (data, labels)
    }
}

/// Draws the source and target domains of `spec`. Both carry labels; the
/// target's are meant for evaluation only.
pub fn gen_synthetic(spec: &ShiftSpec) -> Result<(DomainDataset, DomainDataset)> {
    spec.validate()?;
    let space: BTreeSet<usize> = (0..spec.n_classes).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let (src, src_labels) = spec.draw(&mut rng);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let (mut tgt, tgt_labels) = spec.draw(&mut rng);
    let (c, s) = (spec.angle.cos(), spec.angle.sin());
    for row in tgt.chunks_exact_mut(spec.dim) {
        let (x, y) = (row[0], row[1]);
        row[0] = c * x - s * y;
        row[1] = s * x + c * y;
        for (j, v) in row.iter_mut().enumerate() {
            *v *= spec.scale;
            if let Some(t) = spec.translation.get(j) {
                *v += t;
            }
        }
    }

    let source = DomainDataset::new(
        Tensor::new(vec![spec.samples, spec.dim], src)?,
        Some(src_labels),
        space.clone(),
        Domain::Source,
    )?;
    let target = DomainDataset::new(
        Tensor::new(vec![spec.samples, spec.dim], tgt)?,
        Some(tgt_labels),
        space,
        Domain::Target,
    )?;
    Ok((source, target))
}
