use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batchnorm::{BatchNormState, BatchStats, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
use super::dropout::{dropout, DropoutSpec, DropoutVariant};
use super::Mode;
use crate::autograd::{Param, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Layer sizes and fixed hyperparameters of the network.
///
/// The backbone `G` is a stack of `linear → relu` layers with the widths in
/// `hidden`. The classifier's feature part `F_f` is `bottleneck_blocks`
/// blocks of `linear → batchnorm → relu → dropout`, each `embedding_size`
/// wide. The head `F_y` is one linear layer onto `num_classes` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_size: usize,
    pub bottleneck_blocks: usize,
    pub num_classes: usize,
    pub dropout: DropoutSpec,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Architecture {
    /// Desk-scale defaults: two hidden layers of 64, one 64-wide bottleneck
    /// block with L2-preserving dropout at p = 0.5.
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
            embedding_size: 64,
            bottleneck_blocks: 1,
            num_classes,
            dropout: DropoutSpec::new(0.5, DropoutVariant::L2Preserving).expect("valid default"),
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_eps: DEFAULT_BN_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embedding_size == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!(
                "architecture dimensions must be positive: input {}, embedding {}, classes {}",
                self.input_dim, self.embedding_size, self.num_classes
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config(format!("zero-width hidden layer in {:?}", self.hidden)));
        }
        if self.bottleneck_blocks == 0 {
            return Err(Error::Config("at least one bottleneck block is required".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::Config("batch norm momentum must be in [0,1] and eps > 0".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every linear layer in parameter order.
    fn linear_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &w in &self.hidden {
            dims.push((prev, w));
            prev = w;
        }
        for _ in 0..self.bottleneck_blocks {
            dims.push((prev, self.embedding_size));
            prev = self.embedding_size;
        }
        dims.push((prev, self.num_classes));
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// fan_in × fan_out, applied as `x · W`.
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Param::new(Tensor::zeros(&[fan_in, fan_out])),
            bias: Param::new(Tensor::zeros(&[fan_out])),
        }
    }

    fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Param::new(Tensor::from_parts(vec![fan_in, fan_out], w)),
            bias: Param::new(Tensor::zeros(&[fan_out])),
        }
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add_row(h, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckBlock {
    pub linear: Linear,
    pub bn: BatchNormState,
}

/// All learnable state: backbone, bottleneck blocks and head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    pub backbone: Vec<Linear>,
    pub bottleneck: Vec<BottleneckBlock>,
    pub head: Linear,
}

/// Tape handles for every learnable tensor, in [`ModelParams::named_params`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Result of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Bottleneck features `f`, batch × embedding_size.
    pub features: Var,
    /// Raw class scores, batch × num_classes.
    pub logits: Var,
    /// One entry per bottleneck block in train mode, empty in eval mode.
    pub batch_stats: Vec<BatchStats>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, identity batch norm.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let dims = arch.linear_dims();
        let nb = arch.hidden.len();
        let layers = dims.iter().map(|&(i, o)| Linear::glorot(i, o, rng)).collect();
        Ok(Self::assemble(arch.clone(), layers, nb))
    }

    /// Every parameter zero (gamma included). Used as a template by the
    /// checkpoint loader and for the all-zero reference case.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let dims = arch.linear_dims();
        let nb = arch.hidden.len();
        let layers = dims.iter().map(|&(i, o)| Linear::zeros(i, o)).collect();
        let mut p = Self::assemble(arch, layers, nb);
        for block in &mut p.bottleneck {
            block.bn.gamma.value = Tensor::zeros(block.bn.gamma.value.shape());
        }
        Ok(p)
    }

    fn assemble(arch: Architecture, layers: Vec<Linear>, nb: usize) -> Self {
        let mut layers = layers.into_iter();
        let backbone: Vec<Linear> = layers.by_ref().take(nb).collect();
        let bottleneck = layers
            .by_ref()
            .take(arch.bottleneck_blocks)
            .map(|linear| BottleneckBlock {
                linear,
                bn: BatchNormState::new(arch.embedding_size, arch.bn_momentum, arch.bn_eps),
            })
            .collect();
        let head = layers.next().expect("head layer");
        Self {
            arch,
            backbone,
            bottleneck,
            head,
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    /// Learnable tensors with stable names.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &l.weight));
            out.push((format!("backbone.{i}.bias"), &l.bias));
        }
        for (i, b) in self.bottleneck.iter().enumerate() {
            out.push((format!("bottleneck.{i}.weight"), &b.linear.weight));
            out.push((format!("bottleneck.{i}.bias"), &b.linear.bias));
            out.push((format!("bottleneck.{i}.bn.gamma"), &b.bn.gamma));
            out.push((format!("bottleneck.{i}.bn.beta"), &b.bn.beta));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for l in &mut self.backbone {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for b in &mut self.bottleneck {
            out.push(&mut b.linear.weight);
            out.push(&mut b.linear.bias);
            out.push(&mut b.bn.gamma);
            out.push(&mut b.bn.beta);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Concatenation of every learnable tensor, in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.named_params()
            .iter()
            .flat_map(|(_, p)| p.value.data().iter().copied())
            .collect()
    }

    /// Records every learnable tensor as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .named_params()
            .into_iter()
            .map(|(_, p)| tape.leaf(p.value.clone(), true))
            .collect();
        BoundParams { vars }
    }

    /// Binds parameters as contiguous slices of one flat vector `theta`.
    /// Lets gradient checks treat the whole model as a single input.
    pub fn bind_flat(&self, tape: &mut Tape, theta: Var) -> Result<BoundParams> {
        let mut offset = 0;
        let mut vars = Vec::new();
        for (_, p) in self.named_params() {
            vars.push(tape.slice(theta, offset, p.value.shape())?);
            offset += p.value.len();
        }
        if offset != tape.value(theta).len() {
            return Err(Error::shape("bind_flat", &[offset], tape.value(theta).shape()));
        }
        Ok(BoundParams { vars })
    }

    /// `G → F_f → F_y`. Returns bottleneck features and logits.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let xs = tape.value(x).shape();
        if xs.len() != 2 || xs[1] != self.arch.input_dim {
            return Err(Error::shape("forward", xs, &[0, self.arch.input_dim]));
        }
        let mut vars = bound.vars.iter().copied();
        let mut next = || vars.next().expect("bound parameter count");

        let mut h = x;
        for _ in &self.backbone {
            let z = linear(tape, h, next(), next())?;
            h = tape.relu(z);
        }
        let mut batch_stats = Vec::new();
        for block in &self.bottleneck {
            let z = linear(tape, h, next(), next())?;
            let (gamma, beta) = (next(), next());
            let (z, stats) = block.bn.forward(tape, z, gamma, beta, mode)?;
            batch_stats.extend(stats);
            let z = tape.relu(z);
            h = dropout(tape, z, &self.arch.dropout, mode, rng)?;
        }
        let features = h;
        let logits = linear(tape, features, next(), next())?;
        Ok(ForwardOutput {
            features,
            logits,
            batch_stats,
        })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn commit_batch_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.bottleneck.len() {
            return Err(Error::State(format!(
                "expected {} batch statistics, got {}",
                self.bottleneck.len(),
                stats.len()
            )));
        }
        for (block, s) in self.bottleneck.iter_mut().zip(stats) {
            block.bn.update_running(s)?;
        }
        Ok(())
    }

    /// Adds the tape's gradients onto each parameter's `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundParams) -> Result<()> {
        for (p, &v) in self.params_mut().into_iter().zip(&bound.vars) {
            match tape.grad(v) {
                Some(g) => p.accumulate_grad(&g)?,
                None => p.accumulate_grad(&Tensor::zeros(p.value.shape()))?,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Eval-mode forward without gradient tracking.
    /// Returns `(features, logits)` as plain tensors.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind_constants(&mut tape);
        let xv = tape.constant(x.clone());
        // eval mode never draws from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, &bound, xv, Mode::Eval, &mut rng)?;
        Ok((tape.value(out.features).clone(), tape.value(out.logits).clone()))
    }

    fn bind_constants(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .named_params()
            .into_iter()
            .map(|(_, p)| tape.constant(p.value.clone()))
            .collect();
        BoundParams { vars }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Architecture {
        let mut a = Architecture::new(5, 3);
        a.hidden = vec![6, 4];
        a.embedding_size = 2;
        a
    }

    fn input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let p = ModelParams::zeros(small_arch()).unwrap();
        let (f, logits) = p.predict(&input(4, 5, 1)).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(logits.shape(), &[4, 3]);
    }

    #[test]
    fn eval_forward_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ModelParams::init(small_arch(), &mut rng).unwrap();
        let x = input(7, 5, 2);
        assert_eq!(p.predict(&x).unwrap(), p.predict(&x).unwrap());
    }

    #[test]
    fn two_dimensional_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ModelParams::init(small_arch(), &mut rng).unwrap();
        let (f, _) = p.predict(&input(3, 5, 5)).unwrap();
        assert_eq!(f.shape(), &[3, 2]);
    }

    #[test]
    fn seeded_train_forward_is_reproducible() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let p = ModelParams::init(small_arch(), &mut rng).unwrap();
            let mut t = Tape::new();
            let b = p.bind(&mut t);
            let x = t.constant(input(6, 5, 6));
            let out = p.forward(&mut t, &b, x, Mode::Train, &mut rng).unwrap();
            (t.value(out.features).clone(), t.value(out.logits).clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn invalid_architecture_rejected_at_construction() {
        let mut a = small_arch();
        a.hidden = vec![4, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(ModelParams::init(a, &mut rng), Err(Error::Config(_))));
        let mut a = small_arch();
        a.num_classes = 0;
        assert!(ModelParams::zeros(a).is_err());
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let p = ModelParams::zeros(small_arch()).unwrap();
        assert!(matches!(p.predict(&input(2, 4, 0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn glorot_bounds_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ModelParams::init(small_arch(), &mut rng).unwrap();
        let w = &p.backbone[0].weight.value;
        let bound = (6.0f64 / 11.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(p.backbone[0].bias.value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_forward_updates_running_stats_only_on_commit() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = ModelParams::init(small_arch(), &mut rng).unwrap();
        let before = p.clone();
        let mut t = Tape::new();
        let b = p.bind(&mut t);
        let x = t.constant(input(6, 5, 13));
        let out = p.forward(&mut t, &b, x, Mode::Train, &mut rng).unwrap();
        assert_eq!(p, before);
        p.commit_batch_stats(&out.batch_stats).unwrap();
        assert_ne!(p.bottleneck[0].bn.running_mean, before.bottleneck[0].bn.running_mean);
    }

    #[test]
    fn flat_binding_matches_per_tensor_binding() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = ModelParams::init(small_arch(), &mut rng).unwrap();
        let x = input(4, 5, 15);
        let mut t = Tape::new();
        let theta = t.leaf(Tensor::vector(p.flatten()), true);
        let b = p.bind_flat(&mut t, theta).unwrap();
        let xv = t.constant(x.clone());
        let out = p.forward(&mut t, &b, xv, Mode::Eval, &mut rng).unwrap();
        let (_, logits) = p.predict(&x).unwrap();
        assert_eq!(t.value(out.logits), &logits);
    }
}
