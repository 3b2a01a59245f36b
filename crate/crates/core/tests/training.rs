use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use afn_core::autograd::{Tape, Tensor};
use afn_core::data::{gen_synthetic, ShiftSpec};
use afn_core::nn::Mode;
use afn_core::objectives::{feature_norms, safn_penalty, ObjectiveConfig};
use afn_core::train::{initial_model, Sgd, TrainConfig};

fn rows(x: &Tensor, n: usize) -> Tensor {
    let cols = x.cols();
    Tensor::new(vec![n, cols], x.data()[..n * cols].to_vec()).unwrap()
}

// With the classification loss removed, every step of the stepwise penalty
// should push the mean norm of a fixed batch up.
#[test]
fn safn_penalty_alone_grows_norms_every_step() {
    let mut spec = ShiftSpec::canned();
    spec.samples = 64;
    let (source, target) = gen_synthetic(&spec).unwrap();
    let (xs, xt) = (rows(source.features(), 32), rows(target.features(), 32));
    let cfg = TrainConfig::with_objective(ObjectiveConfig::safn());
    let mut model = initial_model(&cfg, source.dim(), 4).unwrap();
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum).unwrap();

    let mut means = Vec::new();
    for _ in 0..50 {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let a = tape.constant(xs.clone());
        let b = tape.constant(xt.clone());
        let x = tape.concat_rows(a, b).unwrap();
        // same dropout mask every step
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = model.forward(&mut tape, &bound, x, Mode::Train, &mut rng).unwrap();
        let norms = feature_norms(&mut tape, out.features).unwrap();
        let n = tape.value(norms);
        means.push(n.data().iter().sum::<f64>() / n.len() as f64);
        let pen = safn_penalty(&mut tape, norms, 1.0, None).unwrap();
        tape.backward(pen).unwrap();
        model.accumulate_grads(&tape, &bound).unwrap();
        model.commit_batch_stats(&out.batch_stats).unwrap();
        sgd.step(&mut model.params_mut()).unwrap();
    }
    for w in means.windows(2) {
        assert!(w[1] > w[0], "{means:?}");
    }
    assert!(means[49] > means[0] + 0.1, "{} -> {}", means[0], means[49]);
}
