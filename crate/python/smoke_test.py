"""Smoke test for the `afn` extension module.

Build it with `maturin develop -m crates/py/Cargo.toml`, or with
`cargo build --release -p afn-py` and put `target/release/libafn.so` on the
path as `afn.so` (see README). Exits nonzero on the first failure.
"""

import math
import os
import sys
import tempfile

import afn


def main():
    source, target = afn.gen_synthetic(samples=200, seed=1)
    assert len(source) == 200 and source.dim == 16, source
    assert target.domain == "target" and target.labels is not None
    assert abs(target.mean_input_norm() / source.mean_input_norm() - 0.5) < 0.05

    model, metrics = afn.train(source, target, objective="safn", epochs=3, seed=0)
    assert len(metrics["epochs"]) == 3
    per_epoch = len(metrics["iters"]) // 3
    assert per_epoch == math.ceil(200 / 32), per_epoch
    acc = model.evaluate(target)
    assert acc["overall"] == metrics["epochs"][-1]["acc_tgt"], (acc, metrics["epochs"][-1])

    # same seed, same run
    again, _ = afn.train(source, target, objective="safn", epochs=3, seed=0)
    assert again.predict(target.features[:5]) == model.predict(target.features[:5])

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "checkpoint")
        model.save(path)
        loaded = afn.Model.load(path)
        assert loaded.evaluate(target) == acc
        csv = os.path.join(d, "source.csv")
        source.write_csv(csv)
        assert afn.Dataset.load_csv(csv).fingerprint() == source.fingerprint()

    feats, logits = model.predict(source.features[:4])
    norms = model.feature_norms(source.features[:4])
    for f, n in zip(feats, norms):
        assert abs(math.sqrt(sum(v * v for v in f)) - n) < 1e-9
    assert len(logits[0]) == model.num_classes == 4

    cng, ong, png = afn.robustness_gaps(80.0, 75.0, 60.0)
    assert (cng, ong, png) == (5.0, 15.0, 20.0)
    assert afn.safn_targets([1.0, 30.0], 1.0, 25.0) == [25.0, 31.0]
    assert afn.mmfnd([2.0, 4.0], [1.0, 1.0]) == 2.0

    _, partial_target = afn.make_partial(source, target, [0, 1])
    assert partial_target.label_space == [0, 1]
    report = afn.robustness_protocol(source, target, [0, 1], l_percent=10.0, epochs=2)
    assert report["png"] == report["cng"] + report["ong"]

    checks = afn.run_selfcheck()
    failed = [c for c in checks if not c[1]]
    assert not failed, failed

    for bad in (
        lambda: afn.train(source, target, objective="dann", epochs=1),
        lambda: afn.robustness_gaps(120.0, 50.0, 50.0),
        lambda: afn.Dataset([[1.0]], None, "source"),
    ):
        try:
            bad()
        except ValueError:
            pass
        else:
            raise AssertionError("expected ValueError")
    try:
        afn.Model.load("/nonexistent/checkpoint")
    except OSError:
        pass
    else:
        raise AssertionError("expected OSError")

    print(f"ok: {len(checks)} invariants, target accuracy {acc['overall']:.3f}")


if __name__ == "__main__":
    sys.exit(main())
