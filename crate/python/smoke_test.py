"""Smoke test for the prefflow extension module."""

import math
import os
import tempfile

import prefflow


def main():
    assert "Onemoon2D" in prefflow.Target.names()
    target = prefflow.Target("onemoon2d")
    assert target.dim == 2
    lower, upper = target.bounds
    assert len(lower) == 2 and all(l < u for l, u in zip(lower, upper))
    assert math.isfinite(target.log_density(target.mean()))

    p = prefflow.comparison_probability([0.3, -0.2], 0, 1.0)
    assert abs(p - (1.0 - 0.5 * math.exp(-0.5))) < 1e-12
    assert abs(prefflow.ranking_log_likelihood([0.0] * 3, [0, 1, 2]) + math.log(6)) < 1e-12

    data = prefflow.Dataset.generate(target, n=40, k=5, seed=1)
    heldout = prefflow.Dataset.generate(target, n=20, k=5, seed=2)
    assert len(data) == 40 and data.k == 5 and len(data.winners()) == 40

    model = prefflow.Model.for_target(target, arch="affine:4:16", seed=3)
    before = model.log_density([0.0, 0.0])
    report = model.train(data, iterations=300, learning_rate=1e-3, seed=4)
    assert report["iterations"] == 300 and len(report["trace"]) > 0
    assert model.log_density([0.0, 0.0]) != before

    samples = model.sample(300, 5)
    assert len(samples) == 300 and len(samples[0]) == 2
    metrics = model.evaluate(target, heldout, samples=300, seed=6)
    assert math.isfinite(metrics["loglik"]) and metrics["wasserstein"] > 0.0
    assert 0.0 <= metrics["mmtv"] <= 1.0
    assert prefflow.wasserstein(samples, samples) < 1e-12
    assert prefflow.mmtv(samples, samples) < 1e-12

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.json")
        model.save(path)
        again = prefflow.Model.load(path)
        assert again.log_density([0.5, -0.5]) == model.log_density([0.5, -0.5])
        dpath = os.path.join(tmp, "data.jsonl")
        data.save(dpath)
        assert prefflow.Dataset.load(dpath).observations() == data.observations()

        spec = prefflow.default_spec("onemoon2d")
        spec.update(n=20, heldout_n=10, seeds=[0, 1], model="factorized-normal")
        spec["train"]["iterations"] = 50
        spec["metrics"]["samples"] = 200
        result = prefflow.run_experiment(spec, os.path.join(tmp, "run"))
        assert result["aggregate"]["completed"] == 2
        assert os.path.exists(os.path.join(tmp, "run", "metrics.csv"))

    try:
        prefflow.Target("mars3d")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown target accepted")
    try:
        model.train(data, learning_rate=-1.0)
    except RuntimeError as e:
        assert "learning_rate" in str(e)
    else:
        raise AssertionError("negative learning rate accepted")

    print("prefflow smoke test passed")


if __name__ == "__main__":
    main()
