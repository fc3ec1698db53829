"""Smoke test for the pycovfilt extension module."""

import math
import tempfile
from pathlib import Path

import pycovfilt as cf


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def check_nll():
    sigma = [[2.0, 0.3], [0.3, 1.0]]
    loss, d_mean, d_sigma = cf.gaussian_nll([0.0, 0.0], sigma, [1.0, -1.0])
    det = 2.0 * 1.0 - 0.09
    inv = [[1.0 / det, -0.3 / det], [-0.3 / det, 2.0 / det]]
    r = [1.0, -1.0]
    quad = sum(r[i] * inv[i][j] * r[j] for i in range(2) for j in range(2))
    assert close(loss, 0.5 * quad + 0.5 * math.log(det)), loss
    # d/dmean of ½ rᵀΣ⁻¹r with r = y − mean is −Σ⁻¹r.
    expect = [-(inv[i][0] * r[0] + inv[i][1] * r[1]) for i in range(2)]
    assert all(close(a, b) for a, b in zip(d_mean, expect)), d_mean
    assert len(d_sigma) == 2 and len(d_sigma[0]) == 2


def check_covariance_helpers():
    sigma = cf.assemble_covariance([0.0, math.log(4.0)], [0.0])
    assert close(sigma[0][0], 1.0) and close(sigma[1][1], 4.0) and sigma[0][1] == 0.0
    loaded, lam = cf.stabilize([[1.0, 0.0], [0.0, 1.0]])
    assert lam == 0.0 and loaded == [[1.0, 0.0], [0.0, 1.0]]
    try:
        cf.stabilize([[1.0, 3.0], [3.0, 1.0]])
    except cf.CovfiltError as e:
        assert e.args[0] == "not-positive-definite", e.args
    else:
        raise AssertionError("indefinite matrix accepted")
    mean, epi, ale, pred = cf.combine_samples([[0.0], [2.0]], [[[1.0]], [[1.0]]])
    assert mean == [1.0] and epi == [[1.0]] and ale == [[1.0]] and pred == [[2.0]]


def check_filter():
    f = cf.Filter.constant_velocity(2, 0.5)
    assert (f.state_dim, f.meas_dim) == (4, 2)
    truth = [[1.0 + 3.0 * 0.5 * t, -2.0 + 1.0 * 0.5 * t] for t in range(12)]
    sigmas = [[[1e-4, 0.0], [0.0, 1e-4]]] * len(truth)
    states, covs = f.run(truth, sigmas)
    assert len(states) == len(truth) and len(covs[0]) == 4
    assert abs(states[-1][2] - 3.0) < 1e-3 and abs(states[-1][3] - 1.0) < 1e-3, states[-1]
    assert f.check_subset([0, 1]) == (True, [])
    assert f.check_subset([2, 3]) == (False, [0, 1])


def check_model(tmp):
    xs = [[i / 50.0] for i in range(100)]
    ys = [[math.sin(3 * x[0]), x[0] ** 2] for x in xs]
    m = cf.Model(1, 2, hidden=[16], dropout_rate=0.1, seed=1)
    assert m.corr_dim == 1
    m.fit_normalization(xs, ys)
    losses = m.train_mle(xs, ys, epochs=20, lr=3e-3, batch_size=20, seed=2)
    assert len(losses) == 20 and losses[-1] < losses[0], losses
    means, covs = m.predict(xs[:3])
    assert len(means) == 3 and len(covs[0]) == 2
    path = Path(tmp) / "model.json"
    m.save(str(path))
    again = cf.Model.load(str(path))
    assert again.predict(xs[:3]) == (means, covs)
    est = m.predict_epistemic(xs[:2], samples=8, seed=0)
    mean, epi, ale, pred = est[0]
    assert all(close(pred[i][j], epi[i][j] + ale[i][j]) for i in range(2) for j in range(2))


def check_experiment(tmp):
    exp = cf.Experiment(
        "seed = 2\n[data]\ntrain_tracks = 4\ntest_tracks = 2\n"
        "[rainbow]\nn_points = 50\n[rainbow_training]\nepochs = 3\n"
    )
    assert exp.methods == ["fixed", "mle-variance", "mle-covariance", "kalman-covariance"]
    h = exp.hash()
    assert cf.Experiment(exp.to_toml()).hash() == h
    assert exp.generate(str(Path(tmp) / "data")) == (4, 2, 2)
    assert (Path(tmp) / "data" / "ood.csv").exists()
    model, rows = exp.rainbow()
    assert len(rows) == 50 and model.output_dim == 2
    try:
        cf.Experiment("seed = 1\nbogus = 3\n")
    except cf.CovfiltError as e:
        assert e.args[0] == "parse"
    else:
        raise AssertionError("unknown key accepted")


def main():
    check_nll()
    check_covariance_helpers()
    check_filter()
    with tempfile.TemporaryDirectory() as tmp:
        check_model(tmp)
        check_experiment(tmp)
    print("pycovfilt smoke test: ok")


if __name__ == "__main__":
    main()
