import numpy as np
import pytest

from asgm.dynamics import SpdeInstance
from asgm.errors import DatasetError, TrainingDivergedError
from asgm.schedules import preset_schedule
from asgm.score import accumulated_variance
from asgm.scorenet import (
    GaussianScoreModel,
    ScoreNet,
    TrainerConfig,
    dsm_loss_and_grads,
    load_model,
    time_features,
    train_dsm,
)


def _ve():
    return SpdeInstance(preset_schedule("ve-noise"))


def _fd_check(model, t, x, target, weight, rng, n_checks=12, h=1e-4):
    _, grads = dsm_loss_and_grads(model, t, x, target, weight)
    worst = 0.0
    for name, p in model.params.items():
        for _ in range(n_checks // len(model.params) + 1):
            idx = tuple(rng.integers(0, s) for s in p.shape)
            old = p[idx]
            p[idx] = old + h
            lp, _ = dsm_loss_and_grads(model, t, x, target, weight)
            p[idx] = old - h
            lm, _ = dsm_loss_and_grads(model, t, x, target, weight)
            p[idx] = old
            fd = (lp - lm) / (2 * h)
            g = grads[name][idx]
            worst = max(worst, abs(g - fd) / max(abs(fd), abs(g), 1e-6))
    return worst


@pytest.mark.parametrize("scaled", [False, True])
def test_mlp_gradients_match_fd(rng, scaled):
    inst = _ve()
    std = (lambda t: accumulated_variance(inst, t)) if scaled else None
    net = ScoreNet((1, 2, 3), width=16, seed=2, std_fn=std)
    B = 5
    t = rng.uniform(0.1, 2.0, B)
    x = rng.standard_normal((B, 1, 2, 3))
    target = rng.standard_normal((B, 6))
    w = rng.uniform(0.1, 1.0, B)
    assert _fd_check(net, t, x, target, w, rng, n_checks=30) < 1e-3


def test_gaussian_model_gradients_match_fd(rng):
    inst = _ve()
    m = GaussianScoreModel((1, 1, 2), lambda t: accumulated_variance(inst, t), mean=0.1, log_var=-0.5)
    t = rng.uniform(0.1, 2.0, 6)
    x = rng.standard_normal((6, 1, 1, 2))
    assert _fd_check(m, t, x, rng.standard_normal((6, 2)), rng.uniform(0.1, 1, 6), rng) < 1e-3


def test_time_features_shape():
    f = time_features(np.array([0.0, 0.5]), np.geomspace(1, 1000, 8))
    assert f.shape == (2, 16) and np.all(np.abs(f) <= 1)


def test_output_shape():
    net = ScoreNet((1, 3, 3), width=8)
    assert net(0.5, np.zeros((1, 3, 3))).shape == (1, 3, 3)
    assert net(0.5, np.zeros((4, 1, 3, 3))).shape == (4, 1, 3, 3)


def test_zero_iterations_is_noop(rng):
    net = ScoreNet((1, 2, 2), width=8)
    before = {k: v.copy() for k, v in net.params.items()}
    _, losses = train_dsm(net, rng.standard_normal((4, 1, 2, 2)), _ve(), TrainerConfig(iterations=0))
    assert losses == []
    for k in before:
        np.testing.assert_array_equal(net.params[k], before[k])


def test_initial_loss_band(rng):
    inst = _ve()
    net = ScoreNet((1, 4, 4), width=32, std_fn=lambda t: accumulated_variance(inst, t))
    _, losses = train_dsm(net, rng.standard_normal((16, 1, 4, 4)), inst,
                          TrainerConfig(iterations=1, batch_size=256, lr=0.0))
    assert 0.1 <= losses[0] <= 10


def test_training_reduces_loss_and_is_deterministic(rng):
    inst = _ve()
    data = rng.standard_normal((64, 1, 1, 2))
    var = lambda t: accumulated_variance(inst, t)
    cfg = TrainerConfig(iterations=300, batch_size=64, lr=1e-2, seed=3)
    a, la = train_dsm(GaussianScoreModel((1, 1, 2), var), data, inst, cfg)
    b, lb = train_dsm(GaussianScoreModel((1, 1, 2), var), data, inst, cfg)
    assert la == lb
    assert np.mean(la[-50:]) < np.mean(la[:50])


def test_dataset_errors(rng):
    net = ScoreNet((1, 2, 2), width=8)
    with pytest.raises(DatasetError):
        train_dsm(net, np.zeros((0, 1, 2, 2)), _ve())
    with pytest.raises(DatasetError):
        train_dsm(net, np.zeros((3, 1, 3, 3)), _ve())


def test_diverged(rng):
    net = ScoreNet((1, 2, 2), width=8)
    net.params["b3"][:] = np.nan
    with pytest.raises(TrainingDivergedError):
        train_dsm(net, rng.standard_normal((4, 1, 2, 2)), _ve(), TrainerConfig(iterations=3))


def test_checkpoint_round_trip(tmp_path, rng):
    inst = _ve()
    var = lambda t: accumulated_variance(inst, t)
    net = ScoreNet((1, 2, 3), width=8, std_fn=var)
    net.save(tmp_path / "mlp", {"lr": 0.001})
    back = load_model(tmp_path / "mlp", var)
    x = rng.standard_normal((3, 1, 2, 3))
    # parameters are stored as float32
    np.testing.assert_allclose(back(0.7, x), net(0.7, x), rtol=1e-4, atol=1e-5)
    assert "config.lr=0.001" in (tmp_path / "mlp" / "manifest.txt").read_text()
    g = GaussianScoreModel((1, 1, 2), var, mean=0.25, log_var=-1.0)
    g.save(tmp_path / "g")
    gb = load_model(tmp_path / "g", var)
    np.testing.assert_allclose(gb(1.0, x[:, :, :1, :2]), g(1.0, x[:, :, :1, :2]), rtol=1e-6)
