import math

import numpy as np
import pytest

from gpcert.composition import expr_eval
from gpcert.gpmodel import (Hyperparams, NotPositiveDefinite, TrainingSet, fit_mean, gp_from_json,
                            gp_to_json, gram_matrix, neg_objective, optimize_hyperparams,
                            sample_training_set)
from gpcert.simulator import pendulum_f

PEND_BOX = [(-6, 6), (-6, 6)]
THETA_INI = [0.0, 0.0, 0.0, math.log(0.1)]


@pytest.fixture(scope="module")
def pendulum_data():
    return sample_training_set(pendulum_f, PEND_BOX, 9, 0.1, np.random.default_rng(42))


def test_single_point_gram():
    hp = Hyperparams.from_values([1.0, 1.0], 2.0, 0.5)
    k = gram_matrix(np.zeros((1, 2)), hp)
    assert k.shape == (1, 1) and k[0, 0] == pytest.approx(2.0 + 0.25)


def test_duplicate_inputs_without_noise():
    hp = Hyperparams([0.0, 0.0, 0.0, -50.0])
    with pytest.raises(NotPositiveDefinite):
        gram_matrix(np.zeros((2, 2)), hp)


def test_gram_matches_double_loop(rng):
    X = rng.normal(size=(10, 2))
    hp = Hyperparams(rng.normal(scale=0.3, size=4))
    K = gram_matrix(X, hp)
    w = hp.inv_lengthscale
    for i in range(10):
        for j in range(10):
            d = X[i] - X[j]
            ref = hp.amplitude * math.exp(-0.5 * float(d @ (w * d))) + (hp.noise ** 2 if i == j else 0.0)
            assert K[i, j] == pytest.approx(ref, rel=1e-14, abs=1e-300)


def test_single_point_mean():
    hp = Hyperparams.from_values([1.0], 1.5, 0.5)
    gp = fit_mean(TrainingSet([[0.3]], [[2.0]]), hp)
    assert gp([0.3])[0] == pytest.approx(2.0 * 1.5 / (1.5 + 0.25), rel=1e-14)


def test_noiseless_fit_interpolates(rng):
    X = rng.uniform(-2, 2, size=(15, 2))
    Y = np.stack([np.sin(X[:, 0]), np.cos(X[:, 1])], axis=1)
    gp = fit_mean(TrainingSet(X, Y), Hyperparams.from_values([1.0, 1.0], 1.0, 1e-6))
    assert np.abs(gp(X) - Y).max() < 1e-4


def test_solve_residual(pendulum_data):
    hp = Hyperparams(THETA_INI)
    gp = fit_mean(pendulum_data, hp)
    r = gp.gram @ gp.weights - pendulum_data.outputs
    assert np.linalg.norm(r) <= 1e-8 * np.linalg.norm(pendulum_data.outputs)


def test_expr_export_matches(rng, pendulum_data):
    gp = fit_mean(pendulum_data, Hyperparams(THETA_INI))
    X = rng.uniform(-6, 6, size=(1000, 2))
    direct = gp(X)
    for j, e in enumerate(gp.to_exprs()):
        assert np.allclose(expr_eval(e, X), direct[:, j], rtol=1e-12, atol=1e-12 * np.abs(direct).max())


def test_jacobian_finite_differences(rng, pendulum_data):
    gp = fit_mean(pendulum_data, Hyperparams([0.5, 0.5, 1.0, -2.0]))
    x = rng.normal(size=2)
    h = 1e-6
    fd = np.stack([(gp(x + h * e) - gp(x - h * e)) / (2 * h) for e in np.eye(2)], axis=1)
    assert np.allclose(gp.jacobian(x), fd, rtol=1e-6, atol=1e-8)


def test_objective_gradient(rng, pendulum_data):
    for _ in range(20):
        hp = Hyperparams(rng.normal(scale=0.5, size=4) + [0.5, 0.5, 1.0, -1.5])
        v, g = neg_objective(pendulum_data, hp)
        h = 1e-6
        fd = np.array([(neg_objective(pendulum_data, Hyperparams(hp.theta + h * e))[0]
                        - neg_objective(pendulum_data, Hyperparams(hp.theta - h * e))[0]) / (2 * h)
                       for e in np.eye(4)])
        assert np.abs(g - fd).max() <= 1e-5 * np.abs(g).max()


def test_penalty_excludes_noise_entry(pendulum_data):
    a = neg_objective(pendulum_data, Hyperparams([0, 0, 0, -1.0]), kappa_theta=0.0)[0]
    b = neg_objective(pendulum_data, Hyperparams([0, 0, 0, -1.0]), kappa_theta=5.0)[0]
    assert a == b


def test_strong_regularizer_drives_to_zero(pendulum_data):
    res = optimize_hyperparams(pendulum_data, [0.3, -0.2, 0.4, math.log(0.1)], budget=100, kappa_theta=1e6)
    assert np.abs(res.hp.theta[:-1]).max() < 1e-2


def test_optimizer_decreases_objective(pendulum_data):
    res = optimize_hyperparams(pendulum_data, THETA_INI, budget=100)
    assert res.value <= res.initial_value
    assert res.evaluations <= 100
    assert res.trace[0] == res.initial_value


def test_optimizer_stationary_point_returned():
    ts = TrainingSet([[0.0]], [[0.0]])
    res = optimize_hyperparams(ts, [0.0, 0.0, -1.0], budget=10, kappa_theta=0.0, gtol=1e3)
    assert np.array_equal(res.hp.theta, [0.0, 0.0, -1.0])


def test_optimizer_all_steps_fail_returns_initial():
    ts = TrainingSet([[0.0], [0.0]], [[1.0], [1.0]])
    res = optimize_hyperparams(ts, [0.0, 0.0, -60.0], budget=5)
    assert np.array_equal(res.hp.theta, [0.0, 0.0, -60.0])


def test_synthetic_amplitude_recovery(rng):
    true = Hyperparams.from_values([1.0, 1.0], 2.0, 0.05)
    X = rng.uniform(-3, 3, size=(60, 2))
    K = gram_matrix(X, true)
    Y = np.linalg.cholesky(K) @ rng.normal(size=(60, 2))
    res = optimize_hyperparams(TrainingSet(X, Y), [0.0, 0.0, 0.0, math.log(0.1)], budget=100, kappa_theta=0.0)
    assert 2.0 / 3 <= res.hp.amplitude <= 2.0 * 3


def test_pendulum_heldout_rmse(pendulum_data):
    res = optimize_hyperparams(pendulum_data, THETA_INI, budget=100)
    gp = fit_mean(pendulum_data, res.hp)
    g = np.linspace(-5.25, 5.25, 15)
    X = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
    Y = np.array([pendulum_f(x) for x in X])
    rmse = np.sqrt(((gp(X) - Y) ** 2).mean(0))
    assert np.all(rmse < 0.2)


def test_training_csv_round_trip(pendulum_data):
    ts = TrainingSet.from_csv(pendulum_data.to_csv())
    assert np.array_equal(ts.inputs, pendulum_data.inputs)
    assert np.array_equal(ts.outputs, pendulum_data.outputs)


def test_gp_json_round_trip(pendulum_data):
    gp = fit_mean(pendulum_data, Hyperparams(THETA_INI))
    gp2 = gp_from_json(gp_to_json(gp))
    X = np.random.default_rng(0).normal(size=(20, 2))
    assert np.array_equal(gp(X), gp2(X))


def test_training_set_validation():
    with pytest.raises(ValueError):
        TrainingSet([[0.0], [1.0]], [[1.0]])
    with pytest.raises(ValueError):
        TrainingSet([[np.nan]], [[1.0]])
