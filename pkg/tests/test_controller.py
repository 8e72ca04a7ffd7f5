import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_model
from gpcert.composition import expr_eval
from gpcert.controller import (ClosedLoopModel, CostSpec, Margin, NotStabilizable, SynthesisProblem,
                               ValueFunction, care_residual, hjb_residual, init_lqr, is_stabilizable,
                               lyapunov_derivative, optimal_input, solve_care, synthesize, value,
                               value_grad)
from gpcert.gpmodel import Hyperparams, fit_mean, optimize_hyperparams, sample_training_set
from gpcert.simulator import PENDULUM_G, grid_states, pendulum_f


@pytest.fixture(scope="module")
def pendulum_gp():
    ts = sample_training_set(pendulum_f, [(-6, 6), (-6, 6)], 9, 0.1, np.random.default_rng(42))
    res = optimize_hyperparams(ts, [0, 0, 0, math.log(0.1)])
    return fit_mean(ts, res.hp)


def test_value_zero_at_origin(rng):
    for _ in range(20):
        m = random_model(rng)
        assert value(m.value.with_alpha(rng.normal(size=m.value.alpha.size) * 1e3), np.zeros(2)) == 0.0


def test_one_hot_value(rng):
    m = random_model(rng)
    D = m.value.alpha.size
    vp = m.value.with_alpha(np.eye(D)[0])
    x = rng.normal(size=2)
    k = vp.kernels()[0]
    from gpcert.kernels import kernel_eval
    assert value(vp, x) == pytest.approx(kernel_eval(k, x) - kernel_eval(k, np.zeros(2)), rel=1e-14)


def test_value_grad_finite_differences(rng):
    m = random_model(rng, D=8)
    for x in rng.normal(size=(100, 2)):
        h = 1e-6
        fd = np.array([(value(m.value, x + h * e) - value(m.value, x - h * e)) / (2 * h) for e in np.eye(2)])
        g = value_grad(m.value, x)
        assert np.abs(g - fd).max() <= 1e-6 * max(1.0, np.abs(g).max())


def test_value_expr_matches(rng):
    m = random_model(rng)
    X = rng.normal(size=(50, 2))
    assert np.allclose(expr_eval(m.value.to_expr(), X), value(m.value, X), rtol=1e-12, atol=1e-12)


def test_optimal_input_projection(rng):
    m = random_model(rng)
    g = np.array([[0.0], [1.0]])
    mm = ClosedLoopModel(m.f, g, m.value, CostSpec(np.eye(2), np.eye(1)))
    x = rng.normal(size=2)
    assert optimal_input(mm, x)[0] == pytest.approx(-value_grad(m.value, x)[1], rel=1e-14)
    zero = mm.with_value(m.value.with_alpha(np.zeros(m.value.alpha.size)))
    assert np.all(optimal_input(zero, x) == 0)


def test_optimal_input_random_oracle(rng):
    for _ in range(10):
        m = random_model(rng, m=2)
        x = rng.normal(size=2)
        ref = -np.linalg.solve(m.cost.R, m.g.T @ value_grad(m.value, x))
        assert np.allclose(optimal_input(m, x), ref, rtol=1e-13, atol=1e-13)


def test_hjb_zero_alpha_is_state_cost(rng):
    m = random_model(rng)
    z = m.with_value(m.value.with_alpha(np.zeros(m.value.alpha.size)))
    x = rng.normal(size=2)
    assert hjb_residual(z, x) == pytest.approx(float(x @ x), rel=1e-14)
    assert lyapunov_derivative(z, x) == 0.0


def test_hjb_term_by_term(rng):
    m = random_model(rng, m=2)
    for x in rng.normal(size=(20, 2)):
        p = value_grad(m.value, x)
        f = m.f(x)
        ref = p @ f - 0.5 * p @ m.g @ np.linalg.inv(m.cost.R) @ m.g.T @ p + x @ x
        assert hjb_residual(m, x) == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_lyapunov_identity(rng):
    m = random_model(rng)
    X = rng.normal(size=(1000, 2))
    p = value_grad(m.value, X)
    Mp = p @ m.gain_matrix.T
    lhs = lyapunov_derivative(m, X)
    rhs = hjb_residual(m, X) - (X * X).sum(1) - 0.5 * (p * Mp).sum(1)
    assert np.abs(lhs - rhs).max() <= 1e-10 * max(1.0, np.abs(lhs).max())


def test_stable_linear_toy_negative():
    # f(x) = -x approximated by one wide kernel's linear part; V quadratic-like with negative alpha
    hp = Hyperparams.from_values([100.0], 1.0, 1e-3)
    from gpcert.gpmodel import TrainingSet
    gp = fit_mean(TrainingSet([[1.0], [-1.0]], [[-1.0], [1.0]]), hp)
    vp = ValueFunction.for_model(gp, [-50.0, -50.0])
    m = ClosedLoopModel(gp, np.zeros((1, 1)), vp, CostSpec(np.eye(1), np.eye(1)))
    for x in (-0.9, -0.3, 0.2, 0.7):
        assert value(vp, np.array([x])) > 0
        assert lyapunov_derivative(m, np.array([x])) < 0


def test_care_scalar_oracles():
    assert solve_care([[0.0]], [[1.0]], [[1.0]], [[1.0]])[0, 0] == pytest.approx(1.0, abs=1e-10)
    assert solve_care([[-1.0]], [[1.0]], [[1.0]], [[1.0]])[0, 0] == pytest.approx(math.sqrt(2) - 1, abs=1e-10)


def test_care_unstable_random(rng):
    for _ in range(10):
        A = rng.normal(size=(3, 3)) + np.eye(3)
        B = rng.normal(size=(3, 2))
        P = solve_care(A, B, np.eye(3), np.eye(2))
        assert np.abs(care_residual(A, B, np.eye(3), np.eye(2), P)).max() <= 1e-8 * max(1, np.abs(P).max())
        assert np.allclose(P, P.T) and np.linalg.eigvalsh(P).min() > 0
        assert np.linalg.eigvals(A - B @ B.T @ P).real.max() < 0


def test_not_stabilizable():
    A = np.diag([1.0, -1.0])
    B = np.array([[0.0], [1.0]])
    assert not is_stabilizable(A, B)
    with pytest.raises(NotStabilizable):
        solve_care(A, B, np.eye(2), np.eye(1))
    assert is_stabilizable(np.diag([-1.0, 1.0]), B)


def test_quadratic_part_of_callable_cost():
    c = CostSpec(np.eye(2), np.eye(1), q=lambda x: 2 * x[0] ** 2 + x[0] * x[1] + 3 * x[1] ** 2 + x[0] ** 4)
    assert np.allclose(c.quadratic_part(), [[2.0, 0.5], [0.5, 3.0]], atol=1e-6)


def test_init_lqr_pendulum(pendulum_gp):
    cost = CostSpec.default()
    X = grid_states([(-6, 6), (-6, 6)], 21)
    li = init_lqr(pendulum_gp, PENDULUM_G, cost, X)
    assert li.normal_residual <= 1e-8
    K = np.linalg.solve(0.5 * cost.R, PENDULUM_G.T @ li.P)
    assert np.linalg.eigvals(li.A - PENDULUM_G @ K).real.max() < 0
    # the projected value reproduces x^T P x near the origin reasonably
    assert value(li.value, np.zeros(2)) == 0.0


def test_synthesis_gradient(rng):
    for _ in range(20):
        m = random_model(rng, D=6)
        X = rng.uniform(-3, 3, size=(30, 2))
        prob = SynthesisProblem(m, X, kappa=50.0)
        a = prob.acute(m.value.alpha)
        J, _, _, g = prob.evaluate(a)
        h = 1e-6 * max(1.0, np.abs(a).max())
        fd = np.array([(prob.evaluate(a + h * e, False)[0] - prob.evaluate(a - h * e, False)[0]) / (2 * h)
                       for e in np.eye(a.size)])
        assert np.abs(g - fd).max() <= 1e-5 * np.abs(g).max()


def test_synthesis_zero_gradient_unchanged(rng):
    m = random_model(rng)
    X = rng.uniform(-1, 1, size=(10, 2))
    # with p = 0 and q = 0 every HJB term vanishes
    z = ClosedLoopModel(m.f, m.g, m.value.with_alpha(np.zeros(m.value.alpha.size)),
                        CostSpec(np.zeros((2, 2)), m.cost.R))
    res = synthesize(z, X, kappa=0.0, iterations=20)
    assert np.array_equal(res.value.alpha, z.value.alpha)
    assert res.best_objective == 0.0


def test_running_minimum_non_increasing(rng):
    m = random_model(rng)
    X = rng.uniform(-3, 3, size=(30, 2))
    res = synthesize(m, X, iterations=50, kappa_grad=1e-3)
    run = np.minimum.accumulate(res.trace[:, 0])
    assert np.all(np.diff(run) <= 0)
    assert res.best_objective == run[-1]
    lines = res.trace_csv().splitlines()
    assert lines[0] == "iteration,objective,hjb_term,lyapunov_term" and len(lines) == 52


def test_margin():
    assert np.allclose(Margin()(np.array([[1.0, 2.0]])), [10.0])


def test_value_json_round_trip(rng):
    m = random_model(rng)
    v2 = ValueFunction.from_json(m.value.to_json())
    assert v2.offset == m.value.offset and v2.digest() == m.value.digest()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_vzero_property(seed):
    r = np.random.default_rng(seed)
    m = random_model(r)
    assert value(m.value.with_alpha(r.normal(size=m.value.alpha.size) * 10 ** r.uniform(-3, 4)), np.zeros(2)) == 0.0
