import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpcert.geometry import make_simplex
from gpcert.kernels import (BoundPair, KernelSpec, kernel_eps, kernel_eval, kernel_grad,
                            kernel_simplex_bounds, lambda_max_sym)


def test_unit_kernel_at_center():
    k = KernelSpec([0.0, 0.0], 1.0, [1.0, 1.0])
    assert kernel_eval(k, [0.0, 0.0]) == 1.0
    assert np.array_equal(kernel_grad(k, [0.0, 0.0]), [0.0, 0.0])


def test_kernel_bounds_known_values():
    k = KernelSpec([0.0, 0.0], 1.0, [1.0, 1.0])
    s = make_simplex([[0, 0], [1, 0], [0, 1]])
    b = kernel_simplex_bounds(k, s)
    tau2 = 0.5
    assert b.lower == pytest.approx(math.exp(-1.5) * 2 * tau2, rel=1e-14)
    assert b.upper == pytest.approx(0.5 * 2 * tau2, rel=1e-14)


def test_invalid_spec():
    with pytest.raises(ValueError):
        KernelSpec([0.0], 0.0, [1.0])
    with pytest.raises(ValueError):
        KernelSpec([0.0], 1.0, [-1.0])
    with pytest.raises(ValueError):
        KernelSpec([0.0, 1.0], 1.0, [1.0])


def test_bound_pair_nonnegative():
    with pytest.raises(ValueError):
        BoundPair(-1e-3, 0.0)


def test_gradient_matches_finite_differences(rng):
    for _ in range(20):
        n = int(rng.integers(1, 4))
        k = KernelSpec(rng.normal(size=n), rng.uniform(0.5, 2), rng.uniform(0.2, 3, size=n))
        x = rng.normal(size=n)
        h = 1e-6
        fd = np.array([(kernel_eval(k, x + h * e) - kernel_eval(k, x - h * e)) / (2 * h) for e in np.eye(n)])
        assert np.allclose(kernel_grad(k, x), fd, rtol=1e-6, atol=1e-9)


def test_lambda_max_matches_eigvalsh(rng):
    for _ in range(10):
        a = rng.normal(size=(4, 4))
        a = a @ a.T
        assert lambda_max_sym(a) == pytest.approx(np.linalg.eigvalsh(a).max(), rel=1e-8)


def test_lambda_max_diagonal():
    k = KernelSpec([0.0, 0.0, 0.0], 1.0, [0.3, 2.5, 1.0])
    assert k.lambda_max == 2.5
    assert lambda_max_sym(np.diag([0.3, 2.5, 1.0])) == pytest.approx(2.5, rel=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.floats(0.05, 1.5), st.integers(0, 2 ** 31))
def test_kernel_interpolation_error_within_bounds(n, size, seed):
    r = np.random.default_rng(seed)
    k = KernelSpec(r.normal(size=n), r.uniform(0.3, 3), r.uniform(0.1, 4, size=n))
    s = make_simplex(r.normal(size=n) + size * r.normal(size=(n + 1, n)))
    b = kernel_simplex_bounds(k, s)
    vals = kernel_eval(k, s.vertices)
    W = r.dirichlet(np.ones(n + 1), size=500)
    err = kernel_eval(k, W @ s.vertices) - W @ vals
    assert err.max() <= b.upper + 1e-12
    assert err.min() >= -b.lower - 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.floats(1e-4, 10), st.integers(2, 6))
def test_eps_ratio(sf, lam, tau, nv):
    lo, hi = kernel_eps(sf, lam, tau, nv)
    assert hi / lo == pytest.approx(math.exp(1.5) / 2, rel=1e-12)
