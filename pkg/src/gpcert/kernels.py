"""Gaussian kernels and their second-order interpolation-error bounds on simplices."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Simplex

EXP_M15 = math.exp(-1.5)


@dataclass(frozen=True)
class KernelSpec:
    """sigma_f * exp(-0.5 (x-c)^T diag(inv_lengthscale) (x-c))."""

    center: np.ndarray
    amplitude: float
    inv_lengthscale: np.ndarray

    def __post_init__(self):
        c = np.array(self.center, dtype=float).reshape(-1)
        w = np.array(self.inv_lengthscale, dtype=float).reshape(-1)
        if w.shape != c.shape:
            raise ValueError("inv_lengthscale must have one entry per state dimension")
        if not self.amplitude > 0 or not np.all(w > 0):
            raise ValueError("amplitude and inverse length-scales must be positive")
        c.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "inv_lengthscale", w)
        object.__setattr__(self, "amplitude", float(self.amplitude))

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def lambda_max(self) -> float:
        return float(self.inv_lengthscale.max())

    def to_json(self) -> dict:
        return {
            "center": self.center.tolist(),
            "amplitude": self.amplitude,
            "inv_lengthscale": self.inv_lengthscale.tolist(),
        }

    @classmethod
    def from_json(cls, d) -> "KernelSpec":
        return cls(d["center"], d["amplitude"], d["inv_lengthscale"])


@dataclass(frozen=True)
class BoundPair:
    """Interpolation-error bounds: -lower <= xi - interp(xi) <= upper."""

    lower: float
    upper: float

    def __post_init__(self):
        if not (self.lower >= 0 and self.upper >= 0):
            raise ValueError(f"bounds must be nonnegative, got {self.lower}, {self.upper}")


ZERO_BOUNDS = BoundPair(0.0, 0.0)


def kernel_eval(k: KernelSpec, x):
    """Kernel value at a point (n,) or at each row of (m, n)."""
    d = np.asarray(x, dtype=float) - k.center
    return k.amplitude * np.exp(-0.5 * (d * d * k.inv_lengthscale).sum(-1))


def kernel_grad(k: KernelSpec, x):
    """-Sigma_w^{-1} (x - c) K(x); shape (n,) or (m, n)."""
    d = np.asarray(x, dtype=float) - k.center
    kv = k.amplitude * np.exp(-0.5 * (d * d * k.inv_lengthscale).sum(-1))
    return -(d * k.inv_lengthscale) * np.asarray(kv)[..., None]


def kernel_eps(amplitude: float, lam_max: float, tau: float, n_vertices: int) -> tuple[float, float]:
    """(eps_L, eps_U) for a kernel on a simplex with ``n_vertices`` vertices."""
    base = (n_vertices - 1) * amplitude * lam_max * tau * tau
    return EXP_M15 * base, 0.5 * base


def kernel_simplex_bounds(k: KernelSpec, s: Simplex) -> BoundPair:
    if s.dim != k.dim:
        raise ValueError("simplex and kernel dimensions differ")
    lo, hi = kernel_eps(k.amplitude, k.lambda_max, s.tau, s.n_vertices)
    return BoundPair(lo, hi)


def lambda_max_sym(a, tol: float = 1e-12, max_iter: int = 10000) -> float:
    """Largest eigenvalue of a symmetric positive semidefinite matrix by power iteration.

    Only needed for full (non-diagonal) inverse length-scale matrices.
    """
    a = np.asarray(a, dtype=float)
    if not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValueError("matrix must be symmetric")
    n = a.shape[0]
    v = np.ones(n) / math.sqrt(n) + np.arange(n) * 1e-3
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = a @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v_new = w / nw
        lam_new = float(v_new @ a @ v_new)
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            return lam_new
        v, lam = v_new, lam_new
    return lam
