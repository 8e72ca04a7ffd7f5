"""GP identification of the passive dynamics as a kernel-mixture mean."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .composition import Kernel, Sum
from .kernels import KernelSpec

LOG_2PI = math.log(2.0 * math.pi)


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class TrainingSet:
    inputs: np.ndarray   # (D, n)
    outputs: np.ndarray  # (D, n)

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        if x.shape[0] != y.shape[0]:
            raise ValueError("inputs and outputs must have the same number of rows")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("training data must be finite")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "outputs", y)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def to_csv(self) -> str:
        n, m = self.inputs.shape[1], self.outputs.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x_{i + 1}" for i in range(n)] + [f"f_{i + 1}" for i in range(m)])
        for xi, yi in zip(self.inputs, self.outputs):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(v)) for v in yi])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainingSet":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], [r for r in rows[1:] if r]
        xs = [i for i, h in enumerate(header) if h.startswith("x_")]
        fs = [i for i, h in enumerate(header) if h.startswith("f_")]
        if not xs or len(xs) + len(fs) != len(header):
            raise ValueError("expected columns x_1..x_n, f_1..f_n")
        data = np.array(body, dtype=float).reshape(len(body), len(header))
        return cls(data[:, xs], data[:, fs])


def sample_training_set(f, box, per_axis: int, noise: float, rng: np.random.Generator) -> TrainingSet:
    """Regular grid of states with uniform noise of half-width ``noise`` on f."""
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in box]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    clean = np.array([f(x) for x in grid], dtype=float)
    return TrainingSet(grid, clean + rng.uniform(-noise, noise, size=clean.shape))


@dataclass(frozen=True)
class Hyperparams:
    """theta = (1/2 ln diag(Sigma_w), ln sigma_f, ln sigma_n)."""

    theta: np.ndarray

    def __post_init__(self):
        t = np.array(self.theta, dtype=float).reshape(-1)
        if t.size < 3 or not np.all(np.isfinite(t)):
            raise ValueError("theta must be finite with length n+2")
        t.setflags(write=False)
        object.__setattr__(self, "theta", t)

    @classmethod
    def from_values(cls, lengthscale_sq, amplitude: float, noise: float) -> "Hyperparams":
        ls = np.asarray(lengthscale_sq, dtype=float).reshape(-1)
        return cls(np.concatenate([0.5 * np.log(ls), [math.log(amplitude), math.log(noise)]]))

    @property
    def dim(self) -> int:
        return self.theta.size - 2

    @property
    def inv_lengthscale(self) -> np.ndarray:
        return np.exp(-2.0 * self.theta[:-2])

    @property
    def amplitude(self) -> float:
        return float(math.exp(self.theta[-2]))

    @property
    def noise(self) -> float:
        return float(math.exp(self.theta[-1]))


def _sqdist_parts(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-dimension squared differences, shape (len(a), len(b), n)."""
    return (a[:, None, :] - b[None, :, :]) ** 2


def cross_kernel(a: np.ndarray, b: np.ndarray, hp: Hyperparams) -> np.ndarray:
    q = (_sqdist_parts(a, b) * hp.inv_lengthscale).sum(-1)
    return hp.amplitude * np.exp(-0.5 * q)


def _cholesky(k: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(k)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("Gram matrix is not positive definite") from exc


def gram_matrix(inputs, hp: Hyperparams) -> np.ndarray:
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    if x.shape[0] < 1:
        raise ValueError("need at least one input")
    k = cross_kernel(x, x, hp)
    k[np.diag_indices_from(k)] += hp.noise ** 2
    _cholesky(k)
    return k


@dataclass(frozen=True)
class GpMean:
    """Posterior mean f(x) = Y^T K_XX^{-1} k(x), one weight column per output."""

    centers: np.ndarray   # (D, n)
    weights: np.ndarray   # (D, n_out), K_XX^{-1} Y
    hp: Hyperparams
    gram: np.ndarray      # K_XX including noise

    @property
    def inv_lengthscale(self) -> np.ndarray:
        return self.hp.inv_lengthscale

    @property
    def amplitude(self) -> float:
        return self.hp.amplitude

    def kernel_values(self, x) -> np.ndarray:
        X = np.atleast_2d(np.asarray(x, dtype=float))
        return cross_kernel(X, self.centers, self.hp)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = self.kernel_values(x) @ self.weights
        return out[0] if x.ndim == 1 else out

    def jacobian(self, x) -> np.ndarray:
        """d f_j / d x_d at a single point, shape (n_out, n)."""
        x = np.asarray(x, dtype=float)
        kv = self.kernel_values(x)[0]
        dk = -(x - self.centers) * self.inv_lengthscale * kv[:, None]  # (D, n)
        return self.weights.T @ dk

    def kernels(self) -> list[KernelSpec]:
        return [KernelSpec(c, self.amplitude, self.inv_lengthscale) for c in self.centers]

    def to_exprs(self) -> list[Sum]:
        ks = [Kernel(k) for k in self.kernels()]
        return [Sum(tuple(ks), tuple(self.weights[:, j])) for j in range(self.weights.shape[1])]


def fit_mean(ts: TrainingSet, hp: Hyperparams) -> GpMean:
    k = gram_matrix(ts.inputs, hp)
    chol = _cholesky(k)
    w = cho_solve((chol, True), ts.outputs)
    return GpMean(ts.inputs.copy(), w, hp, k)


def neg_objective(ts: TrainingSet, hp: Hyperparams, kappa_theta: float = 3.0):
    """Negative regularised log marginal likelihood and its gradient in theta.

    Every output column shares the kernel; the penalty covers all entries of
    theta except the last (ln sigma_n).
    """
    x, y = ts.inputs, ts.outputs
    d, n = x.shape
    parts = _sqdist_parts(x, x)
    w = hp.inv_lengthscale
    kf = hp.amplitude * np.exp(-0.5 * (parts * w).sum(-1))
    k = kf.copy()
    k[np.diag_indices_from(k)] += hp.noise ** 2
    chol = _cholesky(k)
    a = cho_solve((chol, True), y)                        # (D, n_out)
    n_out = y.shape[1]
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    nll = 0.5 * float((y * a).sum()) + 0.5 * n_out * logdet + 0.5 * n_out * d * LOG_2PI
    theta = hp.theta
    value = nll + kappa_theta * float((theta[:-1] ** 2).sum())

    kinv = cho_solve((chol, True), np.eye(d))
    inner = n_out * kinv - a @ a.T                        # dNLL = 0.5 tr(inner dK)
    grad = np.empty_like(theta)
    for j in range(n):
        grad[j] = 0.5 * float((inner * (kf * parts[:, :, j] * w[j])).sum())
    grad[n] = 0.5 * float((inner * kf).sum())
    grad[n + 1] = 0.5 * float(np.trace(inner)) * 2.0 * hp.noise ** 2
    grad[:-1] += 2.0 * kappa_theta * theta[:-1]
    return value, grad


@dataclass
class OptimizeResult:
    hp: Hyperparams
    value: float
    initial_value: float
    evaluations: int
    trace: list


def optimize_hyperparams(ts: TrainingSet, theta_ini, budget: int = 100, kappa_theta: float = 3.0,
                         gtol: float = 1e-10) -> OptimizeResult:
    """Polak-Ribiere conjugate gradient with Armijo backtracking.

    ``budget`` caps objective evaluations; the best theta seen is returned.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    theta = np.array(theta_ini, dtype=float)
    evals = 0
    trace = []

    def evaluate(t):
        nonlocal evals
        evals += 1
        try:
            v, g = neg_objective(ts, Hyperparams(t), kappa_theta)
        except NotPositiveDefinite:
            v, g = math.inf, None
        trace.append(v)
        return v, g

    f, g = evaluate(theta)
    f0 = f
    if g is None:
        return OptimizeResult(Hyperparams(theta), f, f, evals, trace)
    best_theta, best_f = theta.copy(), f
    d = -g
    step = 1.0 / max(1.0, float(np.linalg.norm(g)))
    c1 = 1e-4
    while evals < budget and np.linalg.norm(g) > gtol:
        slope = float(g @ d)
        if slope >= 0:
            d = -g
            slope = -float(g @ g)
        t = step
        accepted = False
        while evals < budget:
            cand = theta + t * d
            fc, gc = evaluate(cand)
            if gc is not None and fc <= f + c1 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        beta = max(0.0, float(gc @ (gc - g)) / float(g @ g))
        theta, f, g_prev, g = cand, fc, g, gc
        d = -g + beta * d
        step = min(t * 2.0, 10.0)
        if f < best_f:
            best_theta, best_f = theta.copy(), f
    return OptimizeResult(Hyperparams(best_theta), best_f, f0, evals, trace)


def gp_to_json(gp: GpMean) -> dict:
    """Hyperparameters, centers and weights, plus each output as an expression tree."""
    from .composition import to_json
    return {
        "theta": gp.hp.theta.tolist(),
        "centers": gp.centers.tolist(),
        "weights": gp.weights.tolist(),
        "exprs": [to_json(e) for e in gp.to_exprs()],
    }


def gp_from_json(d: dict) -> GpMean:
    hp = Hyperparams(d["theta"])
    centers = np.asarray(d["centers"], dtype=float)
    weights = np.asarray(d["weights"], dtype=float)
    if centers.shape[0] != weights.shape[0] or centers.shape[1] != hp.dim:
        raise ValueError("gp JSON has inconsistent shapes")
    return GpMean(centers, weights, hp, gram_matrix(centers, hp))
