"""Kernel-parameterised value function and (sub-)optimal controller synthesis."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_continuous_lyapunov

from .composition import Constant, Kernel, Linear, Product, Sum
from .gpmodel import GpMean, cross_kernel
from .kernels import KernelSpec


class NotStabilizable(ValueError):
    pass


class RiccatiDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class CostSpec:
    """Running cost q(x) + 1/2 u^T R u.

    ``q`` defaults to the quadratic form x^T Q x (Q = I gives ||x||^2); a
    callable may be passed instead and its quadratic part is then taken from
    a finite-difference Hessian at the origin.
    """

    Q: np.ndarray
    R: np.ndarray
    q: object = None

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if not np.allclose(R, R.T) or np.linalg.eigvalsh(R).min() <= 0:
            raise ValueError("R must be symmetric positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @classmethod
    def default(cls, n: int = 2, m: int = 1) -> "CostSpec":
        return cls(np.eye(n), np.eye(m))

    @property
    def R_inv(self) -> np.ndarray:
        return np.linalg.inv(self.R)

    def state_cost(self, x):
        X = np.asarray(x, dtype=float)
        if self.q is not None:
            if X.ndim == 1:
                return float(self.q(X))
            return np.array([self.q(row) for row in X])
        return np.einsum("...i,ij,...j->...", X, self.Q, X)

    def quadratic_part(self, n: int | None = None, h: float = 1e-4) -> np.ndarray:
        if self.q is None:
            return self.Q
        n = self.Q.shape[0] if n is None else n
        e = np.eye(n) * h
        H = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                H[i, j] = (self.q(e[i] + e[j]) - self.q(e[i] - e[j])
                           - self.q(-e[i] + e[j]) + self.q(-e[i] - e[j])) / (4 * h * h)
        return 0.25 * (H + H.T)   # Hessian / 2, symmetrised


@dataclass(frozen=True)
class ValueFunction:
    """V(x) = sum_i alpha_i K_i(x) - sum_i alpha_i K_i(0), so V(0) = 0 exactly."""

    alpha: np.ndarray
    centers: np.ndarray
    amplitude: float
    inv_lengthscale: np.ndarray
    offset: float = field(init=False)

    def __post_init__(self):
        a = np.array(self.alpha, dtype=float).reshape(-1)
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        if a.shape[0] != c.shape[0]:
            raise ValueError("one alpha per kernel center required")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "inv_lengthscale", np.asarray(self.inv_lengthscale, dtype=float))
        object.__setattr__(self, "offset", float(self._raw(np.zeros((1, c.shape[1])))[0]))

    @classmethod
    def for_model(cls, gp: GpMean, alpha) -> "ValueFunction":
        return cls(alpha, gp.centers, gp.amplitude, gp.inv_lengthscale)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def kernel_values(self, X) -> np.ndarray:
        d = X[:, None, :] - self.centers[None, :, :]
        return self.amplitude * np.exp(-0.5 * (d * d * self.inv_lengthscale).sum(-1))

    def _raw(self, X):
        return self.kernel_values(X) @ self.alpha

    def grad_features(self, x) -> np.ndarray:
        """G[k, :, i] = dK_i/dx at x_k, so that p(x_k) = G[k] @ alpha; shape (m, n, D)."""
        X = np.atleast_2d(np.asarray(x, dtype=float))
        d = X[:, None, :] - self.centers[None, :, :]
        kv = self.amplitude * np.exp(-0.5 * (d * d * self.inv_lengthscale).sum(-1))
        return np.transpose(-(d * self.inv_lengthscale) * kv[:, :, None], (0, 2, 1))

    def kernels(self) -> list[KernelSpec]:
        return [KernelSpec(c, self.amplitude, self.inv_lengthscale) for c in self.centers]

    def to_expr(self) -> Sum:
        ks = tuple(Kernel(k) for k in self.kernels())
        return Sum(ks + (Constant(1.0),), tuple(self.alpha) + (-self.offset,))

    def with_alpha(self, alpha) -> "ValueFunction":
        return ValueFunction(alpha, self.centers, self.amplitude, self.inv_lengthscale)

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "centers": self.centers.tolist(),
            "amplitude": self.amplitude,
            "inv_lengthscale": self.inv_lengthscale.tolist(),
            "offset": self.offset,
        }

    @classmethod
    def from_json(cls, d) -> "ValueFunction":
        return cls(d["alpha"], d["centers"], d["amplitude"], d["inv_lengthscale"])

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


ValueFunctionParams = ValueFunction


def value(vp: ValueFunction, x):
    X = np.asarray(x, dtype=float)
    out = vp._raw(np.atleast_2d(X)) - vp.offset
    return float(out[0]) if X.ndim == 1 else out


def value_grad(vp: ValueFunction, x):
    X = np.asarray(x, dtype=float)
    p = vp.grad_features(X) @ vp.alpha
    return p[0] if X.ndim == 1 else p


@dataclass(frozen=True)
class ClosedLoopModel:
    """GP drift f, constant input matrix g, value function and cost."""

    f: GpMean
    g: np.ndarray
    value: ValueFunction
    cost: CostSpec

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.g, dtype=float))
        if g.shape[0] != self.value.dim:
            g = g.T if g.shape[1] == self.value.dim else g
        if g.shape[0] != self.value.dim or g.shape[1] != self.cost.R.shape[0]:
            raise ValueError("g must be n x m with m matching R")
        object.__setattr__(self, "g", g)

    @property
    def gain_matrix(self) -> np.ndarray:
        """g R^{-1} g^T."""
        return self.g @ self.cost.R_inv @ self.g.T

    def with_value(self, vp: ValueFunction) -> "ClosedLoopModel":
        return ClosedLoopModel(self.f, self.g, vp, self.cost)

    def shares_kernels(self) -> bool:
        return (self.f.centers.shape == self.value.centers.shape
                and np.array_equal(self.f.centers, self.value.centers)
                and self.f.amplitude == self.value.amplitude
                and np.array_equal(self.f.inv_lengthscale, self.value.inv_lengthscale))

    # expression trees used by the generic bound machinery
    def p_exprs(self) -> list[Sum]:
        vp = self.value
        n = vp.dim
        ks = [Kernel(k) for k in vp.kernels()]
        out = []
        for j in range(n):
            terms = []
            for i, k in enumerate(ks):
                a = np.zeros(n)
                a[j] = -vp.alpha[i] * vp.inv_lengthscale[j]
                b = vp.alpha[i] * vp.inv_lengthscale[j] * vp.centers[i, j]
                terms.append(Product((Linear(a, b), k)))
            out.append(Sum(tuple(terms), (1.0,) * len(terms)))
        return out

    def fcl_exprs(self) -> list[Sum]:
        """Closed-loop drift f - g R^-1 g^T p, one kernel-weighted affine sum per state."""
        if not self.shares_kernels():
            raise ValueError("closed-loop expression requires f and V to share kernels")
        vp = self.value
        n = vp.dim
        M = self.gain_matrix
        ks = [Kernel(k) for k in vp.kernels()]
        out = []
        for j in range(n):
            terms = []
            for i, k in enumerate(ks):
                # P_l(x) = -alpha_i w_l (x_l - c_il)
                pa = np.diag(-vp.alpha[i] * vp.inv_lengthscale)
                pb = vp.alpha[i] * vp.inv_lengthscale * vp.centers[i]
                a = -(M[j] @ pa)
                b = self.f.weights[i, j] - M[j] @ pb
                terms.append(Product((Linear(a, b), k)))
            out.append(Sum(tuple(terms), (1.0,) * len(terms)))
        return out

    def vdot_expr(self) -> Sum:
        ps, fs = self.p_exprs(), self.fcl_exprs()
        return Sum(tuple(Product((p, f)) for p, f in zip(ps, fs)), (1.0,) * len(ps))


def optimal_input(m: ClosedLoopModel, x):
    p = value_grad(m.value, x)
    return -(np.atleast_2d(p) @ m.g @ m.cost.R_inv.T).reshape(np.shape(p)[:-1] + (m.g.shape[1],))


def _terms(m: ClosedLoopModel, x):
    p = np.atleast_2d(value_grad(m.value, x))
    f = np.atleast_2d(m.f(x))
    Mp = p @ m.gain_matrix.T
    return p, f, Mp


def hjb_residual(m: ClosedLoopModel, x):
    X = np.asarray(x, dtype=float)
    p, f, Mp = _terms(m, X)
    q = np.atleast_1d(m.cost.state_cost(X))
    out = (p * f).sum(-1) - 0.5 * (p * Mp).sum(-1) + q
    return float(out[0]) if X.ndim == 1 else out


def lyapunov_derivative(m: ClosedLoopModel, x):
    X = np.asarray(x, dtype=float)
    p, f, Mp = _terms(m, X)
    out = (p * (f - Mp)).sum(-1)
    return float(out[0]) if X.ndim == 1 else out


# --- Riccati / LQR ------------------------------------------------------------

def is_stabilizable(A, B, tol: float = 1e-8) -> bool:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if lam.real >= -tol:
            sv = np.linalg.svd(np.hstack([lam * np.eye(n) - A, B]), compute_uv=False)
            if sv[n - 1] <= tol * max(1.0, sv[0]):
                return False
    return True


def _stabilizing_gain(A, B):
    n = A.shape[0]
    eig = np.linalg.eigvals(A)
    if eig.real.max() < 0:
        return np.zeros((B.shape[1], n))
    beta = 1.0 + np.abs(eig.real).max()
    Z = solve_continuous_lyapunov(A + beta * np.eye(n), 2.0 * B @ B.T)
    K = B.T @ np.linalg.pinv(Z)
    if np.linalg.eigvals(A - B @ K).real.max() >= 0:
        raise NotStabilizable("could not find a stabilising initial gain")
    return K


def care_residual(A, B, Q, R, P) -> np.ndarray:
    return A.T @ P + P @ A - P @ B @ np.linalg.solve(R, B.T @ P) + Q


def solve_care(A, B, Q, R, tol: float = 1e-8, max_iter: int = 100) -> np.ndarray:
    """Stabilising solution of A^T P + P A - P B R^-1 B^T P + Q = 0 by Newton-Kleinman."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if not is_stabilizable(A, B):
        raise NotStabilizable("(A, B) is not stabilizable")
    K = _stabilizing_gain(A, B)
    P = np.zeros((n, n))
    for _ in range(max_iter):
        Ak = A - B @ K
        P_new = solve_continuous_lyapunov(Ak.T, -(Q + K.T @ R @ K))
        P_new = 0.5 * (P_new + P_new.T)
        K = np.linalg.solve(R, B.T @ P_new)
        res = np.abs(care_residual(A, B, Q, R, P_new)).max()
        done = res <= tol * max(1.0, np.abs(P_new).max()) or np.abs(P_new - P).max() <= 1e-15 * max(1.0, np.abs(P_new).max())
        P = P_new
        if done:
            return P
    raise RiccatiDiverged(f"Newton-Kleinman did not converge in {max_iter} iterations")


@dataclass
class LqrInit:
    value: ValueFunction
    P: np.ndarray
    A: np.ndarray
    alpha_acute: np.ndarray
    normal_residual: float


def init_lqr(gp: GpMean, g, cost: CostSpec, check_states, kappa_alpha: float = 1e-3) -> LqrInit:
    """LQR value x^T P x of the GP linearisation, projected onto the kernel basis.

    The cost carries 1/2 u^T R u, so the Riccati equation is solved with R/2
    to make x^T P x the value function of that cost.
    """
    n = gp.centers.shape[1]
    A = gp.jacobian(np.zeros(n))
    g = np.asarray(g, dtype=float).reshape(n, -1)
    P = solve_care(A, g, cost.quadratic_part(n), 0.5 * cost.R)
    X = np.atleast_2d(np.asarray(check_states, dtype=float))
    target = np.einsum("ki,ij,kj->k", X, P, X)
    phi = cross_kernel(X, gp.centers, gp.hp) - cross_kernel(np.zeros((1, n)), gp.centers, gp.hp)
    chol = np.linalg.cholesky(gp.gram)
    B = cho_solve((chol, True), phi.T).T                 # V(x_k) = B[k] @ alpha_acute
    D = gp.centers.shape[0]
    lhs = B.T @ B + kappa_alpha * np.eye(D)
    rhs = B.T @ target
    aug = np.vstack([B, math.sqrt(kappa_alpha) * np.eye(D)])
    acute = np.linalg.lstsq(aug, np.concatenate([target, np.zeros(D)]), rcond=None)[0]
    resid = float(np.linalg.norm(lhs @ acute - rhs) / max(1.0, np.linalg.norm(rhs)))
    alpha = cho_solve((chol, True), acute)
    return LqrInit(ValueFunction.for_model(gp, alpha), P, A, acute, resid)


# --- synthesis ----------------------------------------------------------------

@dataclass(frozen=True)
class Margin:
    """eta(x) = quad * ||x||^2 + const."""

    quad: float = 1.0
    const: float = 5.0

    def __call__(self, X):
        X = np.atleast_2d(X)
        return self.quad * (X * X).sum(-1) + self.const


class SynthesisProblem:
    """Objective sum_k H_HJB(x_k)^2 + kappa * max_k(max(0, H_Vdot(x_k) + eta(x_k)))^2
    as a function of alpha_acute = K_XX alpha."""

    def __init__(self, m: ClosedLoopModel, check_states, kappa: float = 0.5e3, margin: Margin = Margin()):
        X = np.atleast_2d(np.asarray(check_states, dtype=float))
        self.model = m
        self.X = X
        self.kappa = float(kappa)
        self.G = m.value.grad_features(X)              # (K, n, D)
        self.f = np.atleast_2d(m.f(X))
        self.q = np.atleast_1d(m.cost.state_cost(X))
        self.eta = margin(X)
        self.M = m.gain_matrix
        self.chol = np.linalg.cholesky(m.f.gram)

    def alpha(self, acute):
        return cho_solve((self.chol, True), acute)

    def acute(self, alpha):
        return self.model.f.gram @ alpha

    def evaluate(self, acute, with_grad: bool = True):
        alpha = self.alpha(acute)
        p = self.G @ alpha                               # (K, n)
        Mp = p @ self.M.T
        pf = (p * self.f).sum(-1)
        pMp = (p * Mp).sum(-1)
        h = pf - 0.5 * pMp + self.q
        z = pf - pMp + self.eta
        k = int(np.argmax(z))
        pen = max(0.0, float(z[k]))
        hjb_term = float(h @ h)
        lyap_term = self.kappa * pen * pen
        J = hjb_term + lyap_term
        if not with_grad:
            return J, hjb_term, lyap_term
        grad_alpha = 2.0 * np.einsum("k,knd,kn->d", h, self.G, self.f - Mp)
        if pen > 0.0:
            grad_alpha += 2.0 * self.kappa * pen * (self.G[k].T @ (self.f[k] - 2.0 * Mp[k]))
        grad = cho_solve((self.chol, True), grad_alpha)
        return J, hjb_term, lyap_term, grad


@dataclass
class SynthesisResult:
    value: ValueFunction
    initial_objective: float
    best_objective: float
    best_iteration: int
    trace: np.ndarray   # (iterations + 1, 3): objective, HJB term, Lyapunov term

    def trace_csv(self) -> str:
        lines = ["iteration,objective,hjb_term,lyapunov_term"]
        for i, (j, h, l) in enumerate(self.trace):
            lines.append(f"{i},{j!r},{h!r},{l!r}")
        return "\n".join(lines) + "\n"


def synthesize(m: ClosedLoopModel, check_states, kappa: float = 0.5e3, kappa_grad: float = 1e-5,
               iterations: int = 10000, margin: Margin = Margin()) -> SynthesisResult:
    """Fixed-step steepest descent on alpha_acute; returns the best iterate seen."""
    prob = SynthesisProblem(m, check_states, kappa, margin)
    acute = prob.acute(m.value.alpha)
    trace = np.empty((iterations + 1, 3))
    best_j, best_acute, best_it = math.inf, acute.copy(), 0
    for it in range(iterations + 1):
        J, hj, ly, grad = prob.evaluate(acute)
        trace[it] = (J, hj, ly)
        if J < best_j:
            best_j, best_acute, best_it = J, acute.copy(), it
        if not np.isfinite(J) or it == iterations:
            break
        acute = acute - kappa_grad * grad
    if it < iterations:
        trace = trace[: it + 1]
    vp = m.value.with_alpha(prob.alpha(best_acute))
    return SynthesisResult(vp, float(trace[0, 0]), float(best_j), best_it, trace)
