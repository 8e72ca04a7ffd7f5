"""Expression trees over constants, affine maps and Gaussian kernels, and their
second-order simplex bounds.

A tree is built from ``Constant``, ``Linear`` and ``Kernel`` leaves joined by
``Sum`` (weighted) and ``Product`` nodes.  ``expr_bounds`` propagates
interpolation-error bounds bottom-up with ``sum_product_bounds``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import Simplex
from .kernels import ZERO_BOUNDS, BoundPair, KernelSpec, kernel_eval, kernel_grad, kernel_simplex_bounds


class MismatchedFactorCount(ValueError):
    pass


class Expr:
    """Base class of expression nodes."""

    def __add__(self, other):
        return Sum((self, _as_expr(other)), (1.0, 1.0))

    def __mul__(self, other):
        return Product((self, _as_expr(other)))


def _as_expr(v):
    return v if isinstance(v, Expr) else Constant(float(v))


@dataclass(frozen=True, eq=False)
class Constant(Expr):
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError("constant must be finite")


@dataclass(frozen=True, eq=False)
class Linear(Expr):
    """a^T x + b."""

    a: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        a = np.array(self.a, dtype=float).reshape(-1)
        if not np.all(np.isfinite(a)) or not math.isfinite(self.b):
            raise ValueError("linear coefficients must be finite")
        a.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", float(self.b))


@dataclass(frozen=True, eq=False)
class Kernel(Expr):
    spec: KernelSpec


@dataclass(frozen=True, eq=False)
class Sum(Expr):
    children: tuple
    coefficients: tuple

    def __post_init__(self):
        ch = tuple(self.children)
        co = tuple(float(c) for c in self.coefficients)
        if len(ch) != len(co) or not ch:
            raise ValueError("Sum needs one coefficient per child and at least one child")
        if not all(math.isfinite(c) for c in co):
            raise ValueError("coefficients must be finite")
        if not all(isinstance(c, Expr) for c in ch):
            raise TypeError("children must be expressions")
        object.__setattr__(self, "children", ch)
        object.__setattr__(self, "coefficients", co)


@dataclass(frozen=True, eq=False)
class Product(Expr):
    children: tuple

    def __post_init__(self):
        ch = tuple(self.children)
        if not ch:
            raise ValueError("Product needs at least one child")
        if not all(isinstance(c, Expr) for c in ch):
            raise TypeError("children must be expressions")
        object.__setattr__(self, "children", ch)


# --- evaluation ---------------------------------------------------------------

def _eval(e: Expr, X: np.ndarray) -> np.ndarray:
    if isinstance(e, Constant):
        return np.full(X.shape[0], e.value)
    if isinstance(e, Linear):
        return X @ e.a + e.b
    if isinstance(e, Kernel):
        return kernel_eval(e.spec, X)
    if isinstance(e, Sum):
        out = np.zeros(X.shape[0])
        for c, ch in zip(e.coefficients, e.children):
            out = out + c * _eval(ch, X)
        return out
    if isinstance(e, Product):
        out = _eval(e.children[0], X)
        for ch in e.children[1:]:
            out = out * _eval(ch, X)
        return out
    raise TypeError(f"unknown node {type(e).__name__}")


def _grad(e: Expr, X: np.ndarray) -> np.ndarray:
    m, n = X.shape
    if isinstance(e, Constant):
        return np.zeros((m, n))
    if isinstance(e, Linear):
        return np.broadcast_to(e.a, (m, n)).copy()
    if isinstance(e, Kernel):
        return kernel_grad(e.spec, X)
    if isinstance(e, Sum):
        out = np.zeros((m, n))
        for c, ch in zip(e.coefficients, e.children):
            out += c * _grad(ch, X)
        return out
    if isinstance(e, Product):
        vals = [_eval(ch, X) for ch in e.children]
        grads = [_grad(ch, X) for ch in e.children]
        out = np.zeros((m, n))
        for j in range(len(vals)):
            w = np.ones(m)
            for i, v in enumerate(vals):
                if i != j:
                    w = w * v
            out += w[:, None] * grads[j]
        return out
    raise TypeError(f"unknown node {type(e).__name__}")


def expr_eval(e: Expr, x):
    """Value at a point (n,) -> float, or at each row of (m, n) -> (m,)."""
    X = np.asarray(x, dtype=float)
    if X.ndim == 1:
        return float(_eval(e, X[None, :])[0])
    return _eval(e, X)


def expr_grad(e: Expr, x):
    X = np.asarray(x, dtype=float)
    if X.ndim == 1:
        return _grad(e, X[None, :])[0]
    return _grad(e, X)


# --- bounds -------------------------------------------------------------------

@dataclass(frozen=True)
class SimplexBound:
    """Exact vertex values plus interpolation-error bounds on one simplex."""

    vertex_values: np.ndarray
    eps: BoundPair

    @property
    def lower(self) -> float:
        return float(self.vertex_values.min() - self.eps.lower)

    @property
    def upper(self) -> float:
        return float(self.vertex_values.max() + self.eps.upper)

    def scaled(self, c: float) -> "SimplexBound":
        if c >= 0:
            eps = BoundPair(c * self.eps.lower, c * self.eps.upper)
        else:
            eps = BoundPair(-c * self.eps.upper, -c * self.eps.lower)
        return SimplexBound(c * self.vertex_values, eps)


def leaf_bounds(leaf: Expr, s: Simplex) -> BoundPair:
    if isinstance(leaf, (Constant, Linear)):
        return ZERO_BOUNDS
    if isinstance(leaf, Kernel):
        return kernel_simplex_bounds(leaf.spec, s)
    raise TypeError(f"{type(leaf).__name__} is not a leaf")


def lipschitz_quotients(phi_values: np.ndarray, psi_values: np.ndarray, tau: float) -> np.ndarray:
    """Matrix L[k, l] = (phi_k - phi_l)/(2 tau) * (psi_l - psi_k)/(2 tau); zero diagonal."""
    dphi = (phi_values[:, None] - phi_values[None, :]) / (2.0 * tau)
    dpsi = (psi_values[None, :] - psi_values[:, None]) / (2.0 * tau)
    return dphi * dpsi


def sum_product_bounds(phis, psis, s: Simplex) -> BoundPair:
    """Bounds of chi = sum_j phi_j psi_j from the bounds of every factor.

    ``phis`` and ``psis`` are equally long sequences of SimplexBound.  The
    weighted-sum terms are maximised over vertices; the finite-difference
    cross terms use vertex pairs and are clamped through zero.
    """
    if len(phis) != len(psis):
        raise MismatchedFactorCount(f"{len(phis)} phi factors vs {len(psis)} psi factors")
    if not phis:
        return ZERO_BOUNDS
    tau = s.tau
    phi_v = np.array([f.vertex_values for f in phis], dtype=float)
    psi_v = np.array([f.vertex_values for f in psis], dtype=float)
    phi_l = np.array([f.eps.lower for f in phis])
    phi_u = np.array([f.eps.upper for f in phis])
    psi_l = np.array([f.eps.lower for f in psis])
    psi_u = np.array([f.eps.upper for f in psis])

    pos_psi, neg_psi = np.maximum(psi_v, 0.0), np.maximum(-psi_v, 0.0)
    pos_phi, neg_phi = np.maximum(phi_v, 0.0), np.maximum(-phi_v, 0.0)
    s_phi_l = (phi_l[:, None] * pos_psi + phi_u[:, None] * neg_psi).sum(0).max()
    s_phi_u = (phi_u[:, None] * pos_psi + phi_l[:, None] * neg_psi).sum(0).max()
    s_psi_l = (psi_l[:, None] * pos_phi + psi_u[:, None] * neg_phi).sum(0).max()
    s_psi_u = (psi_u[:, None] * pos_phi + psi_l[:, None] * neg_phi).sum(0).max()
    cross_l = float((psi_l * phi_u + psi_u * phi_l).sum())
    cross_u = float((psi_u * phi_u + psi_l * phi_l).sum())

    lq = sum(lipschitz_quotients(phi_v[j], psi_v[j], tau) for j in range(len(phis)))
    # diagonal entries are exactly zero, so min/max already include 0
    lq_min = min(0.0, float(lq.min()))
    lq_max = max(0.0, float(lq.max()))
    four_tau2 = 4.0 * tau * tau
    lower = s_phi_l + s_psi_l + cross_l - four_tau2 * lq_min
    upper = s_phi_u + s_psi_u + cross_u + four_tau2 * lq_max
    return BoundPair(float(lower), float(upper))


def _is_binary_product(e: Expr) -> bool:
    return isinstance(e, Product) and len(e.children) == 2


def expr_bounds(e: Expr, s: Simplex) -> SimplexBound:
    """Recursive bounds of ``e`` on ``s``.

    Products are folded left to right, one factor at a time.  A Sum whose
    children are all two-factor products is bounded in one step as
    sum_j (c_j a_j) b_j; any other Sum pairs each child with its constant
    coefficient.
    """
    V = s.vertices
    if isinstance(e, (Constant, Linear, Kernel)):
        return SimplexBound(_eval(e, V), leaf_bounds(e, s))
    if isinstance(e, Product):
        acc = expr_bounds(e.children[0], s)
        for ch in e.children[1:]:
            nxt = expr_bounds(ch, s)
            eps = sum_product_bounds([nxt], [acc], s)
            acc = SimplexBound(acc.vertex_values * nxt.vertex_values, eps)
        return acc
    if isinstance(e, Sum):
        if all(_is_binary_product(ch) for ch in e.children):
            phis, psis = [], []
            for c, ch in zip(e.coefficients, e.children):
                phis.append(expr_bounds(ch.children[0], s).scaled(c))
                psis.append(expr_bounds(ch.children[1], s))
        else:
            phis = [SimplexBound(np.full(s.n_vertices, c), ZERO_BOUNDS) for c in e.coefficients]
            psis = [expr_bounds(ch, s) for ch in e.children]
        return SimplexBound(_eval(e, V), sum_product_bounds(phis, psis, s))
    raise TypeError(f"unknown node {type(e).__name__}")


def global_bounds(e: Expr, t) -> tuple[float, float]:
    """(lower, upper) of ``e`` over a triangulation, from vertex samples only."""
    lo, hi = math.inf, -math.inf
    for s in t.simplices:
        b = expr_bounds(e, s)
        lo = min(lo, b.lower)
        hi = max(hi, b.upper)
    return lo, hi


# --- JSON ---------------------------------------------------------------------

def to_json(e: Expr) -> dict:
    if isinstance(e, Constant):
        return {"type": "constant", "value": e.value}
    if isinstance(e, Linear):
        return {"type": "linear", "a": e.a.tolist(), "b": e.b}
    if isinstance(e, Kernel):
        return {"type": "kernel", **e.spec.to_json()}
    if isinstance(e, Sum):
        return {"type": "sum", "coefficients": list(e.coefficients),
                "children": [to_json(c) for c in e.children]}
    if isinstance(e, Product):
        return {"type": "product", "children": [to_json(c) for c in e.children]}
    raise TypeError(f"unknown node {type(e).__name__}")


def from_json(d: dict) -> Expr:
    kind = d["type"]
    if kind == "constant":
        return Constant(float(d["value"]))
    if kind == "linear":
        return Linear(d["a"], d["b"])
    if kind == "kernel":
        return Kernel(KernelSpec.from_json(d))
    if kind == "sum":
        return Sum(tuple(from_json(c) for c in d["children"]), tuple(d["coefficients"]))
    if kind == "product":
        return Product(tuple(from_json(c) for c in d["children"]))
    raise ValueError(f"unknown expression type {kind!r}")


def dumps(e: Expr) -> str:
    return json.dumps(to_json(e))


def loads(text: str) -> Expr:
    return from_json(json.loads(text))
