"""Simplices, barycentric coordinates and box triangulations."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

MEMBERSHIP_TOL = 1e-9
DEGENERACY_TOL = 1e-10


class DegenerateSimplex(ValueError):
    pass


class InvalidBox(ValueError):
    pass


@dataclass(frozen=True)
class Simplex:
    """n+1 affinely independent vertices in R^n; ``tau`` is half the diameter."""

    vertices: np.ndarray
    tau: float

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def volume(self) -> float:
        edges = self.vertices[1:] - self.vertices[0]
        return abs(np.linalg.det(edges)) / math.factorial(self.dim)

    def point(self, weights) -> np.ndarray:
        """Reconstruct the state sum_k s_k x_k."""
        return np.asarray(weights, dtype=float) @ self.vertices

    def dilate(self, factor: float) -> "Simplex":
        """Scale about the centroid; tau scales by the same factor."""
        c = self.centroid()
        return make_simplex(c + factor * (self.vertices - c))


@dataclass(frozen=True)
class BarycentricPoint:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("barycentric weights must be nonnegative and sum to 1")
        object.__setattr__(self, "weights", w)


def half_diameter(vertices: np.ndarray) -> float:
    v = np.asarray(vertices, dtype=float)
    diff = v[:, None, :] - v[None, :, :]
    return float(np.sqrt((diff ** 2).sum(-1)).max() / 2.0)


def make_simplex(vertices) -> Simplex:
    v = np.array(vertices, dtype=float)
    if v.ndim != 2 or v.shape[0] != v.shape[1] + 1:
        raise DegenerateSimplex(f"need n+1 points in R^n, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DegenerateSimplex("non-finite vertex")
    edges = v[1:] - v[0]
    sv = np.linalg.svd(edges, compute_uv=False)
    if sv[0] == 0.0 or sv[-1] < DEGENERACY_TOL * sv[0]:
        raise DegenerateSimplex("vertices are not affinely independent")
    v.setflags(write=False)
    return Simplex(v, half_diameter(v))


def barycentric_of(simplex: Simplex, x, tol: float = MEMBERSHIP_TOL):
    """Barycentric weights of ``x``, or ``None`` when x lies outside the simplex.

    Points whose most negative weight is above ``-tol`` count as inside; their
    weights are clipped to zero and renormalised.
    """
    x = np.asarray(x, dtype=float)
    v = simplex.vertices
    lhs = np.vstack([v.T, np.ones(v.shape[0])])
    rhs = np.append(x, 1.0)
    s = np.linalg.solve(lhs, rhs)
    if s.min() < -tol:
        return None
    s = np.clip(s, 0.0, None)
    return BarycentricPoint(s / s.sum())


def interpolate(simplex: Simplex, vertex_values, b: BarycentricPoint) -> float:
    vals = np.asarray(vertex_values, dtype=float)
    if vals.shape != (simplex.n_vertices,):
        raise ValueError("one value per vertex required")
    return float(b.weights @ vals)


@dataclass(frozen=True)
class Triangulation:
    """Uniform Kuhn triangulation of an axis-aligned box.

    Each grid cell is split into n! simplices, one per axis permutation.  The
    walk from the cell corner goes up in every axis except the last, which is
    walked downward; for n=2 this puts every hypotenuse on the anti-diagonal.
    Simplices are indexed as ``cell_index * n! + perm_index`` with cells in
    C order, so any simplex can be regenerated from its index alone.
    """

    lower: np.ndarray
    upper: np.ndarray
    step: np.ndarray
    cells: tuple
    perms: tuple = field(repr=False)

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def box(self):
        return [(float(a), float(b)) for a, b in zip(self.lower, self.upper)]

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cells))

    @property
    def simplex_count(self) -> int:
        return self.n_cells * len(self.perms)

    def __len__(self):
        return self.simplex_count

    @property
    def tau(self) -> float:
        # every Kuhn simplex spans its cell's main diagonal
        return float(np.linalg.norm(self.step) / 2.0)

    def box_volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def node_shape(self):
        return tuple(c + 1 for c in self.cells)

    def node_coords(self, idx: np.ndarray) -> np.ndarray:
        return self.lower + np.asarray(idx) * self.step

    def simplex_node_indices(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Multi-indices of simplex vertices on the node grid, shape (S, n+1, n)."""
        stop = self.simplex_count if stop is None else min(stop, self.simplex_count)
        ids = np.arange(start, stop)
        n = self.dim
        nperm = len(self.perms)
        cell = ids // nperm
        perm = ids % nperm
        corner = np.stack(np.unravel_index(cell, self.cells), axis=-1)
        corner[:, n - 1] += 1
        walks = _perm_walks(self.perms, n)
        return corner[:, None, :] + walks[perm]

    def vertex_array(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        return self.node_coords(self.simplex_node_indices(start, stop))

    def split_index(self, ids) -> tuple[np.ndarray, np.ndarray]:
        """(cell multi-indices (S, n), permutation indices (S,)) of simplex ids."""
        ids = np.asarray(ids, dtype=np.int64)
        nperm = len(self.perms)
        cell = np.stack(np.unravel_index(ids // nperm, self.cells), axis=-1)
        return cell, ids % nperm

    def vertices_of(self, cell: np.ndarray, perm: np.ndarray) -> np.ndarray:
        """Vertex coordinates of the simplices (cell, perm), shape (S, n+1, n)."""
        corner = np.array(cell, dtype=np.int64, copy=True)
        corner[:, self.dim - 1] += 1
        return self.node_coords(corner[:, None, :] + _perm_walks(self.perms, self.dim)[perm])

    def refine(self, levels: int = 1) -> "Triangulation":
        """The same box with every cell halved ``levels`` times; simplices nest."""
        if levels == 0:
            return self
        cells = np.array(self.cells, dtype=np.int64) << levels
        step = (self.upper - self.lower) / cells
        step.setflags(write=False)
        return Triangulation(self.lower, self.upper, step, tuple(int(c) for c in cells), self.perms)

    def chunks(self, size: int = 65536):
        for a in range(0, self.simplex_count, size):
            yield a, self.vertex_array(a, a + size)

    def simplex(self, index: int) -> Simplex:
        return make_simplex(self.vertex_array(index, index + 1)[0])

    @property
    def simplices(self):
        return [make_simplex(v) for v in self.vertex_array()]

    def centroids(self) -> np.ndarray:
        return self.vertex_array().mean(axis=1)

    def locate(self, x) -> int:
        """Index of a simplex containing ``x`` (points on shared faces pick one)."""
        x = np.asarray(x, dtype=float)
        rel = (x - self.lower) / self.step
        cell = np.clip(np.floor(rel).astype(int), 0, np.array(self.cells) - 1)
        frac = rel - cell
        n = self.dim
        # in walk coordinates the last axis runs downward
        y = frac.copy()
        y[n - 1] = 1.0 - y[n - 1]
        order = tuple(int(i) for i in np.argsort(-y, kind="stable"))
        perm_index = self.perms.index(order)
        cell_index = int(np.ravel_multi_index(tuple(cell), self.cells))
        return cell_index * len(self.perms) + perm_index

    def to_json(self) -> dict:
        return {
            "box": self.box,
            "step": [float(s) for s in self.step],
            "simplex_count": self.simplex_count,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Triangulation":
        t = triangulate_box(d["box"], d["step"])
        if "simplex_count" in d and d["simplex_count"] != t.simplex_count:
            raise ValueError("simplex_count does not match box/step")
        return t


def kuhn_children(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Template of the 2^n children of every Kuhn simplex under one halving.

    Returns ``(offsets, perms)`` of shape (n!, 2^n, n) and (n!, 2^n): child k of
    a simplex (cell, p) is (2 * cell + offsets[p, k], perms[p, k]).
    """
    if n in _CHILD_CACHE:
        return _CHILD_CACHE[n]
    perms = tuple(itertools.permutations(range(n)))
    walks = _perm_walks(perms, n)
    last = np.zeros(n, dtype=np.int64)
    last[n - 1] = 1
    subcells = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int64)
    offs = np.zeros((len(perms), 2 ** n, n), dtype=np.int64)
    kids = np.zeros((len(perms), 2 ** n), dtype=np.int64)
    for p in range(len(perms)):
        parent = 2 * (last + walks[p])                       # fine node units
        lhs = np.vstack([parent.T.astype(float), np.ones(n + 1)])
        found = 0
        for o in subcells:
            for q in range(len(perms)):
                cen = (o + last + walks[q]).mean(axis=0)
                bary = np.linalg.solve(lhs, np.append(cen, 1.0))
                if bary.min() > 1e-9:
                    offs[p, found], kids[p, found] = o, q
                    found += 1
        if found != 2 ** n:
            raise AssertionError("Kuhn refinement template is inconsistent")
    _CHILD_CACHE[n] = (offs, kids)
    return offs, kids


_CHILD_CACHE: dict = {}


def _perm_walks(perms, n):
    walks = np.zeros((len(perms), n + 1, n), dtype=np.int64)
    for p, perm in enumerate(perms):
        cur = np.zeros(n, dtype=np.int64)
        for k, axis in enumerate(perm):
            cur = cur.copy()
            cur[axis] += -1 if axis == n - 1 else 1
            walks[p, k + 1] = cur
    return walks


def triangulate_box(box, grid_step) -> Triangulation:
    """Kuhn triangulation of ``box`` (list of (lo, hi)) with the given step.

    A step that does not divide a side is shrunk to the nearest exact divisor.
    """
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    lower, upper = box[:, 0].copy(), box[:, 1].copy()
    if np.any(lower >= upper):
        raise InvalidBox("lower bound must be below upper bound in every dimension")
    n = len(lower)
    step = np.broadcast_to(np.asarray(grid_step, dtype=float), (n,)).copy()
    if np.any(step <= 0):
        raise InvalidBox("grid step must be positive")
    side = upper - lower
    ratio = side / step
    cells = np.where(np.abs(ratio - np.round(ratio)) <= 1e-9 * np.maximum(1.0, ratio),
                     np.round(ratio), np.ceil(ratio)).astype(int)
    cells = np.maximum(cells, 1)
    step = side / cells
    perms = tuple(itertools.permutations(range(n)))
    for a in (lower, upper, step):
        a.setflags(write=False)
    return Triangulation(lower, upper, step, tuple(int(c) for c in cells), perms)
