"""Per-simplex stability certification of a kernel value function.

For every simplex the certifier evaluates V and the closed-loop Lyapunov
derivative at the vertices and widens them by explicit O(tau^2) error
bounds.  A simplex is certified when the lower bound of V is positive and
the upper bound of dV/dt is negative.
"""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import _accel
from .controller import ClosedLoopModel
from .geometry import MEMBERSHIP_TOL, Simplex, Triangulation, kuhn_children
from .kernels import kernel_eps

CHUNK = 4096


# --- coefficients ---------------------------------------------------------------

def closed_loop_coeffs(m: ClosedLoopModel, x, i: int):
    """(P_i(x), A_i(x)) with p(x) = sum_i P_i K_i and f_cl(x) = sum_i A_i K_i.

    ``i`` is a zero-based kernel index.
    """
    vp = m.value
    if not 0 <= i < vp.alpha.size:
        raise IndexError(f"kernel index {i} out of range")
    x = np.asarray(x, dtype=float)
    P = -vp.alpha[i] * vp.inv_lengthscale * (x - vp.centers[i])
    A = m.f.weights[i] - P @ m.gain_matrix.T
    return P, A


@dataclass(frozen=True)
class _Packed:
    centers: np.ndarray
    w: np.ndarray
    amplitude: float
    alpha: np.ndarray
    fw: np.ndarray
    M: np.ndarray
    offset: float


def _pack(m: ClosedLoopModel) -> _Packed:
    if not m.shares_kernels():
        raise ValueError("certification needs f and V on the same kernels")
    vp = m.value
    return _Packed(np.ascontiguousarray(vp.centers), np.ascontiguousarray(vp.inv_lengthscale),
                   vp.amplitude, np.ascontiguousarray(vp.alpha), np.ascontiguousarray(m.f.weights),
                   np.ascontiguousarray(m.gain_matrix), vp.offset)


# --- numpy path -------------------------------------------------------------------

def _bounds_numpy(X, pk: _Packed, tau: float):
    """(V_lower, Hdot_upper, min vertex V, max vertex Hdot) for simplices X of shape (S, N, n)."""
    S, N, n = X.shape
    eKL, eKU = kernel_eps(pk.amplitude, float(pk.w.max()), tau, N)
    d = X[:, :, None, :] - pk.centers                              # (S, N, D, n)
    Kv = pk.amplitude * np.exp(-0.5 * (d * d * pk.w).sum(-1))      # (S, N, D)
    P = -(pk.alpha[:, None] * pk.w) * d
    A = pk.fw - P @ pk.M.T
    V = Kv @ pk.alpha - pk.offset                                  # (S, N)
    p = np.einsum("skdj,skd->skj", P, Kv)
    fcl = np.einsum("skdj,skd->skj", A, Kv)

    pos_a, neg_a = np.maximum(pk.alpha, 0.0), np.maximum(-pk.alpha, 0.0)
    eps_v = eKL * pos_a.sum() + eKU * neg_a.sum()
    v_lower = V.min(1) - eps_v

    def comp_eps(C):
        pos, neg = np.maximum(C, 0.0), np.maximum(-C, 0.0)         # (S, N, D, n)
        lo = (eKL * pos + eKU * neg).sum(2).max(1)                 # (S, n)
        hi = (eKU * pos + eKL * neg).sum(2).max(1)
        lq_min = np.zeros((S, n))
        lq_max = np.zeros((S, n))
        for k, l in itertools.combinations(range(N), 2):
            q = -np.einsum("sdj,sd->sj", C[:, k] - C[:, l], Kv[:, k] - Kv[:, l])
            lq_min = np.minimum(lq_min, q)
            lq_max = np.maximum(lq_max, q)
        return lo - lq_min, hi + lq_max

    ep_l, ep_u = comp_eps(P)
    ef_l, ef_u = comp_eps(A)
    pos_f, neg_f = np.maximum(fcl, 0.0), np.maximum(-fcl, 0.0)
    pos_p, neg_p = np.maximum(p, 0.0), np.maximum(-p, 0.0)
    s1 = (ep_u[:, None, :] * pos_f + ep_l[:, None, :] * neg_f).sum(-1).max(1)
    s2 = (ef_u[:, None, :] * pos_p + ef_l[:, None, :] * neg_p).sum(-1).max(1)
    cross = (ef_u * ep_u + ef_l * ep_l).sum(-1)
    lq = np.zeros(S)
    for k, l in itertools.combinations(range(N), 2):
        lq = np.maximum(lq, -((p[:, k] - p[:, l]) * (fcl[:, k] - fcl[:, l])).sum(-1))
    H = (p * fcl).sum(-1)
    h_upper = H.max(1) + s1 + s2 + cross + lq
    return v_lower, h_upper, V.min(1), H.max(1)


# --- numba path -------------------------------------------------------------------

@_accel.njit(parallel=True)
def _bounds_numba(X, centers, w, amp, alpha, fw, M, offset, eKL, eKU, v_lower, h_upper, v_min, h_max):
    S, N, n = X.shape
    D = centers.shape[0]
    eps_v = 0.0
    for i in range(D):
        if alpha[i] > 0.0:
            eps_v += eKL * alpha[i]
        else:
            eps_v -= eKU * alpha[i]
    for s in _accel.prange(S):
        Kv = np.empty((N, D))
        P = np.empty((N, D, n))
        A = np.empty((N, D, n))
        p = np.zeros((N, n))
        f = np.zeros((N, n))
        vmin = np.inf
        for k in range(N):
            v = 0.0
            for i in range(D):
                q = 0.0
                for j in range(n):
                    dj = X[s, k, j] - centers[i, j]
                    q += dj * dj * w[j]
                    P[k, i, j] = -alpha[i] * w[j] * dj
                kv = amp * np.exp(-0.5 * q)
                Kv[k, i] = kv
                v += kv * alpha[i]
                for j in range(n):
                    acc = fw[i, j]
                    for l in range(n):
                        acc -= M[j, l] * P[k, i, l]
                    A[k, i, j] = acc
                    p[k, j] += P[k, i, j] * kv
                    f[k, j] += acc * kv
            v -= offset
            if v < vmin:
                vmin = v
        v_lower[s] = vmin - eps_v
        v_min[s] = vmin

        ep_l = np.zeros(n)
        ep_u = np.zeros(n)
        ef_l = np.zeros(n)
        ef_u = np.zeros(n)
        for which in range(2):
            C = P if which == 0 else A
            lo_out = ep_l if which == 0 else ef_l
            hi_out = ep_u if which == 0 else ef_u
            for j in range(n):
                lo = -np.inf
                hi = -np.inf
                for k in range(N):
                    sl = 0.0
                    su = 0.0
                    for i in range(D):
                        c = C[k, i, j]
                        if c > 0.0:
                            sl += eKL * c
                            su += eKU * c
                        else:
                            sl -= eKU * c
                            su -= eKL * c
                    if sl > lo:
                        lo = sl
                    if su > hi:
                        hi = su
                qmin = 0.0
                qmax = 0.0
                for k in range(N):
                    for l in range(k + 1, N):
                        q = 0.0
                        for i in range(D):
                            q -= (C[k, i, j] - C[l, i, j]) * (Kv[k, i] - Kv[l, i])
                        if q < qmin:
                            qmin = q
                        if q > qmax:
                            qmax = q
                lo_out[j] = lo - qmin
                hi_out[j] = hi + qmax

        s1 = -np.inf
        s2 = -np.inf
        hmax = -np.inf
        for k in range(N):
            a = 0.0
            b = 0.0
            h = 0.0
            for j in range(n):
                fj = f[k, j]
                pj = p[k, j]
                if fj > 0.0:
                    a += ep_u[j] * fj
                else:
                    a -= ep_l[j] * fj
                if pj > 0.0:
                    b += ef_u[j] * pj
                else:
                    b -= ef_l[j] * pj
                h += pj * fj
            if a > s1:
                s1 = a
            if b > s2:
                s2 = b
            if h > hmax:
                hmax = h
        cross = 0.0
        for j in range(n):
            cross += ef_u[j] * ep_u[j] + ef_l[j] * ep_l[j]
        lq = 0.0
        for k in range(N):
            for l in range(k + 1, N):
                q = 0.0
                for j in range(n):
                    q -= (p[k, j] - p[l, j]) * (f[k, j] - f[l, j])
                if q > lq:
                    lq = q
        h_upper[s] = hmax + s1 + s2 + cross + lq
        h_max[s] = hmax


def simplex_bounds(m: ClosedLoopModel, vertices, tau: float, use_numba: bool | None = None,
                   vertex_extremes: bool = False):
    """(V_lower, Hdot_upper) arrays for simplices given as an (S, n+1, n) vertex array.

    With ``vertex_extremes`` the minimum vertex value of V and the maximum
    vertex value of Hdot are returned as well.
    """
    X = np.ascontiguousarray(np.asarray(vertices, dtype=float))
    if X.ndim == 2:
        X = X[None]
    pk = _pack(m)
    use = _accel.USE_NUMBA if use_numba is None else (use_numba and _accel.HAVE_NUMBA)
    if use:
        S, N, _ = X.shape
        eKL, eKU = kernel_eps(pk.amplitude, float(pk.w.max()), tau, N)
        out = tuple(np.empty(S) for _ in range(4))
        _bounds_numba(X, pk.centers, pk.w, pk.amplitude, pk.alpha, pk.fw, pk.M, pk.offset,
                      eKL, eKU, *out)
    else:
        parts = [_bounds_numpy(X[a:a + CHUNK], pk, tau) for a in range(0, X.shape[0], CHUNK)]
        out = tuple(np.concatenate([pt[i] for pt in parts]) for i in range(4))
    return out if vertex_extremes else out[:2]


def value_lower_bound(m: ClosedLoopModel, s: Simplex) -> float:
    return float(simplex_bounds(m, s.vertices, s.tau, use_numba=False)[0][0])


def vdot_upper_bound(m: ClosedLoopModel, s: Simplex) -> float:
    return float(simplex_bounds(m, s.vertices, s.tau, use_numba=False)[1][0])


# --- certificate -------------------------------------------------------------------

@dataclass(frozen=True)
class SimplexVerdict:
    simplex_id: int
    V_lower: float
    Hdot_upper: float
    certified: bool
    contains_origin: bool


def model_digest(m: ClosedLoopModel) -> str:
    blob = json.dumps({
        "value": m.value.to_json(),
        "f_weights": m.f.weights.tolist(),
        "theta": m.f.hp.theta.tolist(),
        "g": m.g.tolist(),
        "R": m.cost.R.tolist(),
    }, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _origin_mask(verts: np.ndarray) -> np.ndarray:
    """Simplices whose closure contains the origin (to within the membership tolerance)."""
    S, N, n = verts.shape
    mask = np.zeros(S, dtype=bool)
    cand = np.nonzero((verts.min(1) <= MEMBERSHIP_TOL).all(1) & (verts.max(1) >= -MEMBERSHIP_TOL).all(1))[0]
    if cand.size:
        v = verts[cand]
        lhs = np.concatenate([np.transpose(v, (0, 2, 1)), np.ones((cand.size, 1, N))], axis=1)
        rhs = np.zeros((cand.size, N))
        rhs[:, -1] = 1.0
        bary = np.linalg.solve(lhs, rhs[..., None])[..., 0]
        mask[cand[bary.min(1) >= -MEMBERSHIP_TOL]] = True
    return mask


@dataclass
class StabilityCertificate:
    triangulation: Triangulation
    V_lower: np.ndarray
    Hdot_upper: np.ndarray
    contains_origin: np.ndarray
    certified: np.ndarray
    controller_hash: str
    margin: float = 0.0
    refine_depth: int = 0
    pieces_evaluated: int = 0
    _bucket: np.ndarray | None = field(default=None, repr=False, compare=False)
    _region: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def total(self) -> int:
        return int(self.V_lower.size)

    @property
    def certified_count(self) -> int:
        return int(self.certified.sum())

    @property
    def certified_fraction(self) -> float:
        return self.certified_count / self.total if self.total else 0.0

    def verdict(self, idx: int) -> SimplexVerdict:
        return SimplexVerdict(int(idx), float(self.V_lower[idx]), float(self.Hdot_upper[idx]),
                              bool(self.certified[idx]), bool(self.contains_origin[idx]))

    @property
    def verdicts(self):
        return [self.verdict(i) for i in range(self.total)]

    def _grown(self, allowed: np.ndarray, seeds: np.ndarray) -> np.ndarray:
        """Simplices of ``allowed`` connected to ``seeds`` through shared vertices."""
        idx = np.nonzero(allowed | seeds)[0]
        out = np.zeros(self.total, dtype=bool)
        if idx.size == 0 or not seeds.any():
            return out
        t = self.triangulation
        nodes = t.simplex_node_indices()[idx]
        flat = np.ravel_multi_index(tuple(np.moveaxis(nodes, -1, 0)), t.node_shape())
        n_nodes = int(np.prod(t.node_shape()))
        rows = np.repeat(np.arange(idx.size), flat.shape[1])
        g = coo_matrix((np.ones(rows.size), (rows, flat.ravel() + idx.size)),
                       shape=(idx.size + n_nodes, idx.size + n_nodes))
        _, labels = connected_components(g, directed=False)
        keep = np.isin(labels[:idx.size], np.unique(labels[:idx.size][seeds[idx]]))
        out[idx[keep]] = True
        return out

    def _on_edge(self) -> np.ndarray:
        t = self.triangulation
        nodes = t.simplex_node_indices()
        return ((nodes == 0) | (nodes == np.array(t.cells))).any(axis=(1, 2))

    def origin_bucket(self) -> np.ndarray:
        """Inconclusive neighbourhood of the origin: the uncertified simplices
        connected to those containing the origin."""
        if self._bucket is None:
            self._bucket = self._grown(~self.certified, self.contains_origin)
        return self._bucket

    def region_level(self) -> float:
        """Largest c such that every simplex outside the origin bucket that may
        meet {V < c} is certified and off the box boundary."""
        bucket = self.origin_bucket()
        edge = self._on_edge()
        if not bucket.any() or (bucket & edge).any():
            return -math.inf
        blocking = (~self.certified & ~bucket) | edge
        return float(self.V_lower[blocking].min()) if blocking.any() else math.inf

    def region_mask(self) -> np.ndarray:
        """Certified simplices of the approximate certified sublevel set.

        Grown from the origin bucket through certified simplices whose
        V_lower lies below ``region_level``; the bucket itself is excluded.
        """
        if self._region is None:
            bucket = self.origin_bucket()
            allowed = self.certified & (self.V_lower < self.region_level())
            self._region = self._grown(allowed, bucket) & ~bucket
        return self._region

    def counts(self) -> dict:
        return {
            "total": self.total,
            "certified": self.certified_count,
            "contains_origin": int(self.contains_origin.sum()),
            "origin_bucket": int(self.origin_bucket().sum()),
            "region": int(self.region_mask().sum()),
        }

    def summary(self) -> dict:
        lvl = self.region_level()
        return {
            "certified_fraction": self.certified_fraction,
            "counts": self.counts(),
            "region_level": lvl if math.isfinite(lvl) else None,
            "region_fraction": float(self.region_mask().mean()) if self.total else 0.0,
            "margin": self.margin,
            "refine_depth": self.refine_depth,
            "pieces_evaluated": self.pieces_evaluated,
            "controller_hash": self.controller_hash,
            "triangulation": self.triangulation.to_json(),
        }

    def to_csv(self) -> str:
        cents = self.triangulation.centroids()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = cents.shape[1]
        w.writerow([f"c_{j + 1}" for j in range(n)]
                   + ["V_lower", "Hdot_upper", "certified", "contains_origin", "origin_bucket", "region"])
        cols = zip(cents, self.V_lower, self.Hdot_upper, self.certified, self.contains_origin,
                   self.origin_bucket(), self.region_mask())
        for c, v, h, ok, o, b, r in cols:
            w.writerow([repr(float(x)) for x in c] + [repr(float(v)), repr(float(h)), int(ok), int(o), int(b), int(r)])
        return buf.getvalue()


def certify(m: ClosedLoopModel, t: Triangulation, margin: float = 0.0, refine_depth: int = 0,
            use_numba: bool | None = None) -> StabilityCertificate:
    """Certify every simplex of ``t``.

    A simplex that fails at its own resolution is split into its nested Kuhn
    children, up to ``refine_depth`` halvings, and is certified when every
    piece of the resulting partition is.  Refinement of a simplex stops as
    soon as one of its pieces has a vertex violating the conditions or
    contains the origin, since no further split can succeed.  The reported
    bounds are the min / max over the final partition, so they remain valid
    for the whole simplex.
    """
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    if refine_depth < 0:
        raise ValueError("refine_depth must be nonnegative")
    S, n = t.simplex_count, t.dim
    offs, kids = kuhn_children(n)
    v_lower = np.full(S, np.inf)
    h_upper = np.full(S, -np.inf)
    dead = np.zeros(S, dtype=bool)
    origin = np.zeros(S, dtype=bool)
    pieces = 0

    root = np.arange(S, dtype=np.int64)
    cell, perm = t.split_index(root)
    for level in range(refine_depth + 1):
        if root.size == 0:
            break
        tl = t.refine(level)
        vl = np.empty(root.size)
        hu = np.empty(root.size)
        vmin = np.empty(root.size)
        hmax = np.empty(root.size)
        org = np.empty(root.size, dtype=bool)
        for a in range(0, root.size, 65536):
            verts = tl.vertices_of(cell[a:a + 65536], perm[a:a + 65536])
            vl[a:a + 65536], hu[a:a + 65536], vmin[a:a + 65536], hmax[a:a + 65536] = simplex_bounds(
                m, verts, tl.tau, use_numba, vertex_extremes=True)
            org[a:a + 65536] = _origin_mask(verts)
        pieces += root.size
        if level == 0:
            origin[root[org]] = True
        ok = (vl > margin) & (hu < -margin)
        hopeless = (vmin <= margin) | (hmax >= -margin) | org
        if level == refine_depth:
            hopeless |= ~ok
        newly_dead = np.zeros(S, dtype=bool)
        newly_dead[root[hopeless]] = True
        dead |= newly_dead
        leaf = ok | newly_dead[root]
        np.minimum.at(v_lower, root[leaf], vl[leaf])
        np.maximum.at(h_upper, root[leaf], hu[leaf])
        go = ~leaf
        root, cell, perm = root[go], cell[go], perm[go]
        k = offs.shape[1]
        cell = (2 * cell[:, None, :] + offs[perm]).reshape(-1, n)
        perm = kids[perm].reshape(-1)
        root = np.repeat(root, k)
    cert = ~dead & ~origin
    return StabilityCertificate(t, v_lower, h_upper, origin, cert, model_digest(m), float(margin),
                                int(refine_depth), int(pieces))
