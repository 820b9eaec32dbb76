"""Pure-numpy reference kernels.

Same signatures and results as the compiled ``_ckernels`` module; selected
automatically when the extension is unavailable.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

Z_MIN = 1e-3


def _transform(points, disp, R, t):
    X = points if disp is None else points + disp
    return X @ R.T + t


def project(points, disp, R, t, cam):
    """Project every point; returns ``(uv, ok)`` with ``ok`` the depth mask.

    Rows with ``ok == False`` hold NaN.
    """
    X = _transform(points, disp, R, t)
    z = X[:, 2]
    ok = z >= Z_MIN
    safe = np.where(ok, z, 1.0)
    uv = np.column_stack([cam[0] * X[:, 0] / safe + cam[2], cam[1] * X[:, 1] / safe + cam[3]])
    uv[~ok] = np.nan
    return uv, ok


def _pair_terms(points, disp, R, t, cam, indptr, tgt, w, targets):
    n = indptr.shape[0] - 1
    counts = np.diff(indptr)
    src = np.repeat(np.arange(n), counts)
    X = _transform(points, disp, R, t)
    z = X[:, 2]
    if src.size and not np.all(z[src] >= Z_MIN):
        return None
    used = counts > 0
    iz = np.zeros(n)
    iz[used] = 1.0 / z[used]
    uv = np.column_stack([cam[0] * X[:, 0] * iz + cam[2], cam[1] * X[:, 1] * iz + cam[3]])
    e = uv[src] - targets[tgt]
    return X, iz, src, e


def weighted_cost(points, disp, R, t, cam, indptr, tgt, w, targets):
    """Sum of ``w * |pi(T (p + r)) - q|^2`` over pairs; ``inf`` on a depth failure."""
    terms = _pair_terms(points, disp, R, t, cam, indptr, tgt, w, targets)
    if terms is None:
        return np.inf
    e = terms[3]
    return float(np.sum(w * np.einsum("ij,ij->i", e, e)))


def accumulate(points, disp, R, t, cam, indptr, tgt, w, targets, per_point=False):
    """Gauss-Newton blocks of the fixed-weight cost.

    Returns ``(cost, H, g, Hpp, Hxp, gp)`` where ``H``/``g`` are the 6x6 / 6
    pose blocks, and the per-point blocks ``Hpp`` (N,3,3), ``Hxp`` (N,6,3),
    ``gp`` (N,3) are ``None`` unless ``per_point``. Returns ``None`` on a depth
    failure.
    """
    n = indptr.shape[0] - 1
    terms = _pair_terms(points, disp, R, t, cam, indptr, tgt, w, targets)
    if terms is None:
        return None
    X, iz, src, e = terms
    cost = float(np.sum(w * np.einsum("ij,ij->i", e, e)))
    W = np.bincount(src, weights=w, minlength=n)
    S = np.column_stack([
        np.bincount(src, weights=w * e[:, 0], minlength=n),
        np.bincount(src, weights=w * e[:, 1], minlength=n),
    ])
    fx, fy = cam[0], cam[1]
    JX = np.zeros((n, 2, 3))
    JX[:, 0, 0] = fx * iz
    JX[:, 0, 2] = -fx * X[:, 0] * iz * iz
    JX[:, 1, 1] = fy * iz
    JX[:, 1, 2] = -fy * X[:, 1] * iz * iz
    # d X / d omega = -hat(X)
    Xh = np.zeros((n, 3, 3))
    Xh[:, 0, 1], Xh[:, 0, 2] = -X[:, 2], X[:, 1]
    Xh[:, 1, 0], Xh[:, 1, 2] = X[:, 2], -X[:, 0]
    Xh[:, 2, 0], Xh[:, 2, 1] = -X[:, 1], X[:, 0]
    Jxi = np.concatenate([-np.einsum("nab,nbc->nac", JX, Xh), JX], axis=2)
    H = np.einsum("n,nai,naj->ij", W, Jxi, Jxi)
    g = np.einsum("nai,na->i", Jxi, S)
    if not per_point:
        return cost, H, g, None, None, None
    Jr = JX @ R
    Hpp = np.einsum("n,nai,naj->nij", W, Jr, Jr)
    Hxp = np.einsum("n,nai,naj->nij", W, Jxi, Jr)
    gp = np.einsum("nai,na->ni", Jr, S)
    return cost, H, g, Hpp, Hxp, gp


def knn_sorted(tree: cKDTree, data: np.ndarray, queries: np.ndarray, k: int, radius: float = np.inf):
    """k nearest neighbours ordered by (distance, index), exact under ties.

    Returns ``(dist, idx)`` of shape (Q, k); missing entries have ``inf`` / -1.
    """
    n = data.shape[0]
    q = queries.shape[0]
    k_eff = min(k, n)
    dist = np.full((q, k), np.inf)
    idx = np.full((q, k), -1, dtype=np.int64)
    if q == 0 or n == 0:
        return dist, idx
    # one extra neighbour tells us whether the k-th distance is tied
    k_query = min(k_eff + 1, n)
    ub = radius * (1.0 + 1e-12) + 1e-300 if np.isfinite(radius) else np.inf
    d, j = tree.query(queries, k=k_query, distance_upper_bound=ub)
    d = np.asarray(d, dtype=float).reshape(q, k_query)
    j = np.asarray(j, dtype=np.int64).reshape(q, k_query)
    j[~np.isfinite(d)] = n
    order = np.lexsort((j, d), axis=-1)
    rows = np.arange(q)[:, None]
    d = d[rows, order]
    j = j[rows, order]
    if k_query > k_eff:
        tied = np.isfinite(d[:, k_eff]) & (d[:, k_eff] == d[:, k_eff - 1])
    else:
        tied = np.zeros(q, dtype=bool)
    # the tree may return an arbitrary member of a tie group; redo those rows exactly
    if k_query > 1:
        inner_ties = np.any((d[:, 1:] == d[:, :-1]) & np.isfinite(d[:, 1:]), axis=1)
        tied |= inner_ties
    for r in np.flatnonzero(tied):
        cand = np.asarray(tree.query_ball_point(queries[r], d[r, k_eff - 1] * (1.0 + 1e-12)), dtype=np.int64)
        cd = np.sqrt(np.sum((data[cand] - queries[r]) ** 2, axis=1))
        o = np.lexsort((cand, cd))[:k_eff]
        d[r, :k_eff] = cd[o]
        j[r, :k_eff] = cand[o]
    d = d[:, :k_eff]
    j = j[:, :k_eff]
    keep = np.isfinite(d) & (d <= radius)
    dist[:, :k_eff] = np.where(keep, d, np.inf)
    idx[:, :k_eff] = np.where(keep, j, -1)
    return dist, idx


class GridIndex:
    """k-d tree index with the same query contract as the compiled grid."""

    def __init__(self, points, cell: float = 4.0):
        self.points = np.ascontiguousarray(points, dtype=float)
        self.cell = cell
        self.tree = cKDTree(self.points)

    def query(self, queries, k, radius=np.inf):
        q = np.ascontiguousarray(queries, dtype=float).reshape(-1, 2)
        dist = np.full((q.shape[0], k), np.inf)
        idx = np.full((q.shape[0], k), -1, dtype=np.int64)
        finite = np.all(np.isfinite(q), axis=1)
        if finite.any():
            dist[finite], idx[finite] = knn_sorted(self.tree, self.points, q[finite], k, radius)
        return dist, idx

    def pairs(self, queries, valid, k, radius=np.inf):
        """Flattened neighbour lists: ``(src, tgt, dist, indptr)`` in CSR order."""
        q = np.ascontiguousarray(queries, dtype=float).reshape(-1, 2)
        valid = np.asarray(valid, dtype=bool)
        if valid.shape[0] != q.shape[0]:
            raise ValueError("valid mask length differs from the number of queries")
        n = q.shape[0]
        dist = np.full((n, k), np.inf)
        idx = np.full((n, k), -1, dtype=np.int64)
        if valid.any():
            dist[valid], idx[valid] = self.query(q[valid], k, radius)
        hit = idx >= 0
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(hit.sum(axis=1), out=indptr[1:])
        src = np.broadcast_to(np.arange(n, dtype=np.int64)[:, None], (n, k))[hit]
        return src, idx[hit], dist[hit], indptr


class SparseCholesky:
    """SuperLU-backed stand-in for the compiled sparse Cholesky.

    Diagonal pivoting is disabled, so a non-positive pivot flags a matrix
    that is not positive definite.
    """

    def __init__(self, indptr, indices, n):
        self.n = int(n)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self._lu = None

    @property
    def nnz(self) -> int:
        return 0 if self._lu is None else int(self._lu.L.nnz)

    def factor(self, data) -> bool:
        import scipy.sparse as sp
        import scipy.sparse.linalg as spla

        A = sp.csc_matrix((np.asarray(data, dtype=float), self.indices, self.indptr), shape=(self.n, self.n))
        try:
            lu = spla.splu(A, permc_spec="NATURAL", diag_pivot_thresh=0.0,
                           options=dict(SymmetricMode=True))
        except RuntimeError:
            self._lu = None
            return False
        if not np.all(lu.U.diagonal() > 0):
            self._lu = None
            return False
        self._lu = lu
        return True

    def solve(self, b):
        if self._lu is None:
            raise RuntimeError("no valid factorization")
        return self._lu.solve(np.asarray(b, dtype=float))
