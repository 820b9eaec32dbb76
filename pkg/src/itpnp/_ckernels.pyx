# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: projection and Gauss-Newton accumulation over pairs."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY, NAN

cnp.import_array()

cdef double Z_MIN = 1e-3


def project(const double[:, ::1] points, disp, const double[:, ::1] R,
            const double[::1] t, const double[::1] cam):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t i
    cdef bint has_disp = disp is not None
    cdef const double[:, ::1] r
    if has_disp:
        r = disp
    else:
        r = points
    uv_arr = np.empty((n, 2))
    ok_arr = np.empty(n, dtype=np.bool_)
    cdef double[:, ::1] uv = uv_arr
    cdef cnp.npy_bool[::1] ok = ok_arr
    cdef double px, py, pz, X, Y, Z, iz
    with nogil:
        for i in range(n):
            px = points[i, 0]
            py = points[i, 1]
            pz = points[i, 2]
            if has_disp:
                px = px + r[i, 0]
                py = py + r[i, 1]
                pz = pz + r[i, 2]
            X = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + t[0]
            Y = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + t[1]
            Z = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + t[2]
            if Z >= Z_MIN:
                iz = 1.0 / Z
                uv[i, 0] = cam[0] * X * iz + cam[2]
                uv[i, 1] = cam[1] * Y * iz + cam[3]
                ok[i] = 1
            else:
                uv[i, 0] = NAN
                uv[i, 1] = NAN
                ok[i] = 0
    return uv_arr, ok_arr


cdef inline bint _point(const double[:, ::1] points, const double[:, ::1] r, bint has_disp,
                        const double[:, ::1] R, const double[::1] t, Py_ssize_t i,
                        double* X) noexcept nogil:
    cdef double px = points[i, 0]
    cdef double py = points[i, 1]
    cdef double pz = points[i, 2]
    if has_disp:
        px = px + r[i, 0]
        py = py + r[i, 1]
        pz = pz + r[i, 2]
    X[0] = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + t[0]
    X[1] = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + t[1]
    X[2] = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + t[2]
    return X[2] >= Z_MIN


def weighted_cost(const double[:, ::1] points, disp, const double[:, ::1] R,
                  const double[::1] t, const double[::1] cam, const cnp.int64_t[::1] indptr,
                  const cnp.int64_t[::1] tgt, const double[::1] w, const double[:, ::1] targets):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t i, p
    cdef bint has_disp = disp is not None
    cdef const double[:, ::1] r
    if has_disp:
        r = disp
    else:
        r = points
    cdef double X[3]
    cdef double iz, u, v, eu, ev
    cdef double cost = 0.0
    cdef bint bad = 0
    with nogil:
        for i in range(n):
            if indptr[i + 1] == indptr[i]:
                continue
            if not _point(points, r, has_disp, R, t, i, X):
                bad = 1
                break
            iz = 1.0 / X[2]
            u = cam[0] * X[0] * iz + cam[2]
            v = cam[1] * X[1] * iz + cam[3]
            for p in range(indptr[i], indptr[i + 1]):
                eu = u - targets[tgt[p], 0]
                ev = v - targets[tgt[p], 1]
                cost += w[p] * (eu * eu + ev * ev)
    if bad:
        return INFINITY
    return cost


def accumulate(const double[:, ::1] points, disp, const double[:, ::1] R,
               const double[::1] t, const double[::1] cam, const cnp.int64_t[::1] indptr,
               const cnp.int64_t[::1] tgt, const double[::1] w, const double[:, ::1] targets,
               bint per_point=False):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t i, p, a, b, c
    cdef bint has_disp = disp is not None
    cdef const double[:, ::1] r
    if has_disp:
        r = disp
    else:
        r = points
    H_arr = np.zeros((6, 6))
    g_arr = np.zeros(6)
    cdef double[:, ::1] H = H_arr
    cdef double[::1] g = g_arr
    cdef double[:, :, ::1] Hpp
    cdef double[:, :, ::1] Hxp
    cdef double[:, ::1] gp
    Hpp_arr = Hxp_arr = gp_arr = None
    if per_point:
        Hpp_arr = np.zeros((n, 3, 3))
        Hxp_arr = np.zeros((n, 6, 3))
        gp_arr = np.zeros((n, 3))
        Hpp = Hpp_arr
        Hxp = Hxp_arr
        gp = gp_arr
    cdef double X[3]
    cdef double JX[2][3]
    cdef double Jxi[2][6]
    cdef double Jr[2][3]
    cdef double iz, u, v, eu, ev, Wsum, Su, Sv, wp
    cdef double cost = 0.0
    cdef double fx = cam[0]
    cdef double fy = cam[1]
    cdef bint bad = 0
    with nogil:
        for i in range(n):
            if indptr[i + 1] == indptr[i]:
                continue
            if not _point(points, r, has_disp, R, t, i, X):
                bad = 1
                break
            iz = 1.0 / X[2]
            u = fx * X[0] * iz + cam[2]
            v = fy * X[1] * iz + cam[3]
            Wsum = 0.0
            Su = 0.0
            Sv = 0.0
            for p in range(indptr[i], indptr[i + 1]):
                wp = w[p]
                eu = u - targets[tgt[p], 0]
                ev = v - targets[tgt[p], 1]
                cost += wp * (eu * eu + ev * ev)
                Wsum += wp
                Su += wp * eu
                Sv += wp * ev
            JX[0][0] = fx * iz
            JX[0][1] = 0.0
            JX[0][2] = -fx * X[0] * iz * iz
            JX[1][0] = 0.0
            JX[1][1] = fy * iz
            JX[1][2] = -fy * X[1] * iz * iz
            # rotational columns: -JX @ hat(X)
            for a in range(2):
                Jxi[a][0] = JX[a][2] * X[1] - JX[a][1] * X[2]
                Jxi[a][1] = JX[a][0] * X[2] - JX[a][2] * X[0]
                Jxi[a][2] = JX[a][1] * X[0] - JX[a][0] * X[1]
                Jxi[a][3] = JX[a][0]
                Jxi[a][4] = JX[a][1]
                Jxi[a][5] = JX[a][2]
            for a in range(6):
                g[a] += Jxi[0][a] * Su + Jxi[1][a] * Sv
                for b in range(a, 6):
                    H[a, b] += Wsum * (Jxi[0][a] * Jxi[0][b] + Jxi[1][a] * Jxi[1][b])
            if per_point:
                for a in range(2):
                    for b in range(3):
                        Jr[a][b] = JX[a][0] * R[0, b] + JX[a][1] * R[1, b] + JX[a][2] * R[2, b]
                for b in range(3):
                    gp[i, b] = Jr[0][b] * Su + Jr[1][b] * Sv
                    for c in range(3):
                        Hpp[i, b, c] = Wsum * (Jr[0][b] * Jr[0][c] + Jr[1][b] * Jr[1][c])
                for a in range(6):
                    for b in range(3):
                        Hxp[i, a, b] = Wsum * (Jxi[0][a] * Jr[0][b] + Jxi[1][a] * Jr[1][b])
        if not bad:
            for a in range(6):
                for b in range(a):
                    H[a, b] = H[b, a]
    if bad:
        return None
    return cost, H_arr, g_arr, Hpp_arr, Hxp_arr, gp_arr


from libc.math cimport floor, sqrt, isfinite


cdef void _chessboard_transform(cnp.int64_t* dmap, Py_ssize_t nx, Py_ssize_t ny) noexcept nogil:
    """In-place chessboard distance to the nearest zero cell (two-pass chamfer)."""
    cdef Py_ssize_t x, y, c
    cdef cnp.int64_t v
    for y in range(ny):
        for x in range(nx):
            c = y * nx + x
            v = dmap[c]
            if x > 0 and dmap[c - 1] + 1 < v:
                v = dmap[c - 1] + 1
            if y > 0:
                if dmap[c - nx] + 1 < v:
                    v = dmap[c - nx] + 1
                if x > 0 and dmap[c - nx - 1] + 1 < v:
                    v = dmap[c - nx - 1] + 1
                if x < nx - 1 and dmap[c - nx + 1] + 1 < v:
                    v = dmap[c - nx + 1] + 1
            dmap[c] = v
    for y in range(ny - 1, -1, -1):
        for x in range(nx - 1, -1, -1):
            c = y * nx + x
            v = dmap[c]
            if x < nx - 1 and dmap[c + 1] + 1 < v:
                v = dmap[c + 1] + 1
            if y < ny - 1:
                if dmap[c + nx] + 1 < v:
                    v = dmap[c + nx] + 1
                if x < nx - 1 and dmap[c + nx + 1] + 1 < v:
                    v = dmap[c + nx + 1] + 1
                if x > 0 and dmap[c + nx - 1] + 1 < v:
                    v = dmap[c + nx - 1] + 1
            dmap[c] = v


cdef inline Py_ssize_t _iabs(Py_ssize_t a) noexcept nogil:
    return a if a >= 0 else -a


cdef class GridIndex:
    """Uniform-grid index over 2D points with exact k-nearest queries.

    Results are ordered by (distance, point index), matching an exhaustive
    scan. A chessboard distance map over the cells lets a query skip rings
    that are known to be empty.
    """

    cdef const double[:, ::1] pts
    cdef public double cell
    cdef double x0, y0
    cdef Py_ssize_t nx, ny
    cdef cnp.int64_t[::1] start
    cdef cnp.int64_t[::1] order
    cdef cnp.int64_t[::1] dmap

    def __init__(self, points, double cell=4.0, Py_ssize_t max_cells=4_000_000):
        P = np.ascontiguousarray(points, dtype=np.float64)
        if P.ndim != 2 or P.shape[1] != 2 or P.shape[0] == 0:
            raise ValueError("GridIndex needs a non-empty (N, 2) array")
        if not np.all(np.isfinite(P)):
            raise ValueError("GridIndex points must be finite")
        self.pts = P
        lo = P.min(axis=0)
        # half-scale arithmetic keeps the span finite for any finite input
        half = 0.5 * P.max(axis=0) - 0.5 * lo
        while (float(half[0]) / (0.5 * cell) + 1) * (float(half[1]) / (0.5 * cell) + 1) > max_cells:
            cell *= 2.0
        self.cell = cell
        self.x0 = float(lo[0])
        self.y0 = float(lo[1])
        self.nx = int(half[0] / (0.5 * cell)) + 1
        self.ny = int(half[1] / (0.5 * cell)) + 1
        rel = (0.5 * P - 0.5 * lo) / (0.5 * cell)
        cx = np.minimum(rel[:, 0].astype(np.int64), self.nx - 1)
        cy = np.minimum(rel[:, 1].astype(np.int64), self.ny - 1)
        cid = cy * self.nx + cx
        order = np.lexsort((np.arange(P.shape[0]), cid)).astype(np.int64)
        counts = np.bincount(cid, minlength=self.nx * self.ny)
        start = np.zeros(self.nx * self.ny + 1, dtype=np.int64)
        np.cumsum(counts, out=start[1:])
        self.order = order
        self.start = start
        dmap = np.where(counts > 0, 0, self.nx + self.ny).astype(np.int64)
        self.dmap = dmap
        with nogil:
            _chessboard_transform(&self.dmap[0], self.nx, self.ny)

    def query(self, queries, Py_ssize_t k, double radius=INFINITY):
        """``(dist, idx)`` of shape (Q, k); missing entries are ``inf`` / -1."""
        Q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 2)
        cdef const double[:, ::1] q = Q
        cdef Py_ssize_t nq = q.shape[0]
        dist_arr = np.full((nq, k), np.inf)
        idx_arr = np.full((nq, k), -1, dtype=np.int64)
        if k <= 0 or nq == 0:
            return dist_arr, idx_arr
        cdef double[:, ::1] dist = dist_arr
        cdef cnp.int64_t[:, ::1] idx = idx_arr
        cdef Py_ssize_t i
        with nogil:
            for i in range(nq):
                self._query_one(q[i, 0], q[i, 1], k, radius, &dist[i, 0], &idx[i, 0])
        return dist_arr, idx_arr

    def pairs(self, queries, valid, Py_ssize_t k, double radius=INFINITY):
        """Flattened neighbour lists: ``(src, tgt, dist, indptr)`` in CSR order.

        Rows with ``valid`` false get no neighbours.
        """
        Q = np.ascontiguousarray(queries, dtype=np.float64).reshape(-1, 2)
        V = np.ascontiguousarray(valid, dtype=np.bool_)
        cdef const double[:, ::1] q = Q
        cdef const cnp.npy_bool[::1] ok = V
        cdef Py_ssize_t nq = q.shape[0]
        if V.shape[0] != nq:
            raise ValueError("valid mask length differs from the number of queries")
        indptr_arr = np.zeros(nq + 1, dtype=np.int64)
        src_arr = np.empty(nq * k, dtype=np.int64)
        tgt_arr = np.empty(nq * k, dtype=np.int64)
        dist_arr = np.empty(nq * k)
        cdef cnp.int64_t[::1] indptr = indptr_arr
        cdef cnp.int64_t[::1] src = src_arr
        cdef cnp.int64_t[::1] tgt = tgt_arr
        cdef double[::1] dist = dist_arr
        cdef Py_ssize_t i, m, n = 0
        if k > 0 and nq > 0:
            with nogil:
                for i in range(nq):
                    if ok[i]:
                        for m in range(k):
                            dist[n + m] = INFINITY
                            tgt[n + m] = -1
                        self._query_one(q[i, 0], q[i, 1], k, radius, &dist[n], &tgt[n])
                        m = 0
                        while m < k and tgt[n + m] >= 0:
                            src[n + m] = i
                            m += 1
                        n += m
                    indptr[i + 1] = n
        return src_arr[:n].copy(), tgt_arr[:n].copy(), dist_arr[:n].copy(), indptr_arr

    cdef void _query_one(self, double qx, double qy, Py_ssize_t k, double radius,
                         double* bd, cnp.int64_t* bi) noexcept nogil:
        if not (isfinite(qx) and isfinite(qy)):
            return
        cdef const double* pts = &self.pts[0, 0]
        cdef const cnp.int64_t* start = &self.start[0]
        cdef const cnp.int64_t* order = &self.order[0]
        cdef double h = self.cell
        cdef Py_ssize_t nx = self.nx
        cdef Py_ssize_t ny = self.ny
        cdef double fx = floor((qx - self.x0) / h)
        cdef double fy = floor((qy - self.y0) / h)
        # keep far-away queries in integer range; results are unchanged
        fx = max(-1e9, min(1e9, fx))
        fy = max(-1e9, min(1e9, fy))
        cdef Py_ssize_t gx = <Py_ssize_t>fx
        cdef Py_ssize_t gy = <Py_ssize_t>fy
        cdef Py_ssize_t count = 0
        cdef Py_ssize_t rmax = max(max(_iabs(gx), _iabs(nx - 1 - gx)), max(_iabs(gy), _iabs(ny - 1 - gy)))
        # rings closer than the grid, or than the nearest occupied cell, are empty
        cdef Py_ssize_t clx = min(max(gx, 0), nx - 1)
        cdef Py_ssize_t cly = min(max(gy, 0), ny - 1)
        cdef Py_ssize_t outside = max(_iabs(gx - clx), _iabs(gy - cly))
        cdef Py_ssize_t r = max(outside, self.dmap[cly * nx + clx] - outside)
        cdef double lower
        cdef Py_ssize_t cy, cx, step, p, j, m, c
        cdef double dx, dy, d
        while r <= rmax:
            lower = (r - 1) * h if r > 0 else 0.0
            if lower > radius:
                break
            if count == k and lower > bd[k - 1]:
                break
            for cy in range(max(gy - r, 0), min(gy + r, ny - 1) + 1):
                step = 1 if (cy == gy - r or cy == gy + r or r == 0) else 2 * r
                cx = gx - r
                while cx <= gx + r:
                    if 0 <= cx < nx:
                        c = cy * nx + cx
                        for p in range(start[c], start[c + 1]):
                            j = order[p]
                            dx = qx - pts[2 * j]
                            dy = qy - pts[2 * j + 1]
                            d = sqrt(dx * dx + dy * dy)
                            if not d <= radius:
                                continue
                            if count == k and (d > bd[k - 1] or (d == bd[k - 1] and j > bi[k - 1])):
                                continue
                            # insertion into the sorted top-k list
                            if count < k:
                                m = count
                                count += 1
                            else:
                                m = k - 1
                            while m > 0 and (bd[m - 1] > d or (bd[m - 1] == d and bi[m - 1] > j)):
                                bd[m] = bd[m - 1]
                                bi[m] = bi[m - 1]
                                m -= 1
                            bd[m] = d
                            bi[m] = j
                    cx += step
            r += 1


cdef Py_ssize_t _ereach(const cnp.int64_t* Ap, const cnp.int64_t* Ai, Py_ssize_t k, Py_ssize_t n,
                        const cnp.int64_t* parent, cnp.int64_t* s, cnp.int64_t* mark) noexcept nogil:
    """Pattern of row ``k`` of L (excluding the diagonal), written to ``s[top:n]``.

    ``mark[i] == k`` flags nodes already visited for this row.
    """
    cdef Py_ssize_t length, p, i
    cdef Py_ssize_t top = n
    mark[k] = k
    for p in range(Ap[k], Ap[k + 1]):
        i = Ai[p]
        if i > k:
            continue
        length = 0
        while mark[i] != k:
            s[length] = i
            length += 1
            mark[i] = k
            i = parent[i]
        while length > 0:
            top -= 1
            length -= 1
            s[top] = s[length]
    return top


cdef class SparseCholesky:
    """Up-looking sparse Cholesky ``A = L L^T`` with a fixed sparsity pattern.

    The symbolic analysis runs once; :meth:`factor` refactors new values in
    the same pattern. ``indptr``/``indices`` describe the CSC pattern of the
    (already permuted) symmetric matrix; only entries with row <= column are
    read.
    """

    cdef readonly Py_ssize_t n
    cdef cnp.int64_t[::1] Ap, Ai, parent, Lp, Li, work, mark, cnt
    cdef double[::1] Lx, x
    cdef bint factored

    def __init__(self, indptr, indices, Py_ssize_t n):
        self.n = n
        self.Ap = np.ascontiguousarray(indptr, dtype=np.int64)
        self.Ai = np.ascontiguousarray(indices, dtype=np.int64)
        if self.Ap.shape[0] != n + 1:
            raise ValueError("indptr length must be n + 1")
        self.parent = np.full(n, -1, dtype=np.int64)
        ancestor = np.full(n, -1, dtype=np.int64)
        cdef cnp.int64_t[::1] anc = ancestor
        cdef Py_ssize_t k, p, i, inext, top
        with nogil:
            for k in range(n):
                for p in range(self.Ap[k], self.Ap[k + 1]):
                    i = self.Ai[p]
                    while i != -1 and i < k:
                        inext = anc[i]
                        anc[i] = k
                        if inext == -1:
                            self.parent[i] = k
                        i = inext
        self.work = np.empty(max(n, 1), dtype=np.int64)
        self.mark = np.full(max(n, 1), -1, dtype=np.int64)
        counts = np.ones(n, dtype=np.int64)
        cdef cnp.int64_t[::1] c = counts
        with nogil:
            for k in range(n):
                top = _ereach(&self.Ap[0], &self.Ai[0], k, n, &self.parent[0], &self.work[0], &self.mark[0])
                for p in range(top, n):
                    c[self.work[p]] += 1
        Lp = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=Lp[1:])
        self.Lp = Lp
        self.Li = np.empty(Lp[n], dtype=np.int64)
        self.Lx = np.empty(Lp[n])
        self.x = np.zeros(max(n, 1))
        self.cnt = np.empty(max(n, 1), dtype=np.int64)
        self.factored = False

    @property
    def nnz(self) -> int:
        return int(self.Lp[self.n])

    def factor(self, data) -> bool:
        """Numeric factorization; False if the matrix is not positive definite."""
        cdef const double[::1] Ax = np.ascontiguousarray(data, dtype=np.float64)
        if Ax.shape[0] != self.Ai.shape[0]:
            raise ValueError("data length does not match the pattern")
        cdef Py_ssize_t n = self.n
        cdef Py_ssize_t k, p, i, top, q
        cdef double d, lki
        cdef bint ok = 1
        with nogil:
            for k in range(n):
                self.cnt[k] = self.Lp[k]
                self.mark[k] = -1
            for k in range(n):
                top = _ereach(&self.Ap[0], &self.Ai[0], k, n, &self.parent[0], &self.work[0], &self.mark[0])
                self.x[k] = 0.0
                for p in range(self.Ap[k], self.Ap[k + 1]):
                    if self.Ai[p] <= k:
                        self.x[self.Ai[p]] += Ax[p]
                d = self.x[k]
                self.x[k] = 0.0
                for q in range(top, n):
                    i = self.work[q]
                    lki = self.x[i] / self.Lx[self.Lp[i]]
                    self.x[i] = 0.0
                    for p in range(self.Lp[i] + 1, self.cnt[i]):
                        self.x[self.Li[p]] -= self.Lx[p] * lki
                    d -= lki * lki
                    p = self.cnt[i]
                    self.cnt[i] += 1
                    self.Li[p] = k
                    self.Lx[p] = lki
                if not d > 0.0:
                    ok = 0
                    break
                p = self.cnt[k]
                self.cnt[k] += 1
                self.Li[p] = k
                self.Lx[p] = sqrt(d)
        self.factored = ok
        return bool(ok)

    def solve(self, b):
        """Solve ``A x = b`` with the current factor; ``b`` may be (n,) or (n, m)."""
        if not self.factored:
            raise RuntimeError("no valid factorization")
        B = np.array(b, dtype=np.float64, order="F", copy=True)
        vec = B.ndim == 1
        if vec:
            B = B.reshape(-1, 1, order="F")
        if B.shape[0] != self.n:
            raise ValueError("right-hand side has the wrong length")
        cdef double[::1, :] X = B
        cdef Py_ssize_t n = self.n
        cdef Py_ssize_t col, j, p
        cdef double v
        with nogil:
            for col in range(X.shape[1]):
                for j in range(n):
                    X[j, col] /= self.Lx[self.Lp[j]]
                    v = X[j, col]
                    for p in range(self.Lp[j] + 1, self.Lp[j + 1]):
                        X[self.Li[p], col] -= self.Lx[p] * v
                for j in range(n - 1, -1, -1):
                    v = X[j, col]
                    for p in range(self.Lp[j] + 1, self.Lp[j + 1]):
                        v -= self.Lx[p] * X[self.Li[p], col]
                    X[j, col] = v / self.Lx[self.Lp[j]]
        return B.ravel() if vec else B
