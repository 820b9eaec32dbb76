"""Backend selection for the hot kernels.

The compiled extension is used when importable; set ``ITPNP_PURE_PYTHON=1``
to force the numpy fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

BACKENDS = {"python": _kernels_py}

try:
    from . import _ckernels  # type: ignore[attr-defined]
except ImportError:  # pragma: no cover - depends on the build
    _ckernels = None
else:
    BACKENDS["cython"] = _ckernels

if os.environ.get("ITPNP_PURE_PYTHON", "").strip() not in ("", "0") or _ckernels is None:
    BACKEND = "python"
else:
    BACKEND = "cython"

_impl = BACKENDS[BACKEND]


def get_backend(name: str | None = None):
    """Kernel module by name (``"cython"`` / ``"python"``), or the active one."""
    if name is None:
        return _impl
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} is not available; have {sorted(BACKENDS)}") from None


def _c(a, dtype=float):
    return np.ascontiguousarray(a, dtype=dtype)


def project(points, disp, R, t, cam, backend=None):
    impl = get_backend(backend)
    return impl.project(_c(points), None if disp is None else _c(disp), _c(R), _c(t), _c(cam))


def weighted_cost(points, disp, R, t, cam, indptr, tgt, w, targets, backend=None):
    impl = get_backend(backend)
    return impl.weighted_cost(_c(points), None if disp is None else _c(disp), _c(R), _c(t), _c(cam),
                              _c(indptr, np.int64), _c(tgt, np.int64), _c(w), _c(targets))


def accumulate(points, disp, R, t, cam, indptr, tgt, w, targets, per_point=False, backend=None):
    impl = get_backend(backend)
    return impl.accumulate(_c(points), None if disp is None else _c(disp), _c(R), _c(t), _c(cam),
                           _c(indptr, np.int64), _c(tgt, np.int64), _c(w), _c(targets), per_point)


def knn_index(points, backend=None):
    """Exact 2D k-nearest index; queries return ``(dist, idx)`` sorted by (distance, index)."""
    return get_backend(backend).GridIndex(_c(points))


def sparse_cholesky(indptr, indices, n, backend=None):
    """Fixed-pattern sparse Cholesky; ``factor(data)`` then ``solve(b)``."""
    return get_backend(backend).SparseCholesky(_c(indptr, np.int64), _c(indices, np.int64), int(n))
