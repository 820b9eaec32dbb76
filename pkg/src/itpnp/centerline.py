"""Centerline data model, JSON I/O and nearest-neighbour correspondence search."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels_py, kernels
from .errors import EmptyCenterline, ParseError
from .geometry import RigidTransform

DEFAULT_K_SPATIAL = 6


@dataclass(frozen=True, eq=False)
class Centerline3D:
    points: np.ndarray
    polylines: tuple[np.ndarray, ...] = ()
    precalib: RigidTransform = field(default_factory=RigidTransform.identity)
    k_spatial: int = DEFAULT_K_SPATIAL
    centroid: np.ndarray = field(init=False)
    neighbor_sets: tuple[np.ndarray, ...] = field(init=False)
    chain_neighbors: tuple[np.ndarray, ...] = field(init=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise EmptyCenterline("3D centerline has no points")
        pts.setflags(write=False)
        lines = tuple(np.asarray(pl, dtype=np.int64) for pl in self.polylines)
        _validate_polylines(lines, pts.shape[0])
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "polylines", lines)
        centroid = pts.mean(axis=0)
        centroid.setflags(write=False)
        object.__setattr__(self, "centroid", centroid)
        object.__setattr__(self, "chain_neighbors", _chain_neighbors(lines, pts.shape[0]))
        object.__setattr__(self, "neighbor_sets", build_neighbor_sets(self, self.k_spatial))

    def __len__(self) -> int:
        return self.points.shape[0]

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected (chain, spatial) edge lists as (E, 2) arrays with i < j."""
        return _edge_array(self.chain_neighbors), _edge_array(self.neighbor_sets)


@dataclass(frozen=True, eq=False)
class Centerline2D:
    points: np.ndarray
    pixel_spacing: float = 0.30
    polylines: tuple[np.ndarray, ...] = ()
    index: object = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 2)
        if pts.shape[0] == 0:
            raise EmptyCenterline("2D centerline has no points")
        if not self.pixel_spacing > 0:
            raise ValueError(f"pixel_spacing must be positive, got {self.pixel_spacing}")
        pts.setflags(write=False)
        lines = tuple(np.asarray(pl, dtype=np.int64) for pl in self.polylines)
        for n, pl in enumerate(lines):
            if pl.size and (pl.min() < 0 or pl.max() >= pts.shape[0]):
                raise ParseError("polyline index out of range", field=f"polylines[{n}]")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "polylines", lines)
        object.__setattr__(self, "pixel_spacing", float(self.pixel_spacing))
        object.__setattr__(self, "index", kernels.knn_index(pts))

    def __len__(self) -> int:
        return self.points.shape[0]

    def nearest(self, queries: np.ndarray, k: int = 1, radius: float = np.inf):
        """``(dist, idx)`` of the ``k`` nearest points ordered by (distance, index).

        Missing neighbours (fewer than ``k`` inside ``radius``) are ``inf`` / -1.
        """
        return self.index.query(np.asarray(queries, dtype=float).reshape(-1, 2), k, radius)


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Flat source/target pairs, grouped by source and ordered by distance.

    ``indptr`` is CSR-style: the pairs of source ``i`` are
    ``slice(indptr[i], indptr[i + 1])``.
    """

    src: np.ndarray
    tgt: np.ndarray
    dist: np.ndarray
    indptr: np.ndarray

    @property
    def n_sources(self) -> int:
        return self.indptr.shape[0] - 1

    @property
    def n_pairs(self) -> int:
        return self.src.shape[0]

    @property
    def matched(self) -> np.ndarray:
        return np.diff(self.indptr) > 0

    def of(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        s = slice(self.indptr[i], self.indptr[i + 1])
        return self.tgt[s], self.dist[s]


def find_correspondences(projected, target: Centerline2D, k: int = 4, radius: float = np.inf,
                         valid: np.ndarray | None = None) -> CorrespondenceSet:
    """Up to ``k`` nearest target points within ``radius`` of each projection.

    ``valid`` masks out source points that could not be projected; they get an
    empty set.
    """
    projected = np.asarray(projected, dtype=float).reshape(-1, 2)
    if projected.shape[0] == 0:
        raise ValueError("no projected points")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if valid is None:
        valid = np.all(np.isfinite(projected), axis=1)
    src, tgt, dist, indptr = target.index.pairs(projected, valid, k, radius)
    return CorrespondenceSet(src=src, tgt=tgt, dist=dist, indptr=indptr)


def apply_precalibration(cl: Centerline3D, order: str = "after", center=None) -> np.ndarray:
    """Move source points into the centred intra-operative frame.

    ``order="after"`` gives ``T_pre p - c`` with ``c`` the centroid of the
    precalibrated points; ``order="before"`` gives ``T_pre (p - c)`` with ``c``
    the raw centroid. An explicit ``center`` overrides ``c`` in either order.
    """
    T = cl.precalib
    if order == "after":
        moved = T.apply(cl.points)
        c = T.apply(cl.centroid) if center is None else np.asarray(center, dtype=float)
        return moved - c
    if order == "before":
        c = cl.centroid if center is None else np.asarray(center, dtype=float)
        return T.apply(cl.points - c)
    raise ValueError(f"unknown centering order {order!r}")


def _validate_polylines(lines: Sequence[np.ndarray], n: int) -> None:
    interior_owner: dict[int, int] = {}
    for li, pl in enumerate(lines):
        if pl.ndim != 1:
            raise ParseError("polyline must be a flat index list", field=f"polylines[{li}]")
        bad = np.flatnonzero((pl < 0) | (pl >= n))
        if bad.size:
            raise ParseError(f"index {int(pl[bad[0]])} out of range for {n} points",
                             field=f"polylines[{li}][{int(bad[0])}]")
        if np.unique(pl).size != pl.size:
            raise ParseError("polyline repeats a point", field=f"polylines[{li}]")
        for p in pl[1:-1].tolist():
            if p in interior_owner:
                raise ParseError(f"interior point {p} shared with polyline {interior_owner[p]}",
                                 field=f"polylines[{li}]")
            interior_owner[p] = li


def _chain_neighbors(lines: Iterable[np.ndarray], n: int) -> tuple[np.ndarray, ...]:
    nbrs: list[set[int]] = [set() for _ in range(n)]
    for pl in lines:
        a, b = pl[:-1].tolist(), pl[1:].tolist()
        for i, j in zip(a, b):
            nbrs[i].add(j)
            nbrs[j].add(i)
    return tuple(np.array(sorted(s), dtype=np.int64) for s in nbrs)


def _edge_array(nbrs: Sequence[np.ndarray]) -> np.ndarray:
    if not nbrs:
        return np.zeros((0, 2), dtype=np.int64)
    counts = np.array([len(s) for s in nbrs])
    i = np.repeat(np.arange(len(nbrs)), counts)
    j = np.concatenate(nbrs) if counts.sum() else np.zeros(0, dtype=np.int64)
    keep = i < j
    return np.column_stack([i[keep], j[keep]]).astype(np.int64)


def build_neighbor_sets(cl: Centerline3D, k_spatial: int = DEFAULT_K_SPATIAL) -> tuple[np.ndarray, ...]:
    """Spatial neighbour sets: the ``k_spatial`` nearest points, minus self and
    polyline predecessor/successor, symmetrised by union."""
    pts = cl.points
    n = pts.shape[0]
    chain = cl.chain_neighbors if hasattr(cl, "chain_neighbors") else _chain_neighbors(cl.polylines, n)
    sets: list[set[int]] = [set() for _ in range(n)]
    if n >= 2 and k_spatial > 0:
        _, idx = _kernels_py.knn_sorted(cKDTree(pts), pts, pts, k_spatial + 1)
        for i in range(n):
            row = [j for j in idx[i].tolist() if j >= 0 and j != i][:k_spatial]
            excl = set(chain[i].tolist())
            for j in row:
                if j not in excl:
                    sets[i].add(j)
                    sets[j].add(i)
    return tuple(np.array(sorted(s), dtype=np.int64) for s in sets)


# ---------------------------------------------------------------------------
# file format

_SCHEMA = {
    "type": "object",
    "required": ["dim", "unit", "points"],
    "additionalProperties": False,
    "properties": {
        "dim": {"enum": [2, 3]},
        "unit": {"enum": ["mm", "px"]},
        "pixel_spacing": {"type": "number", "exclusiveMinimum": 0},
        "points": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "polylines": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
        "precalib": {"type": "array", "items": {"type": "number"}, "minItems": 16, "maxItems": 16},
    },
}


def format_number(x: float) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if not np.isfinite(x):
        raise ValueError(f"cannot serialise non-finite number {x!r}")
    return format(x, ".17g")


def dumps_json(obj, indent: int = 0, _level: int = 0) -> str:
    """JSON with floats written at 17 significant digits.

    Lists of scalars stay on one line so point arrays remain compact.
    """
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps_json(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if all(not isinstance(v, (list, tuple, dict, np.ndarray)) for v in obj):
            return "[" + ", ".join(dumps_json(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps_json(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (int, float, np.integer, np.floating)):
        return format_number(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _read_document(source) -> dict:
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    elif isinstance(source, str):
        raw = source.encode("utf-8")
    else:
        raw = source.read()
        if isinstance(raw, str):
            raw = raw.encode("utf-8")
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not valid UTF-8: {exc.reason} at byte {exc.start}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from None
    _validate_schema(doc, _SCHEMA)
    return doc


def _validate_schema(doc, schema) -> None:
    import jsonschema

    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "".join(f"[{p}]" if isinstance(p, int) else (f".{p}" if i else str(p))
                       for i, p in enumerate(err.absolute_path)) or "<root>"
        raise ParseError(err.message, field=path)


def _points_array(doc: dict, dim: int) -> np.ndarray:
    pts = doc["points"]
    for n, p in enumerate(pts):
        if len(p) != dim:
            raise ParseError(f"expected {dim} coordinates, got {len(p)}", field=f"points[{n}]")
    arr = np.array(pts, dtype=float).reshape(-1, dim)
    if not np.all(np.isfinite(arr)):
        raise ParseError("non-finite coordinate", field="points")
    return arr


def load_centerline3d(source, k_spatial: int = DEFAULT_K_SPATIAL) -> Centerline3D:
    """Parse a 3D centerline document from bytes, text or a binary stream."""
    doc = _read_document(source)
    if doc["dim"] != 3:
        raise ParseError("expected a 3D centerline", field="dim")
    if doc["unit"] != "mm":
        raise ParseError("3D centerline unit must be 'mm'", field="unit")
    pts = _points_array(doc, 3)
    if pts.shape[0] == 0:
        raise EmptyCenterline("3D centerline has no points")
    lines = [np.asarray(pl, dtype=np.int64) for pl in doc.get("polylines", [])]
    pre = doc.get("precalib")
    precalib = RigidTransform.identity() if pre is None else RigidTransform.from_matrix(pre)
    return Centerline3D(pts, tuple(lines), precalib, k_spatial=k_spatial)


def load_centerline2d(source) -> Centerline2D:
    doc = _read_document(source)
    if doc["dim"] != 2:
        raise ParseError("expected a 2D centerline", field="dim")
    if doc["unit"] != "px":
        raise ParseError("2D centerline unit must be 'px'", field="unit")
    if "pixel_spacing" not in doc:
        raise ParseError("2D centerline requires pixel_spacing", field="pixel_spacing")
    pts = _points_array(doc, 2)
    if pts.shape[0] == 0:
        raise EmptyCenterline("2D centerline has no points")
    lines = [np.asarray(pl, dtype=np.int64) for pl in doc.get("polylines", [])]
    return Centerline2D(pts, doc["pixel_spacing"], tuple(lines))


def centerline_to_dict(cl: Centerline3D | Centerline2D) -> dict:
    if isinstance(cl, Centerline3D):
        return {
            "dim": 3,
            "unit": "mm",
            "points": cl.points.tolist(),
            "polylines": [pl.tolist() for pl in cl.polylines],
            "precalib": cl.precalib.as_matrix().reshape(-1).tolist(),
        }
    return {
        "dim": 2,
        "unit": "px",
        "pixel_spacing": cl.pixel_spacing,
        "points": cl.points.tolist(),
        "polylines": [pl.tolist() for pl in cl.polylines],
    }


def dumps_centerline(cl: Centerline3D | Centerline2D) -> str:
    doc = centerline_to_dict(cl)
    _validate_schema(json.loads(dumps_json(doc)), _SCHEMA)
    return dumps_json(doc, indent=1) + "\n"


def save_centerline(cl: Centerline3D | Centerline2D, dest: str | IO[str]) -> None:
    text = dumps_centerline(cl)
    if isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__"):
        with open(dest, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        dest.write(text)


def load_centerline(path) -> Centerline3D | Centerline2D:
    with open(path, "rb") as fh:
        raw = fh.read()
    doc = _read_document(raw)
    return load_centerline3d(io.BytesIO(raw)) if doc["dim"] == 3 else load_centerline2d(io.BytesIO(raw))
