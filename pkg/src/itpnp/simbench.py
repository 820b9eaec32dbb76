"""Synthetic experiments: vessel-tree generation, pose disturbances,
cropping, metrics and the benchmark driver."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .centerline import Centerline2D, Centerline3D, load_centerline3d
from .errors import DepthBelowMin, EmptyAfterCrop, GridTooLarge, RegistrationError
from .geometry import CameraModel, RigidTransform, se3_exp, so3_exp
from .metrics import GROUND_TRUTH, pose_error, projection_residual
from .objective import ExpKernel, Huber, Hyperparams, SquaredL2, State, total_objective
from .problem import Problem
from .solver import RIGID, RIGID_THEN_NONRIGID, SolverConfig, register

DEFAULT_CAMERA = CameraModel(fx=3500.0, fy=3500.0, cx=256.0, cy=256.0)
DEFAULT_DEPTH = 1050.0  # mm; with fx = 3500 px gives 0.30 mm per pixel at the vessel
DEFAULT_PIXEL_SPACING = DEFAULT_DEPTH / DEFAULT_CAMERA.fx
SOLVERS = ("rkhs", "rkhs-rigid", "l2", "huber")

TABLE3_SWEEP = ((0.5, 1.0), (1.0, 3.0), (2.0, 5.0), (3.0, 8.0), (5.0, 10.0))


@dataclass(frozen=True)
class DisturbanceSpec:
    angular_std: float = 2.0  # degrees
    translation_std: float = 5.0  # mm
    trials: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.angular_std < 0 or self.translation_std < 0:
            raise ValueError("standard deviations must be nonnegative")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


def _rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream...)``."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, 0], dtype=np.uint64)
    for s in stream:
        key[1] = (int(key[1]) * 1_000_003 + int(s) + 1) & 0xFFFFFFFFFFFFFFFF
    return np.random.Generator(np.random.Philox(key=key))


def sample_disturbance(spec: DisturbanceSpec, trial_index: int) -> RigidTransform:
    """Axis-angle rotation and translation with iid Gaussian components."""
    z = _rng(spec.seed, 1, trial_index).standard_normal(6)
    omega = z[:3] * math.radians(spec.angular_std)
    t = z[3:] * spec.translation_std
    return RigidTransform(so3_exp(omega), t)


# ---------------------------------------------------------------------------
# procedural vessel tree


def _grow(rng, start, direction, length, spacing, curl):
    n = max(int(round(length / spacing)), 2)
    pts = [np.asarray(start, dtype=float)]
    d = np.asarray(direction, dtype=float)
    d /= np.linalg.norm(d)
    bend = rng.normal(size=3) * curl
    for _ in range(n):
        bend = 0.9 * bend + rng.normal(size=3) * curl
        bend -= bend.dot(d) * d
        d = so3_exp(np.cross(d, bend) * spacing) @ d
        # keep the tree shallow in depth, as vessels in a field of view are
        d[2] *= 0.97
        d /= np.linalg.norm(d)
        pts.append(pts[-1] + spacing * d)
    return np.array(pts[1:])


def make_vessel_tree(seed: int = 0, n_target: int = 2200, spacing: float = 0.3, max_depth: int = 3) -> Centerline3D:
    """Branching 3D centerline with roughly ``n_target`` points (mm)."""
    rng = _rng(seed, 2)
    points: list[np.ndarray] = []
    polylines: list[list[int]] = []
    trunk_len = 0.25 * n_target * spacing
    trunk = _grow(rng, [-0.5 * trunk_len, 0.0, 0.0], [1.0, 0.15, 0.0], trunk_len, spacing, 0.02)
    points.extend(trunk)
    polylines.append(list(range(len(trunk))))
    queue = [(0, 0)]  # (polyline index, depth)
    while queue and len(points) < n_target:
        li, depth = queue.pop(0)
        line = polylines[li]
        if depth >= max_depth or len(line) < 20:
            continue
        nb = 2 if depth == 0 else int(rng.integers(1, 3))
        spots = np.sort(rng.uniform(0.25, 0.85, size=nb))
        for frac in spots:
            if len(points) >= n_target:
                break
            k = int(frac * (len(line) - 2)) + 1
            root = line[k]
            tangent = points[line[k + 1]] - points[line[k - 1]]
            tangent /= np.linalg.norm(tangent)
            side = np.cross(tangent, [0.0, 0.0, 1.0])
            side /= np.linalg.norm(side)
            ang = math.radians(rng.uniform(35.0, 65.0)) * (1 if rng.uniform() < 0.5 else -1)
            d0 = math.cos(ang) * tangent + math.sin(ang) * side + rng.normal(scale=0.3) * np.array([0, 0, 1.0])
            remaining = n_target - len(points)
            length = min(len(line) * spacing * rng.uniform(0.45, 0.7), remaining * spacing)
            if length < 5 * spacing:
                break
            branch = _grow(rng, points[root], d0, length, spacing, 0.03)
            start = len(points)
            points.extend(branch)
            polylines.append([root] + list(range(start, start + len(branch))))
            queue.append((len(polylines) - 1, depth + 1))
    if len(points) < n_target:
        # top up with extra branches off the trunk until the size target is met
        extra = make_vessel_tree(seed + 7919, n_target - len(points), spacing, max_depth) if n_target - len(points) > 50 else None
        if extra is not None:
            off = len(points)
            root = polylines[0][len(polylines[0]) // 3]
            shift = points[root] - extra.points[extra.polylines[0][0]]
            points.extend(extra.points + shift)
            for pl in extra.polylines:
                polylines.append([int(i) + off for i in pl])
            polylines[-len(extra.polylines)] = [root] + polylines[-len(extra.polylines)]
    pts = np.array(points)
    return Centerline3D(pts, tuple(np.array(pl) for pl in polylines))


BUNDLED_TREE = "data/vessel_tree.json"


def bundled_tree() -> Centerline3D:
    """The packaged synthetic tree, identical to ``make_vessel_tree(0)``."""
    from importlib.resources import files

    return load_centerline3d(files(__package__).joinpath(BUNDLED_TREE).read_bytes())


def default_gt_pose() -> RigidTransform:
    return RigidTransform(so3_exp([0.25, -0.2, 0.1]), [0.0, 0.0, DEFAULT_DEPTH])


def synthesize_case(cl3d: Centerline3D, cam: CameraModel = DEFAULT_CAMERA,
                    disturbance: RigidTransform | None = None, gt_pose: RigidTransform | None = None,
                    pixel_spacing: float = DEFAULT_PIXEL_SPACING, centering: str = "after"):
    """Ground-truth target and the disturbed starting pose.

    Returns ``(problem, target, gt_pose, start_pose)``; the target is the
    exact projection of every source point and the start pose is
    ``gt_pose * disturbance`` (disturbance about the source centroid).
    """
    gt_pose = default_gt_pose() if gt_pose is None else gt_pose
    disturbance = RigidTransform.identity() if disturbance is None else disturbance
    proto = Problem(cl3d, Centerline2D(np.zeros((1, 2)), pixel_spacing), cam, centering)
    uv, ok = kernels.project(proto.points, None, gt_pose.rotation, gt_pose.translation, proto.cam_array)
    if not np.all(ok):
        raise DepthBelowMin("ground-truth pose puts source points below the minimum depth")
    target = Centerline2D(uv, pixel_spacing, cl3d.polylines)
    problem = Problem(cl3d, target, cam, centering, gt_pose=gt_pose, gt_projections=uv)
    return problem, target, gt_pose, gt_pose @ disturbance


@dataclass(frozen=True)
class Window:
    u0: float
    v0: float
    u1: float
    v1: float

    def contains(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv).reshape(-1, 2)
        return (uv[:, 0] >= self.u0) & (uv[:, 0] <= self.u1) & (uv[:, 1] >= self.v0) & (uv[:, 1] <= self.v1)


ANCHORS = {
    "center": (0.5, 0.5),
    "top_left": (0.0, 0.0),
    "top_right": (1.0, 0.0),
    "bottom_left": (0.0, 1.0),
    "bottom_right": (1.0, 1.0),
}


def fov_window(points: np.ndarray, fraction: float, anchor: str | tuple[float, float] = "center") -> Window:
    """Axis-aligned window covering ``fraction`` of the bounding-box area."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    lo, hi = points.min(axis=0), points.max(axis=0)
    size = hi - lo
    side = size * math.sqrt(fraction)
    ax, ay = ANCHORS[anchor] if isinstance(anchor, str) else anchor
    u0 = lo[0] + ax * (size[0] - side[0])
    v0 = lo[1] + ay * (size[1] - side[1])
    return Window(u0, v0, u0 + side[0], v0 + side[1])


def crop_fov(target: Centerline2D, fraction: float, anchor: str | tuple[float, float] = "center") -> Centerline2D:
    """Keep the target points inside the field-of-view window."""
    if fraction == 1:
        return target
    win = fov_window(target.points, fraction, anchor)
    keep = win.contains(target.points)
    if not keep.any():
        raise EmptyAfterCrop(f"no target points inside the {fraction:.3g} window")
    return Centerline2D(target.points[keep], target.pixel_spacing)


# ---------------------------------------------------------------------------
# brute-force oracle


def brute_force_oracle(problem: Problem, center: RigidTransform, half_widths: Sequence[float],
                       resolution: float | Sequence[float], hp: Hyperparams, T0: RigidTransform | None = None,
                       ell: float | None = None, max_cells: int = 10_000_000, max_points: int = 10):
    """Exhaustive search of the total objective over a twist grid.

    Grid cell ``c`` is the pose ``exp(c) * center``; a zero half-width pins
    that twist component. Correspondences are re-established at every cell.
    Returns ``(best_twist, best_pose, best_value)``.
    """
    from .centerline import find_correspondences

    if problem.n_points > max_points:
        raise GridTooLarge(f"oracle limited to {max_points} points, problem has {problem.n_points}")
    half = np.asarray(half_widths, dtype=float)
    res = np.broadcast_to(np.asarray(resolution, dtype=float), (6,))
    axes = []
    for h, r in zip(half, res):
        m = int(math.floor(h / r + 1e-9))
        axes.append(np.arange(-m, m + 1) * r)
    cells = math.prod(len(a) for a in axes)
    if cells > max_cells:
        raise GridTooLarge(f"grid has {cells} cells, limit {max_cells}")
    T0 = center if T0 is None else T0
    ell = hp.ell if ell is None else ell
    best = (-math.inf, None)
    for tw in np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 6):
        T = se3_exp(tw) @ center
        uv, ok = kernels.project(problem.points, None, T.rotation, T.translation, problem.cam_array)
        if not np.all(ok):
            continue
        corr = find_correspondences(uv, problem.target, hp.k, hp.radius_factor * ell)
        val = total_objective(problem, State(T), corr, hp, T0, ell)
        if val > best[0]:
            best = (val, tw)
    if best[1] is None:
        raise RegistrationError("no grid cell had a valid projection")
    return best[1], se3_exp(best[1]) @ center, best[0]


# ---------------------------------------------------------------------------
# metrics and the benchmark driver


@dataclass
class Metrics:
    mean_pr_mm: float
    median_pr_mm: float
    p75_mm: float
    p95_mm: float
    gfr: float
    gfr_threshold: float
    gfr_unit: str
    mean_pose_error: tuple[float, float]
    mean_runtime_ms: float
    trials: int = 0
    failures: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_pose_error"] = {"deg": self.mean_pose_error[0], "mm": self.mean_pose_error[1]}
        return d


@dataclass
class TrialRecord:
    trial: int
    solver: str
    disturbance: str
    pr_mm: float
    pose_err_deg: float
    pose_err_mm: float
    outer_iters: int
    runtime_ms: float
    converged: bool
    pr_px: float = float("nan")
    rigid_pr_mm: float = float("nan")
    monotonicity_violations: int = 0
    error: str = ""


CSV_FIELDS = ["trial", "solver", "disturbance", "pr_mm", "pose_err_deg", "pose_err_mm",
              "outer_iters", "runtime_ms", "converged"]


def solver_config(choice: str, base: SolverConfig | None = None, hp: Hyperparams | None = None) -> SolverConfig:
    base = base or SolverConfig()
    hp = hp or Hyperparams()
    if choice == "rkhs":
        return base.replace(loss=ExpKernel(), stage=RIGID_THEN_NONRIGID)
    if choice == "rkhs-rigid":
        return base.replace(loss=ExpKernel(), stage=RIGID)
    if choice == "l2":
        return base.replace(loss=SquaredL2(), stage=RIGID)
    if choice == "huber":
        return base.replace(loss=Huber(hp.huber_delta), stage=RIGID)
    raise ValueError(f"unknown solver {choice!r}; choose from {', '.join(SOLVERS)}")


def compute_metrics(records: Sequence[TrialRecord], threshold: float = 5.0, unit: str = "px",
                    pixel_spacing: float = DEFAULT_PIXEL_SPACING) -> Metrics:
    pr = np.array([r.pr_mm if not r.error else np.inf for r in records], dtype=float)
    finite = pr[np.isfinite(pr)]
    thr_mm = threshold * pixel_spacing if unit == "px" else threshold
    gfr = float(np.mean(~(pr <= thr_mm))) if pr.size else 0.0
    ok = [r for r in records if not r.error]

    def pct(q):
        return float(np.percentile(finite, q)) if finite.size else float("nan")

    return Metrics(
        mean_pr_mm=float(np.mean(finite)) if finite.size else float("nan"),
        median_pr_mm=pct(50),
        p75_mm=pct(75),
        p95_mm=pct(95),
        gfr=gfr,
        gfr_threshold=threshold,
        gfr_unit=unit,
        mean_pose_error=(float(np.mean([r.pose_err_deg for r in ok])) if ok else float("nan"),
                         float(np.mean([r.pose_err_mm for r in ok])) if ok else float("nan")),
        mean_runtime_ms=float(np.mean([r.runtime_ms for r in ok])) if ok else float("nan"),
        trials=len(records),
        failures=len(records) - len(ok),
    )


def run_trial(problem: Problem, gt_pose: RigidTransform, spec: DisturbanceSpec, trial: int, hp: Hyperparams,
              cfg: SolverConfig, solver_choice: str, subset: np.ndarray | None = None) -> TrialRecord:
    label = f"{spec.angular_std:g}deg/{spec.translation_std:g}mm"
    start = gt_pose @ sample_disturbance(spec, trial)
    scfg = solver_config(solver_choice, cfg, hp)
    t0 = time.perf_counter()
    try:
        rep = register(problem, start, hp, scfg)
    except RegistrationError as exc:
        return TrialRecord(trial, solver_choice, label, float("nan"), float("nan"), float("nan"), 0,
                           (time.perf_counter() - t0) * 1e3, False, error=f"{type(exc).__name__}: {exc}")
    runtime = (time.perf_counter() - t0) * 1e3
    pr = projection_residual(rep.final_pose, rep.final_field, problem, GROUND_TRUTH, subset=subset)
    rigid_pr = pr
    if rep.stage == RIGID_THEN_NONRIGID:
        rigid_pr = float(rep.stage_pr_mm.get("rigid", float("nan")))
    deg, mm = pose_error(rep.final_pose, gt_pose)
    return TrialRecord(trial, solver_choice, label, pr, deg, mm, rep.outer_iterations, runtime, rep.converged,
                       pr_px=pr / problem.target.pixel_spacing, rigid_pr_mm=rigid_pr,
                       monotonicity_violations=rep.monotonicity_violations)


def run_benchmark(cl3d: Centerline3D, cam: CameraModel, spec: DisturbanceSpec, hp: Hyperparams | None = None,
                  cfg: SolverConfig | None = None, solver_choice: str = "rkhs", threads: int = 1,
                  crop_fraction: float = 1.0, gfr_threshold: float = 5.0, gfr_unit: str = "px",
                  gt_pose: RigidTransform | None = None):
    """Run every trial of ``spec``; returns ``(metrics, records)``.

    With ``crop_fraction < 1`` the target is cropped to a centred window and
    PR is scored on the source points whose true projection falls inside it.
    """
    hp = hp or Hyperparams()
    cfg = cfg or SolverConfig()
    problem, target, gt, _ = synthesize_case(cl3d, cam, gt_pose=gt_pose)
    subset = None
    if crop_fraction < 1:
        win = fov_window(target.points, crop_fraction)
        subset = win.contains(target.points)
        problem = problem.with_target(crop_fov(target, crop_fraction))
    # force the lazy caches before any worker threads share the problem
    problem.points, problem.graph_laplacians, problem.target_points
    args = (problem, gt, spec)

    def one(i):
        return run_trial(*args, i, hp, cfg, solver_choice, subset)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one, range(spec.trials)))
    else:
        records = [one(i) for i in range(spec.trials)]
    records.sort(key=lambda r: r.trial)
    return compute_metrics(records, gfr_threshold, gfr_unit, target.pixel_spacing), records


def records_to_csv(records: Sequence[TrialRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([r.trial, r.solver, r.disturbance, repr(r.pr_mm), repr(r.pose_err_deg), repr(r.pose_err_mm),
                    r.outer_iters, f"{r.runtime_ms:.3f}", int(r.converged)])
    return buf.getvalue()


def metrics_to_json(metrics: Metrics, **extra) -> str:
    return json.dumps({**metrics.to_dict(), **extra}, indent=2, sort_keys=True)
