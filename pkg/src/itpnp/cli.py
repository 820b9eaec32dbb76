"""Command-line interface: ``itpnp {register,synth,bench,eval}``.

Exit status is 0 on success, 1 for unreadable input or a bad configuration,
and 2 when the solver or benchmark itself fails.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .centerline import (
    Centerline2D,
    Centerline3D,
    dumps_json,
    load_centerline2d,
    load_centerline3d,
    save_centerline,
)
from .errors import ParseError, RegistrationError
from .geometry import CameraModel, RigidTransform
from .metrics import GROUND_TRUTH, NEAREST_POINT, pose_error, projection_residual
from .objective import DeformationField, ExpKernel, Huber, Hyperparams, SquaredL2
from .problem import Problem
from .simbench import (
    DEFAULT_CAMERA,
    DEFAULT_PIXEL_SPACING,
    SOLVERS,
    TABLE3_SWEEP,
    DisturbanceSpec,
    bundled_tree,
    crop_fov,
    default_gt_pose,
    make_vessel_tree,
    records_to_csv,
    run_benchmark,
    sample_disturbance,
    solver_config,
    synthesize_case,
)
from .solver import RIGID, RIGID_THEN_NONRIGID, SolverConfig, register

EXIT_OK, EXIT_INPUT, EXIT_SOLVER = 0, 1, 2
LOSSES = ("rkhs", "l2", "huber")


class InputError(Exception):
    """Unreadable file or invalid configuration (exit status 1)."""


class SolverFailure(Exception):
    """The registration or benchmark could not produce a result (exit status 2)."""


# ---------------------------------------------------------------------------
# configuration


def _loss_key(loss) -> str:
    if isinstance(loss, SquaredL2):
        return "l2"
    if isinstance(loss, Huber):
        return "huber"
    return "rkhs"


@dataclass
class RunConfig:
    """Everything a command needs besides its positional arguments.

    Every field has a default, so ``{}`` is a valid configuration file.
    The ``solver`` section takes ``loss`` as one of ``rkhs``, ``l2`` or
    ``huber``; the remaining keys mirror :class:`SolverConfig`.
    """

    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(stage=RIGID_THEN_NONRIGID))
    disturbance: DisturbanceSpec = field(default_factory=DisturbanceSpec)
    camera: CameraModel = DEFAULT_CAMERA
    pixel_spacing: float = DEFAULT_PIXEL_SPACING
    source: str | None = None
    target: str | None = None
    init_pose: str | None = None
    gt_pose: str | None = None
    out: str = "itpnp-out"
    seed: int = 0
    threads: int = 1

    SECTIONS = {"hyperparams": Hyperparams, "solver": SolverConfig,
                "disturbance": DisturbanceSpec, "camera": CameraModel}
    SCALARS = {"pixel_spacing": (int, float), "source": (str, type(None)), "target": (str, type(None)),
               "init_pose": (str, type(None)), "gt_pose": (str, type(None)), "out": (str,),
               "seed": (int,), "threads": (int,)}

    @property
    def loss_name(self) -> str:
        return _loss_key(self.solver.loss)

    def to_dict(self) -> dict:
        out = {}
        for name in self.SECTIONS:
            section = asdict(getattr(self, name)) if name != "solver" else self._solver_dict()
            if name == "hyperparams" and section["init_scale"] is not None:
                section["init_scale"] = list(section["init_scale"])
            out[name] = section
        for name in self.SCALARS:
            out[name] = getattr(self, name)
        return out

    def _solver_dict(self) -> dict:
        d = {f.name: getattr(self.solver, f.name) for f in fields(SolverConfig)}
        d["loss"] = self.loss_name
        return d

    @classmethod
    def from_dict(cls, doc) -> "RunConfig":
        if not isinstance(doc, dict):
            raise InputError("config: top level must be a JSON object")
        known = set(cls.SECTIONS) | set(cls.SCALARS)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise InputError(f"config: unknown key(s) {', '.join(unknown)}")
        cfg = cls()
        for name, kind in cls.SECTIONS.items():
            if name in doc:
                setattr(cfg, name, _build_section(name, kind, doc[name], getattr(cfg, name)))
        for name, types in cls.SCALARS.items():
            if name in doc:
                value = doc[name]
                if isinstance(value, bool) or not isinstance(value, types):
                    raise InputError(f"config: {name} has the wrong type ({type(value).__name__})")
                setattr(cfg, name, value)
        if not cfg.pixel_spacing > 0:
            raise InputError("config: pixel_spacing must be positive")
        if cfg.threads < 1:
            raise InputError("config: threads must be >= 1")
        return cfg

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except (OSError, UnicodeDecodeError) as exc:
            raise InputError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise InputError(f"config {path}: {exc.msg} at line {exc.lineno}") from None
        return cls.from_dict(doc)


def _build_section(name: str, kind, doc, default):
    if not isinstance(doc, dict):
        raise InputError(f"config: {name} must be an object")
    allowed = {f.name for f in fields(kind)}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise InputError(f"config: unknown key(s) in {name}: {', '.join(unknown)}")
    values = {f.name: getattr(default, f.name) for f in fields(kind)}
    values.update(doc)
    if kind is SolverConfig:
        loss = values["loss"]
        if not isinstance(loss, str) or loss not in LOSSES:
            raise InputError(f"config: solver.loss must be one of {', '.join(LOSSES)}")
    if kind is Hyperparams and values["init_scale"] is not None:
        values["init_scale"] = tuple(values["init_scale"])
    try:
        if kind is SolverConfig:
            loss = values.pop("loss")
            hp_delta = Hyperparams().huber_delta
            values["loss"] = {"rkhs": ExpKernel(), "l2": SquaredL2(), "huber": Huber(hp_delta)}[loss]
        return kind(**values)
    except (TypeError, ValueError) as exc:
        raise InputError(f"config: invalid {name}: {exc}") from None


# ---------------------------------------------------------------------------
# file helpers


def _read_bytes(path: str, what: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError:
        raise InputError(f"{what} file not found: {path}") from None
    except OSError as exc:
        raise InputError(f"cannot read {what} file {path}: {exc}") from None


def _load_source(path: str | None) -> Centerline3D:
    if path is None:
        return bundled_tree()
    try:
        return load_centerline3d(_read_bytes(path, "3D centerline"))
    except (ParseError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _load_target(path: str) -> Centerline2D:
    try:
        return load_centerline2d(_read_bytes(path, "2D centerline"))
    except (ParseError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _load_json(path: str, what: str):
    try:
        return json.loads(_read_bytes(path, what).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: not a valid {what} document ({exc})") from None


def load_pose(path: str | None) -> RigidTransform:
    """Pose file: a JSON array of 16 row-major numbers; ``identity`` or None for I."""
    if path is None or path == "identity":
        return RigidTransform.identity()
    doc = _load_json(path, "pose")
    if isinstance(doc, dict) and set(doc) == {"pose"}:
        doc = doc["pose"]
    if (not isinstance(doc, list) or len(doc) != 16
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in doc)):
        raise InputError(f"{path}: pose must be an array of 16 numbers")
    m = np.array(doc, dtype=float).reshape(4, 4)
    if not np.all(np.isfinite(m)) or not np.allclose(m[3], [0, 0, 0, 1]):
        raise InputError(f"{path}: last pose row must be 0 0 0 1")
    R = m[:3, :3]
    if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) <= 0:
        raise InputError(f"{path}: pose rotation is not orthonormal")
    return RigidTransform.from_matrix(m)


def load_field(path: str, n: int) -> DeformationField:
    doc = _load_json(path, "deformation field")
    if not isinstance(doc, dict) or set(doc) != {"unit", "displacements"} or doc["unit"] != "mm":
        raise InputError(f"{path}: field must be an object with unit 'mm' and displacements")
    try:
        disp = np.array(doc["displacements"], dtype=float)
    except (TypeError, ValueError):
        raise InputError(f"{path}: displacements must be numeric") from None
    if disp.shape != (n, 3) or not np.all(np.isfinite(disp)):
        raise InputError(f"{path}: expected {n} finite 3-vectors, got shape {disp.shape}")
    return DeformationField(disp)


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _pose_text(T: RigidTransform) -> str:
    return dumps_json(T.as_matrix().reshape(-1).tolist()) + "\n"


def _field_text(fld: DeformationField | None, n: int) -> str:
    disp = np.zeros((n, 3)) if fld is None else fld.displacements
    return dumps_json({"unit": "mm", "displacements": disp.tolist()}, indent=1) + "\n"


def parse_threshold(text: str) -> tuple[float, str]:
    """``"5px"``, ``"5mm"`` or a bare number (pixels)."""
    s = text.strip().lower()
    unit = "px"
    for suffix in ("px", "mm"):
        if s.endswith(suffix):
            s, unit = s[: -len(suffix)].strip(), suffix
            break
    try:
        value = float(s)
    except ValueError:
        raise InputError(f"bad threshold {text!r}; use e.g. 5px or 5mm") from None
    if not value > 0:
        raise InputError(f"threshold must be positive, got {text!r}")
    return value, unit


# ---------------------------------------------------------------------------
# SVG overlay

TARGET_COLOR = "#d62728"
PROJECTION_COLOR = "#2ca02c"


def overlay_svg(target: np.ndarray, projected: np.ndarray, target_lines=(), source_lines=(),
                margin: float = 10.0) -> str:
    """Target centerline in red, projected source in green, in pixel coordinates."""
    both = np.vstack([target, projected[np.all(np.isfinite(projected), axis=1)]])
    lo = both.min(axis=0) - margin
    size = both.max(axis=0) + margin - lo

    def layer(pts, lines, color, name):
        out = [f'<g id="{name}" fill="none" stroke="{color}" stroke-width="1">']
        covered = np.zeros(len(pts), dtype=bool)
        for pl in lines:
            pl = np.asarray(pl)
            if pl.size < 2:
                continue
            covered[pl] = True
            coords = " ".join(f"{pts[i, 0]:.3f},{pts[i, 1]:.3f}" for i in pl if np.all(np.isfinite(pts[i])))
            out.append(f'<polyline points="{coords}"/>')
        for i in np.flatnonzero(~covered):
            if np.all(np.isfinite(pts[i])):
                out.append(f'<circle cx="{pts[i, 0]:.3f}" cy="{pts[i, 1]:.3f}" r="0.8" fill="{color}" stroke="none"/>')
        out.append("</g>")
        return out

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{lo[0]:.3f} {lo[1]:.3f} {size[0]:.3f} {size[1]:.3f}" '
        f'width="{size[0]:.0f}" height="{size[1]:.0f}">',
        f'<rect x="{lo[0]:.3f}" y="{lo[1]:.3f}" width="{size[0]:.3f}" height="{size[1]:.3f}" fill="white"/>',
        *layer(target, target_lines, TARGET_COLOR, "target"),
        *layer(projected, source_lines, PROJECTION_COLOR, "projection"),
        "</svg>",
    ]
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# commands


def _problem(cfg: RunConfig, source: Centerline3D, target: Centerline2D, gt: RigidTransform | None) -> Problem:
    return Problem(source, target, cfg.camera, gt_pose=gt)


def cmd_register(args, cfg: RunConfig) -> int:
    source_path = args.source or cfg.source
    target_path = args.target or cfg.target
    if target_path is None:
        raise InputError("register needs a 2D target file")
    source = _load_source(source_path)
    target = _load_target(target_path)
    init = load_pose(args.init_pose or cfg.init_pose)
    gt_path = args.gt_pose or cfg.gt_pose
    gt = load_pose(gt_path) if gt_path else None
    loss = args.loss or cfg.loss_name
    hp = cfg.hyperparams
    solver = cfg.solver
    if args.rigid_only:
        solver = solver.replace(stage=RIGID)
    scfg = solver.replace(loss=solver_config(loss, solver, hp).loss)
    problem = _problem(cfg, source, target, gt)
    try:
        report = register(problem, init, hp, scfg)
    except RegistrationError as exc:
        raise SolverFailure(f"registration failed: {type(exc).__name__}: {exc}") from None

    out = args.out
    os.makedirs(out, exist_ok=True)
    doc = report.to_dict()
    doc["inputs"] = {
        "source": None if source_path is None else os.path.abspath(source_path),
        "target": os.path.abspath(target_path),
        "gt_pose": None if gt_path is None else os.path.abspath(gt_path),
        "camera": asdict(cfg.camera),
        "centering": problem.centering,
    }
    _write(os.path.join(out, "report.json"), json.dumps(doc, indent=1, allow_nan=True) + "\n")
    _write(os.path.join(out, "pose.json"), _pose_text(report.final_pose))
    _write(os.path.join(out, "field.json"), _field_text(report.final_field, problem.n_points))
    fld = report.final_field
    from . import kernels

    uv, _ = kernels.project(problem.points, None if fld is None else fld.displacements,
                            report.final_pose.rotation, report.final_pose.translation, problem.cam_array)
    _write(os.path.join(out, "overlay.svg"),
           overlay_svg(target.points, uv, target.polylines, source.polylines))
    print(f"loss={report.loss} stage={report.stage} outer={report.outer_iterations} "
          f"pr_mm={report.pr_mm:.6g} ({report.pr_mode}) converged={report.converged}")
    print(f"wrote {out}/report.json pose.json field.json overlay.svg")
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    if not 1 <= args.points <= 1_000_000:
        raise InputError(f"--points must be in [1, 1000000], got {args.points}")
    if not args.spacing > 0:
        raise InputError(f"--spacing must be positive, got {args.spacing}")
    if args.crop is not None and not 0 < args.crop <= 1:
        raise InputError(f"--crop must be in (0, 1], got {args.crop}")
    seed = cfg.seed
    source = make_vessel_tree(seed, n_target=args.points, spacing=args.spacing)
    spec = DisturbanceSpec(cfg.disturbance.angular_std, cfg.disturbance.translation_std, 1, seed)
    try:
        _, target, gt, start = synthesize_case(source, cfg.camera, sample_disturbance(spec, 0),
                                               default_gt_pose(), cfg.pixel_spacing)
        cropped = crop_fov(target, args.crop) if args.crop is not None else None
    except RegistrationError as exc:
        raise InputError(f"cannot synthesise a case: {exc}") from None
    out = args.out
    os.makedirs(out, exist_ok=True)
    save_centerline(source, os.path.join(out, "source.json"))
    save_centerline(target, os.path.join(out, "target.json"))
    _write(os.path.join(out, "gt_pose.json"), _pose_text(gt))
    _write(os.path.join(out, "start_pose.json"), _pose_text(start))
    written = ["source.json", "target.json", "gt_pose.json", "start_pose.json"]
    if cropped is not None:
        save_centerline(cropped, os.path.join(out, "target_crop.json"))
        written.append("target_crop.json")
    print(f"{len(source)} source points, {len(target)} target points; wrote {', '.join(written)} to {out}")
    return EXIT_OK


SUMMARY_COLUMNS = ("solver", "disturbance", "GFR", "MeanPR(mm)", "95%(mm)", "75%(mm)", "time(ms)")


def summary_table(rows: Sequence[tuple[str, str, object]]) -> str:
    """Aligned text table with one line per (solver, disturbance)."""
    body = [SUMMARY_COLUMNS]
    for solver, label, m in rows:
        body.append((solver, label, f"{100 * m.gfr:.1f}%", f"{m.mean_pr_mm:.3f}", f"{m.p95_mm:.3f}",
                     f"{m.p75_mm:.3f}", f"{m.mean_runtime_ms:.1f}"))
    widths = [max(len(r[i]) for r in body) for i in range(len(SUMMARY_COLUMNS))]
    lines = ["  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_bench(args, cfg: RunConfig) -> int:
    solvers = [s.strip() for s in (args.solvers or "rkhs").split(",") if s.strip()]
    bad = [s for s in solvers if s not in SOLVERS]
    if bad or not solvers:
        raise InputError(f"unknown solver(s) {', '.join(bad) or '<none>'}; choose from {', '.join(SOLVERS)}")
    threshold, unit = parse_threshold(args.threshold)
    trials = args.trials if args.trials is not None else cfg.disturbance.trials
    if trials < 1:
        raise InputError("--trials must be >= 1")
    crop = 1.0 if args.crop is None else args.crop
    if not 0 < crop <= 1:
        raise InputError(f"--crop must be in (0, 1], got {crop}")
    if args.sweep == "table3":
        rows = [(a, t) for a, t in TABLE3_SWEEP]
    else:
        rows = [(cfg.disturbance.angular_std, cfg.disturbance.translation_std)]
    source = _load_source(args.source or cfg.source)

    summary, records, per_row = [], [], []
    for ang, trans in rows:
        spec = DisturbanceSpec(ang, trans, trials, cfg.seed)
        for solver in solvers:
            try:
                metrics, recs = run_benchmark(source, cfg.camera, spec, cfg.hyperparams, cfg.solver, solver,
                                              threads=cfg.threads, crop_fraction=crop, gfr_threshold=threshold,
                                              gfr_unit=unit)
            except RegistrationError as exc:
                raise SolverFailure(f"benchmark setup failed: {exc}") from None
            label = recs[0].disturbance
            summary.append((solver, label, metrics))
            records.extend(recs)
            per_row.append({"solver": solver, "disturbance": label, "angular_std": ang,
                            "translation_std": trans, "crop": crop, "metrics": metrics.to_dict()})

    out = args.out
    os.makedirs(out, exist_ok=True)
    _write(os.path.join(out, "bench.csv"), records_to_csv(records))
    _write(os.path.join(out, "bench.json"),
           json.dumps({"seed": cfg.seed, "trials": trials, "rows": per_row}, indent=2, allow_nan=True) + "\n")
    table = summary_table(summary)
    _write(os.path.join(out, "summary.txt"), table)
    sys.stdout.write(table)
    if all(r.error for r in records):
        first = records[0].error
        raise SolverFailure(f"every trial failed; first error: {first}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    threshold, unit = parse_threshold(args.threshold)
    gt_path = args.gt_pose or cfg.gt_pose
    gt = load_pose(gt_path) if gt_path else None
    results = []
    for run in args.runs:
        report = _load_json(os.path.join(run, "report.json"), "report")
        inputs = report.get("inputs") if isinstance(report, dict) else None
        if not isinstance(inputs, dict) or "target" not in inputs or "camera" not in inputs:
            raise InputError(f"{run}/report.json: missing the inputs section")
        try:
            camera = CameraModel(**inputs["camera"])
        except (TypeError, ValueError) as exc:
            raise InputError(f"{run}/report.json: bad camera: {exc}") from None
        source = _load_source(inputs.get("source"))
        target = _load_target(inputs["target"])
        run_gt = gt
        if run_gt is None and inputs.get("gt_pose"):
            run_gt = load_pose(inputs["gt_pose"])
        pose = load_pose(args.pose or os.path.join(run, "pose.json"))
        problem = Problem(source, target, camera, inputs.get("centering", "after"), gt_pose=run_gt)
        fld = load_field(os.path.join(run, "field.json"), problem.n_points)
        mode = GROUND_TRUTH if run_gt is not None else NEAREST_POINT
        try:
            pr = projection_residual(pose, fld, problem, mode)
        except RegistrationError as exc:
            raise SolverFailure(f"{run}: cannot score: {exc}") from None
        row = {"run": run, "pr_mm": pr, "pr_px": pr / target.pixel_spacing, "pr_mode": mode}
        if run_gt is not None:
            deg, mm = pose_error(pose, run_gt)
            row.update(pose_err_deg=deg, pose_err_mm=mm)
        limit = threshold if unit == "mm" else threshold * target.pixel_spacing
        row["gross_failure"] = not pr <= limit
        results.append(row)
    gfr = sum(r["gross_failure"] for r in results) / len(results)
    doc = {"threshold": threshold, "threshold_unit": unit, "gfr": gfr, "runs": results}
    text = json.dumps(doc, indent=2) + "\n"
    if args.out_file:
        _write(args.out_file, text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    """Usage errors are input errors: exit 1 rather than argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=d, help="JSON run configuration")
    parser.add_argument("--seed", type=int, metavar="N", default=d, help="random seed (overrides config)")
    parser.add_argument("--out", metavar="DIR", default=d, help="output directory (overrides config)")
    parser.add_argument("--threads", type=int, metavar="N", default=d, help="worker threads for benchmarks")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="itpnp", description="Robust 3D-2D vessel centerline registration.")
    _global_flags(parser, suppress=False)
    parser.add_argument("--print-config", action="store_true",
                        help="print the effective configuration with all defaults and exit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("register", help="register a 3D centerline to a 2D centerline")
    _global_flags(p, suppress=True)
    p.add_argument("source", nargs="?", help="3D centerline JSON (default: config, then the bundled tree)")
    p.add_argument("target", nargs="?", help="2D centerline JSON (default: config)")
    p.add_argument("--init-pose", metavar="FILE", help="16-number pose file or 'identity'")
    p.add_argument("--gt-pose", metavar="FILE", help="ground-truth pose; switches the report to ground-truth PR")
    p.add_argument("--loss", choices=LOSSES, help="data loss (default: config, rkhs)")
    p.add_argument("--rigid-only", action="store_true", help="skip the nonrigid refinement")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("synth", help="write a procedural tree and its ground-truth projection")
    _global_flags(p, suppress=True)
    p.add_argument("--points", type=int, default=2200, help="approximate 3D point count (default: %(default)s)")
    p.add_argument("--spacing", type=float, default=0.3, help="sample spacing in mm (default: %(default)s)")
    p.add_argument("--crop", type=float, metavar="FRACTION", help="also write a target cropped to this area fraction")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="seeded Monte Carlo benchmark")
    _global_flags(p, suppress=True)
    p.add_argument("--source", help="3D centerline JSON (default: bundled tree)")
    p.add_argument("--solvers", metavar="LIST", help=f"comma-separated subset of {','.join(SOLVERS)}")
    p.add_argument("--sweep", choices=("table3",), help="run the five-row disturbance sweep")
    p.add_argument("--trials", type=int, help="trials per row (default: config, 100)")
    p.add_argument("--crop", type=float, metavar="FRACTION", help="crop the target field of view")
    p.add_argument("--threshold", default="5px", help="gross-failure threshold, e.g. 5px or 5mm")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="re-score stored registration outputs")
    _global_flags(p, suppress=True)
    p.add_argument("runs", nargs="+", metavar="RUN_DIR", help="directories written by 'register'")
    p.add_argument("--gt-pose", metavar="FILE", help="ground-truth pose (default: the one recorded in the report)")
    p.add_argument("--pose", metavar="FILE", help="score this pose file instead of RUN_DIR/pose.json")
    p.add_argument("--threshold", default="5px", help="gross-failure threshold, e.g. 5px or 5mm")
    p.add_argument("--out-file", metavar="FILE", help="also write the metrics JSON here")
    p.set_defaults(func=cmd_eval)
    return parser


def _effective_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise InputError("--threads must be >= 1")
        cfg.threads = args.threads
    if args.out is not None:
        cfg.out = args.out
    args.out = cfg.out
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _effective_config(args)
        if args.print_config:
            print(json.dumps(cfg.to_dict(), indent=2))
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("itpnp: error: a command is required", file=sys.stderr)
            return EXIT_INPUT
        return args.func(args, cfg)
    except InputError as exc:
        print(f"itpnp: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SolverFailure as exc:
        print(f"itpnp: error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except RegistrationError as exc:
        print(f"itpnp: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
