"""Five-step ray-learning pipeline and the convergence-study harness.

For each high frequency ``omega`` with ``omega_tilde = sqrt(omega)``:

1. low-frequency field on ``T_h0`` with ``omega_tilde h0^2 = 1``;
2. circle probing at every barycenter of ``T_h0``;
3. low-frequency field on ``T_h~`` with ``omega_tilde h~ = 3 N c_min``;
4. dual-impedance refinement of the inherited estimates on ``T_h~``;
5. projection of the exact high-frequency field onto the ray basis on
   ``T_h`` with ``omega h = 1``.

The low-frequency field is either the closed-form benchmark field at
``omega_tilde`` (analytic oracle) or a fan-basis DG solve.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from .field import Benchmark, FieldDomainError, benchmark, discrete_field, unit_square
from .geom import Mesh, RayField, build_mesh, fit_circle_center, interpolate_ray_field, refine_to
from .nmla import RayEstimate, nmla_probe, truncation_order
from .pwdg import solve_benchmark
from .pwspace import element_quadrature, global_projection_error
from .raytune import postprocess_probe

__all__ = [
    "PipelineConfig",
    "ConvergenceRow",
    "PipelineError",
    "StageResult",
    "run_pipeline",
    "run_single",
    "convergence_orders",
    "emit_report",
    "read_csv",
    "interior_elements",
    "intermediate_mesh",
    "angle_errors",
    "min_wave_speed",
    "probe_mesh",
    "refine_mesh",
    "merge_close",
    "exact_ray_field",
]

log = logging.getLogger(__name__)

EXAMPLES = ("example1", "example2", "synthetic-plane-wave", "synthetic-curved")
ANGLE_SOURCES = ("exact", "nmla", "post")
LOWFREQ_SOURCES = ("analytic-oracle", "pwdg")


class PipelineError(RuntimeError):
    """A pipeline stage failed for one frequency."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    """Settings for one convergence study.

    ``omega_tilde`` overrides the default rule ``omega_tilde = omega**0.5``
    with one value per entry of ``omegas``.
    """

    example: str = "example2"
    omegas: list = field(default_factory=lambda: [400.0, 625.0, 900.0])
    omega_tilde: list | None = None
    angle_source: str = "post"
    lowfreq: str = "analytic-oracle"
    fan_size: int = 9
    rel_threshold: float = 0.4
    max_iter: int = 200
    theta: float = math.pi / 4
    outdir: str = "results"

    def __post_init__(self):
        self.omegas = [float(w) for w in self.omegas]
        if not self.omegas or any(not w > 0 for w in self.omegas):
            raise ValueError("omegas must be a non-empty list of positive numbers")
        if self.example not in EXAMPLES:
            raise ValueError(f"example must be one of {EXAMPLES}, got {self.example!r}")
        if self.angle_source not in ANGLE_SOURCES:
            raise ValueError(f"angle_source must be one of {ANGLE_SOURCES}")
        if self.lowfreq not in LOWFREQ_SOURCES:
            raise ValueError(f"lowfreq must be one of {LOWFREQ_SOURCES}")
        if self.omega_tilde is not None:
            self.omega_tilde = [float(w) for w in self.omega_tilde]
            if len(self.omega_tilde) != len(self.omegas):
                raise ValueError("omega_tilde needs one entry per omega")
        if self.fan_size < 3:
            raise ValueError("fan_size must be at least 3")

    def omega_tilde_for(self, i: int) -> float:
        if self.omega_tilde is not None:
            return self.omega_tilde[i]
        return math.sqrt(self.omegas[i])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        """Read a YAML or JSON mapping (JSON is valid YAML)."""
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: config must be a mapping")
        return cls.from_dict(doc)


@dataclass
class ConvergenceRow:
    """One line of a convergence table.

    ``rel_l2_error`` is the projection error on ``T_h``; ``max_angle_error``
    is measured at the barycenters of ``T_h~``. ``status`` is ``"ok"`` or
    ``"error"``, in which case ``error`` holds the failing stage.
    """

    omega: float
    h: float
    dofs: int
    max_angle_error: float
    rel_l2_error: float
    dls_max_iters: int
    wall_time: float
    omega_tilde: float = math.nan
    h0: float = math.nan
    h_tilde: float = math.nan
    n_max: int = 0
    count_match_fraction: float = math.nan
    angle_mismatches: int = 0
    refine_failures: int = 0
    merged_rays: int = 0
    ill_conditioned: int = 0
    lowfreq_error: float = math.nan
    status: str = "ok"
    error: str = ""

    @classmethod
    def failed(cls, omega: float, message: str, wall_time: float, **kw) -> "ConvergenceRow":
        return cls(omega, math.nan, 0, math.nan, math.nan, 0, wall_time, status="error", error=message, **kw)


_ROW_FIELDS = [f.name for f in dataclasses.fields(ConvergenceRow)]
_ROW_TYPES = {f.name: f.type for f in dataclasses.fields(ConvergenceRow)}


@dataclass
class StageResult:
    """Intermediate products of one frequency, for inspection and plotting."""

    meshes: dict = field(default_factory=dict)
    probe: RayField | None = None
    post: RayField | None = None
    fine: RayField | None = None
    refine_info: list = field(default_factory=list)
    angle_errors: np.ndarray | None = None


# -- helpers -----------------------------------------------------------------


def interior_elements(mesh: Mesh) -> np.ndarray:
    """Mask of elements that share no edge with the boundary."""
    idx = np.arange(mesh.n_elements)
    ix, iy = idx % mesh.nx, idx // mesh.nx
    return (ix > 0) & (ix < mesh.nx - 1) & (iy > 0) & (iy < mesh.ny - 1)


def min_wave_speed(medium, domain=unit_square, n: int = 64) -> float:
    """Minimum of ``c`` over an ``n x n`` grid of cell centers."""
    x0, x1, y0, y1 = domain
    t = (np.arange(n) + 0.5) / n
    X, Y = np.meshgrid(x0 + t * (x1 - x0), y0 + t * (y1 - y0), indexing="ij")
    return float(np.min(medium.c(np.stack([X, Y], axis=-1))))


def intermediate_mesh(m0: Mesh, n_max: int, c_min: float, omega_tilde: float) -> Mesh:
    """``T_h~`` nested in ``m0`` with ``h~ <= 3 n_max c_min / omega_tilde``.

    When the target is not below ``m0.h`` a coarser nested mesh does not
    exist and ``m0`` itself is returned.
    """
    target = 3.0 * n_max * c_min / omega_tilde
    return refine_to(m0, target) if target < m0.h else m0


def _circ_dist(a, b):
    d = np.mod(np.asarray(a) - np.asarray(b), 2 * np.pi)
    return np.minimum(d, 2 * np.pi - d)


def angle_errors(estimate: RayField, exact: Callable) -> tuple[np.ndarray, np.ndarray]:
    """Per-element angle error against the exact directions at the barycenters.

    Each exact direction is matched to its nearest estimated direction; an
    element without estimates scores ``pi``. Returns the errors and a mask of
    elements whose ray count differs from the exact one.
    """
    bary = estimate.mesh.barycenters()
    ex = np.asarray(exact(bary))
    errs = np.empty(len(bary))
    mismatch = np.zeros(len(bary), bool)
    for e in range(len(bary)):
        est, _ = estimate.element(e)
        mismatch[e] = len(est) != ex.shape[1]
        if len(est) == 0:
            errs[e] = np.pi
            continue
        d = _circ_dist(ex[e][:, None], est[None, :])
        errs[e] = float(np.max(np.min(d, axis=1)))
    return errs, mismatch


def exact_ray_field(mesh: Mesh, exact: Callable) -> RayField:
    ang = np.asarray(exact(mesh.barycenters()), dtype=float)
    E, n = ang.shape
    return RayField(mesh, np.full(E, n), ang, np.ones((E, n), complex), {"source": "exact"})


def _lowfreq_field(bench: Benchmark, mesh: Mesh, omega_tilde: float, cfg: PipelineConfig):
    """Low-frequency field on ``mesh`` and its relative L2 error (pwdg only)."""
    if cfg.lowfreq == "analytic-oracle":
        return bench.wave, math.nan
    sol = solve_benchmark(bench, mesh, omega_tilde, cfg.fan_size)
    pts, W = element_quadrature(mesh, 8)
    uh, ue = sol.value(pts), bench.wave.value(pts)
    err = math.sqrt(np.sum(W * np.abs(uh - ue) ** 2) / np.sum(W * np.abs(ue) ** 2))
    return discrete_field(sol), float(err)


def probe_mesh(field_, mesh: Mesh, omega_tilde: float, medium, rel_threshold: float = 0.4,
               domain=unit_square) -> RayField:
    """Step 2: circle probing at every barycenter.

    Circles that leave ``domain`` are moved inward.
    """
    rho = omega_tilde**-0.5
    angles, amps = [], []
    for b in mesh.barycenters():
        r0 = fit_circle_center(b, rho, domain)
        est = nmla_probe(field_, r0, omega_tilde, medium, rel_threshold=rel_threshold)
        angles.append(est.angles)
        amps.append(est.amplitudes)
    return RayField.from_lists(mesh, angles, amps, {"stage": "probe", "omega_tilde": omega_tilde})


def merge_close(angles, amplitudes, sep: float):
    """Collapse directions closer than ``sep`` onto the strongest of each cluster.

    ``angles`` must be sorted in ``[0, 2 pi)``; clusters may wrap through 0.
    """
    a = np.asarray(angles, dtype=float)
    b = np.asarray(amplitudes, dtype=complex)
    n = len(a)
    if n < 2:
        return a, b
    gap = np.diff(np.r_[a, a[0] + 2 * np.pi]) >= sep
    if gap.all():
        return a, b
    if not gap.any():
        k = int(np.argmax(np.abs(b)))
        return a[k : k + 1], b[k : k + 1]
    # start the sweep just after a real gap so no cluster wraps
    start = (int(np.flatnonzero(gap)[-1]) + 1) % n
    keep, best = [], start
    for j in range(n):
        i = (start + j) % n
        if j and not gap[(i - 1) % n]:
            if abs(b[i]) > abs(b[best]):
                best = i
            continue
        if j:
            keep.append(best)
        best = i
    keep.append(best)
    keep = np.sort(keep)
    return a[keep], b[keep]


def refine_mesh(field_, inherited: RayField, omega_tilde: float, medium, max_iter: int = 200,
                domain=unit_square):
    """Step 4: refine inherited estimates on ``inherited.mesh``.

    An element whose refinement raises keeps its inherited estimate and is
    flagged with ``failed=True`` in its info record. Refined directions closer
    than one probe main lobe are merged (see :func:`merge_close`).
    """
    angles, amps, infos = [], [], []
    for e, b in enumerate(inherited.mesh.barycenters()):
        a0, b0 = inherited.element(e)
        init = RayEstimate(a0, b0)
        rec = {"element_index": e, "N": init.N, "iters": 0, "J": 0.0, "failed": False, "stop": "", "merged": 0}
        if init.N:
            r1 = 3.0 * init.N * float(medium.c(b)) / omega_tilde
            try:
                r0 = fit_circle_center(b, r1, domain)
                est = postprocess_probe(field_, r0, init, omega_tilde, medium, max_iter=max_iter)
                rec.update(iters=est.info["iters"], J=est.info["J"], stop=est.info["stop"])
                sep = 2 * np.pi / (2 * truncation_order(math.sqrt(omega_tilde) / medium.c(b)) + 1)
                a0, b0 = merge_close(est.angles, est.amplitudes, sep)
                rec["merged"] = est.N - len(a0)
            except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
                rec.update(failed=True, stop=f"{type(exc).__name__}: {exc}")
        angles.append(a0)
        amps.append(b0)
        infos.append(rec)
    rf = RayField.from_lists(inherited.mesh, angles, amps, {"stage": "post", "omega_tilde": omega_tilde})
    return rf, infos


# -- one frequency -------------------------------------------------------------


def run_single(cfg: PipelineConfig, i: int) -> tuple[ConvergenceRow, StageResult]:
    """Steps 1 to 5 for ``cfg.omegas[i]``. Raises :class:`PipelineError`."""
    omega, wt = cfg.omegas[i], cfg.omega_tilde_for(i)
    t0 = time.perf_counter()
    out = StageResult()
    low = benchmark(cfg.example, wt, cfg.theta)
    high = benchmark(cfg.example, omega, cfg.theta)
    medium = low.medium

    stage = "step1"
    try:
        m0 = build_mesh(unit_square, wt**-0.5)
        f0, lf_err = _lowfreq_field(low, m0, wt, cfg)
        stage = "step2"
        probe = probe_mesh(f0, m0, wt, medium, cfg.rel_threshold)
        n_max = int(probe.counts.max(initial=0))
        if n_max == 0:
            raise ValueError("no rays detected on any element")
        exact0 = np.asarray(low.exact_angles(m0.barycenters()))
        inner = interior_elements(m0)
        if not inner.any():
            inner = np.ones(m0.n_elements, bool)
        match = float(np.mean(probe.counts[inner] == exact0.shape[1]))

        stage = "step3"
        m1 = intermediate_mesh(m0, n_max, min_wave_speed(medium), wt)
        f1 = f0 if m1 is m0 else _lowfreq_field(low, m1, wt, cfg)[0]

        stage = "step4"
        inherited = interpolate_ray_field(probe, m1)
        if cfg.angle_source == "post":
            learned, infos = refine_mesh(f1, inherited, wt, medium, cfg.max_iter)
        else:
            learned, infos = inherited, []
        errs, mism = angle_errors(learned, low.exact_angles)

        stage = "step5"
        m = refine_to(m1, 1.0 / omega)
        if cfg.angle_source == "exact":
            rf = exact_ray_field(m, high.exact_angles)
            max_err = 0.0
        else:
            rf = interpolate_ray_field(learned, m)
            max_err = float(errs.max())
        rel, det = global_projection_error(high.wave, m, rf, omega, high.medium, return_details=True,
                                           strict=False)
    except PipelineError:
        raise
    except (ArithmeticError, ValueError, FieldDomainError, np.linalg.LinAlgError, RuntimeError) as exc:
        raise PipelineError(stage, f"{type(exc).__name__}: {exc}") from exc

    out.meshes = {"h0": m0, "h_tilde": m1, "h": m}
    out.probe, out.post, out.fine, out.refine_info, out.angle_errors = probe, learned, rf, infos, errs
    row = ConvergenceRow(
        omega=omega,
        h=m.h,
        dofs=int(det["dofs"]),
        max_angle_error=max_err,
        rel_l2_error=float(rel),
        dls_max_iters=max((r["iters"] for r in infos), default=0),
        wall_time=time.perf_counter() - t0,
        omega_tilde=wt,
        h0=m0.h,
        h_tilde=m1.h,
        n_max=n_max,
        count_match_fraction=match,
        angle_mismatches=int(mism.sum()),
        refine_failures=sum(r["failed"] for r in infos),
        merged_rays=sum(r["merged"] for r in infos),
        ill_conditioned=int(det["ill_conditioned"]),
        lowfreq_error=lf_err,
    )
    return row, out


def run_pipeline(cfg: PipelineConfig, keep_stages: bool = False):
    """Run every frequency in order; a failing frequency yields an error row.

    Returns the rows, and the per-frequency :class:`StageResult` list when
    ``keep_stages`` is set.
    """
    rows, stages = [], []
    for i, omega in enumerate(cfg.omegas):
        t0 = time.perf_counter()
        try:
            row, st = run_single(cfg, i)
        except PipelineError as exc:
            log.warning("omega=%g failed at %s", omega, exc)
            row, st = ConvergenceRow.failed(omega, str(exc), time.perf_counter() - t0,
                                            omega_tilde=cfg.omega_tilde_for(i)), None
        log.info("omega=%g angle=%.4g l2=%.4g", omega, row.max_angle_error, row.rel_l2_error)
        rows.append(row)
        stages.append(st)
    return (rows, stages) if keep_stages else rows


# -- reporting -----------------------------------------------------------------


def convergence_orders(omegas: Sequence[float], errors: Sequence[float]) -> list[float]:
    """Pairwise orders ``-log(E2/E1) / log(w2/w1)``, positive for decay.

    Pairs with a non-finite or non-positive error give NaN.
    """
    out = []
    for (w1, e1), (w2, e2) in zip(zip(omegas, errors), zip(omegas[1:], errors[1:])):
        ok = all(np.isfinite(v) and v > 0 for v in (e1, e2)) and w1 != w2
        out.append(-math.log(e2 / e1) / math.log(w2 / w1) if ok else math.nan)
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(rows: Sequence[ConvergenceRow]) -> str:
    omegas = [r.omega for r in rows]
    a_ord = convergence_orders(omegas, [r.max_angle_error for r in rows])
    l_ord = convergence_orders(omegas, [r.rel_l2_error for r in rows])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_ROW_FIELDS + ["angle_order", "l2_order"])
    for i, r in enumerate(rows):
        extra = ["", ""] if i == 0 else [_fmt(a_ord[i - 1]), _fmt(l_ord[i - 1])]
        w.writerow([_fmt(getattr(r, k)) for k in _ROW_FIELDS] + extra)
    return buf.getvalue()


def read_csv(path: str | Path) -> list[ConvergenceRow]:
    """Parse ``results.csv``; the derived order columns are dropped."""
    conv = {"float": float, "int": int, "str": str}
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(ConvergenceRow(**{k: conv[_ROW_TYPES[k]](rec[k]) for k in _ROW_FIELDS}))
    return rows


def _git_hash(payload: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


_PLOT = """\
# log-log convergence plot
set datafile separator ","
set logscale xy
set key top right
set xlabel "omega"
set ylabel "error"
set terminal pngcairo size 800,600
set output "{png}"
f(x) = {c:.6e} / x
plot "results.csv" using 1:4 skip 1 with linespoints title "max angle error", \\
     "results.csv" using 1:5 skip 1 with linespoints title "relative L2 error", \\
     f(x) with lines dashtype 2 title "slope -1"
"""


def emit_report(rows: Sequence[ConvergenceRow], outdir: str | Path, config: PipelineConfig | None = None) -> dict:
    """Write ``results.csv``, ``results.json`` and ``plot.gp`` into ``outdir``.

    The run hash covers the config and every row field except wall time, so
    identical runs share a hash.
    """
    if not rows:
        raise ValueError("emit_report needs at least one row")
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    text = _csv_text(rows)
    (out / "results.csv").write_text(text, encoding="utf-8")

    omegas = [r.omega for r in rows]
    records = [{k: _jsonable(v) for k, v in dataclasses.asdict(r).items()} for r in rows]
    stable = [{k: v for k, v in rec.items() if k != "wall_time"} for rec in records]
    cfg = config.to_dict() if config is not None else None
    payload = json.dumps({"config": cfg, "rows": stable}, sort_keys=True).encode("utf-8")
    doc = {
        "config": cfg,
        "rows": records,
        "angle_orders": [_jsonable(v) for v in convergence_orders(omegas, [r.max_angle_error for r in rows])],
        "l2_orders": [_jsonable(v) for v in convergence_orders(omegas, [r.rel_l2_error for r in rows])],
        "run_hash": _git_hash(payload),
    }
    (out / "results.json").write_text(json.dumps(doc, indent=2), encoding="utf-8")

    ref = next((r for r in rows if np.isfinite(r.rel_l2_error) and r.rel_l2_error > 0), None)
    c = ref.rel_l2_error * ref.omega if ref else 1.0
    (out / "plot.gp").write_text(_PLOT.format(png="convergence.png", c=c), encoding="utf-8")
    return doc
