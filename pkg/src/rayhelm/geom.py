"""Uniform rectangular meshes, nested refinement and per-element ray data."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Mesh",
    "RayField",
    "build_mesh",
    "refine_to",
    "parent_index",
    "interpolate_ray_field",
    "fit_circle_center",
]

# slack for ratios such as 1 / (1/20) that should be exact integers
_CEIL_TOL = 1e-9


def _ceil(ratio: float) -> int:
    return max(1, math.ceil(ratio - _CEIL_TOL))


@dataclass(frozen=True)
class Mesh:
    """Uniform ``nx`` by ``ny`` grid of identical rectangles.

    Elements are numbered row-major with x running fastest:
    ``index = iy * nx + ix``.
    """

    domain: tuple[float, float, float, float]
    nx: int
    ny: int

    def __post_init__(self):
        x0, x1, y0, y1 = self.domain
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"degenerate domain {self.domain}")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("element counts must be positive")
        object.__setattr__(self, "domain", tuple(float(v) for v in self.domain))

    @property
    def dx(self) -> float:
        return (self.domain[1] - self.domain[0]) / self.nx

    @property
    def dy(self) -> float:
        return (self.domain[3] - self.domain[2]) / self.ny

    @property
    def h(self) -> float:
        """Length of the longest element edge."""
        return max(self.dx, self.dy)

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    def barycenters(self, index=None) -> np.ndarray:
        if index is None:
            index = np.arange(self.n_elements)
        index = np.asarray(index)
        ix = index % self.nx
        iy = index // self.nx
        x = self.domain[0] + (ix + 0.5) * self.dx
        y = self.domain[2] + (iy + 0.5) * self.dy
        return np.stack([x, y], axis=-1)

    def locate(self, points) -> np.ndarray:
        """Index of the element containing each point (half-open boxes).

        Points on the far domain edges are assigned to the last row/column.
        Points outside the domain get ``-1``.
        """
        p = np.asarray(points, dtype=float)
        x0, x1, y0, y1 = self.domain
        ix = np.floor((p[..., 0] - x0) / self.dx).astype(np.int64)
        iy = np.floor((p[..., 1] - y0) / self.dy).astype(np.int64)
        eps = 1e-12 * max(x1 - x0, y1 - y0)
        ix = np.where((ix == self.nx) & (p[..., 0] <= x1 + eps), self.nx - 1, ix)
        iy = np.where((iy == self.ny) & (p[..., 1] <= y1 + eps), self.ny - 1, iy)
        inside = (ix >= 0) & (ix < self.nx) & (iy >= 0) & (iy < self.ny)
        return np.where(inside, iy * self.nx + ix, -1)

    def element_box(self, index: int) -> tuple[float, float, float, float]:
        ix, iy = index % self.nx, index // self.nx
        xa = self.domain[0] + ix * self.dx
        ya = self.domain[2] + iy * self.dy
        return (xa, xa + self.dx, ya, ya + self.dy)

    def to_dict(self) -> dict:
        return {"domain": list(self.domain), "nx": self.nx, "ny": self.ny}

    @classmethod
    def from_dict(cls, d: dict) -> "Mesh":
        return cls(tuple(d["domain"]), int(d["nx"]), int(d["ny"]))

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def build_mesh(domain: Sequence[float], target_h: float) -> Mesh:
    """Uniform mesh whose element edges do not exceed ``target_h``."""
    if not target_h > 0:
        raise ValueError("target_h must be positive")
    x0, x1, y0, y1 = (float(v) for v in domain)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate domain {tuple(domain)}")
    return Mesh((x0, x1, y0, y1), _ceil((x1 - x0) / target_h), _ceil((y1 - y0) / target_h))


def refine_to(coarse: Mesh, target_h: float) -> Mesh:
    """Split every element of ``coarse`` into ``k x k`` children.

    ``k = ceil(coarse.h / target_h)``.
    """
    if not target_h < coarse.h:
        raise ValueError(f"target_h={target_h} must be below coarse.h={coarse.h}")
    k = _ceil(coarse.h / target_h)
    return Mesh(coarse.domain, coarse.nx * k, coarse.ny * k)


def is_refinement(fine: Mesh, coarse: Mesh) -> bool:
    return (
        np.allclose(fine.domain, coarse.domain, rtol=0, atol=1e-12)
        and fine.nx % coarse.nx == 0
        and fine.ny % coarse.ny == 0
    )


def parent_index(fine: Mesh, coarse: Mesh) -> np.ndarray:
    """Coarse element containing each fine barycenter."""
    if not is_refinement(fine, coarse):
        raise ValueError("meshes are not related by uniform refinement")
    return coarse.locate(fine.barycenters())


@dataclass
class RayField:
    """Ray count, sorted angles and complex amplitudes per mesh element.

    Stored padded: ``angles`` and ``amplitudes`` have shape ``(E, n_max)``
    and entries past ``counts[e]`` are NaN / 0.
    """

    mesh: Mesh
    counts: np.ndarray
    angles: np.ndarray
    amplitudes: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        E = self.mesh.n_elements
        if self.counts.shape != (E,):
            raise ValueError("one ray count per element required")
        self.angles = np.asarray(self.angles, dtype=float).reshape(E, -1)
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex).reshape(E, -1)
        if self.angles.shape != self.amplitudes.shape:
            raise ValueError("angles and amplitudes must have the same layout")
        if self.counts.max(initial=0) > self.angles.shape[1]:
            raise ValueError("ray count exceeds stored angles")

    @property
    def n_max(self) -> int:
        return self.angles.shape[1]

    def element(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        n = self.counts[index]
        return self.angles[index, :n].copy(), self.amplitudes[index, :n].copy()

    @classmethod
    def from_lists(cls, mesh: Mesh, angles: Sequence, amplitudes: Sequence | None = None, meta=None):
        """Build from per-element sequences; angles are wrapped and sorted."""
        E = mesh.n_elements
        if len(angles) != E:
            raise ValueError("one angle list per element required")
        if amplitudes is None:
            amplitudes = [np.ones(len(a), complex) for a in angles]
        counts = np.array([len(a) for a in angles], dtype=np.int64)
        n_max = int(counts.max(initial=0))
        th = np.full((E, n_max), np.nan)
        am = np.zeros((E, n_max), complex)
        for e, (a, b) in enumerate(zip(angles, amplitudes)):
            a = np.mod(np.asarray(a, dtype=float), 2 * np.pi)
            b = np.asarray(b, dtype=complex)
            if a.shape != b.shape:
                raise ValueError(f"element {e}: angle/amplitude length mismatch")
            order = np.argsort(a)
            th[e, : len(a)] = a[order]
            am[e, : len(a)] = b[order]
        return cls(mesh, counts, th, am, dict(meta or {}))

    @classmethod
    def uniform(cls, mesh: Mesh, angles: Sequence[float], amplitudes: Sequence[complex] | None = None):
        """Same rays on every element."""
        a = np.mod(np.asarray(angles, dtype=float), 2 * np.pi)
        b = np.ones(len(a), complex) if amplitudes is None else np.asarray(amplitudes, complex)
        order = np.argsort(a)
        E = mesh.n_elements
        return cls(
            mesh,
            np.full(E, len(a)),
            np.tile(a[order], (E, 1)),
            np.tile(b[order], (E, 1)),
        )

    def distinct_angles(self) -> set[float]:
        mask = np.arange(self.n_max)[None, :] < self.counts[:, None]
        return set(self.angles[mask].tolist())

    # -- JSON ---------------------------------------------------------------
    def to_records(self) -> list[dict]:
        bary = self.mesh.barycenters()
        out = []
        for e in range(self.mesh.n_elements):
            a, b = self.element(e)
            out.append(
                {
                    "element_index": e,
                    "barycenter": [float(bary[e, 0]), float(bary[e, 1])],
                    "angles": [float(v) for v in a],
                    "amplitudes": [[float(v.real), float(v.imag)] for v in b],
                }
            )
        return out

    def to_json(self, path: str | Path) -> None:
        doc = {"mesh": self.mesh.to_dict(), "meta": self.meta, "elements": self.to_records()}
        Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")

    @classmethod
    def from_json(cls, path: str | Path, mesh: Mesh | None = None) -> "RayField":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(doc, list):
            records, meta = doc, {}
            if mesh is None:
                raise ValueError("a bare record array needs an explicit mesh")
        else:
            records, meta = doc["elements"], doc.get("meta", {})
            mesh = mesh or Mesh.from_dict(doc["mesh"])
        angles: list = [[] for _ in range(mesh.n_elements)]
        amps: list = [[] for _ in range(mesh.n_elements)]
        for rec in records:
            e = int(rec["element_index"])
            angles[e] = rec["angles"]
            amps[e] = [complex(re, im) for re, im in rec["amplitudes"]]
        return cls.from_lists(mesh, angles, amps, meta)


def interpolate_ray_field(coarse_field: RayField, fine: Mesh) -> RayField:
    """Every fine element inherits the rays of its parent, verbatim."""
    parents = parent_index(fine, coarse_field.mesh)
    return RayField(
        fine,
        coarse_field.counts[parents],
        coarse_field.angles[parents],
        coarse_field.amplitudes[parents],
        dict(coarse_field.meta),
    )


def fit_circle_center(center, radius: float, domain) -> np.ndarray:
    """Move ``center`` inward until the circle of ``radius`` lies in ``domain``.

    ``domain=None`` means unbounded. Raises if the circle cannot fit at all.
    """
    c = np.array(center, dtype=float)
    if domain is None:
        return c
    x0, x1, y0, y1 = domain
    if 2 * radius > min(x1 - x0, y1 - y0):
        raise ValueError(f"sampling circle of radius {radius} does not fit in {domain}")
    c[0] = min(max(c[0], x0 + radius), x1 - radius)
    c[1] = min(max(c[1], y0 + radius), y1 - radius)
    return c
