"""Plane-wave bases on mesh elements and element-wise L2 best approximation.

Every basis function has the form

    phi(r) = (1 + g . (r - r0)) exp(i kappa d . (r - r0)),

with ``r0`` the element barycenter, ``kappa = omega sqrt(xi(r0))``, a unit
direction ``d`` and an amplitude slope ``g``. Ray-adapted spaces use two
functions per direction with ``g = +d_perp`` and ``g = -d_perp``; the
classical plane-wave fan uses ``g = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PlaneWaveBasis",
    "LocalProjection",
    "ProjectionError",
    "build_basis",
    "gopw_basis",
    "fan_basis",
    "gauss_points",
    "quad_points_per_axis",
    "element_quadrature",
    "local_l2_project",
    "global_projection_error",
]

_DUP_TOL = 1e-10
_COND_MAX = 1e12


def quad_points_per_axis(omega: float, h: float, kappa_scale: float = 1.0) -> int:
    """``max(4, 2 ceil(k h / pi) + 4)`` with ``k = kappa_scale * omega``."""
    return max(4, 2 * math.ceil(kappa_scale * omega * h / math.pi) + 4)


def gauss_points(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on ``[0, 1]``."""
    x, w = np.polynomial.legendre.leggauss(int(n))
    return 0.5 * (x + 1.0), 0.5 * w


def element_quadrature(mesh, n: int, index=None) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss points ``(E, n*n, 2)`` and weights ``(n*n,)`` on elements.

    The weights include the element area.
    """
    t, w = gauss_points(n)
    if index is None:
        index = np.arange(mesh.n_elements)
    index = np.asarray(index)
    ix, iy = index % mesh.nx, index // mesh.nx
    x0 = mesh.domain[0] + ix * mesh.dx
    y0 = mesh.domain[2] + iy * mesh.dy
    X, Y = np.meshgrid(t * mesh.dx, t * mesh.dy, indexing="ij")
    local = np.stack([X.ravel(), Y.ravel()], axis=-1)
    pts = np.stack([x0, y0], axis=-1)[:, None, :] + local[None]
    W = np.outer(w, w).ravel() * mesh.dx * mesh.dy
    return pts, W


@dataclass
class PlaneWaveBasis:
    """Batched plane-wave basis with ``m`` slots per element.

    Attributes
    ----------
    centers : (E, 2) array
        Expansion points ``r0``.
    kappa : (E,) array
        Wavenumbers ``omega sqrt(xi(r0))``.
    directions : (E, m, 2) array
        Unit propagation directions.
    amp_grad : (E, m, 2) array
        Amplitude slopes ``g``.
    mask : (E, m) bool array
        Active slots; inactive slots evaluate to zero.
    omega : float
    """

    centers: np.ndarray
    kappa: np.ndarray
    directions: np.ndarray
    amp_grad: np.ndarray
    mask: np.ndarray
    omega: float
    kind: str = "custom"

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        E = len(self.centers)
        self.kappa = np.asarray(self.kappa, dtype=float).reshape(E)
        self.directions = np.asarray(self.directions, dtype=float).reshape(E, -1, 2)
        m = self.directions.shape[1]
        self.amp_grad = np.asarray(self.amp_grad, dtype=float).reshape(E, m, 2)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(E, m)

    @property
    def n_elements(self) -> int:
        return len(self.centers)

    @property
    def m(self) -> int:
        return self.directions.shape[1]

    @property
    def counts(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    @property
    def dim(self) -> int:
        return int(self.mask.sum())

    def evaluate(self, elem, points) -> tuple[np.ndarray, np.ndarray]:
        """Values ``(P, m)`` and gradients ``(P, m, 2)`` at points of given elements."""
        elem = np.asarray(elem)
        p = np.asarray(points, dtype=float)
        delta = p - self.centers[elem]
        d = self.directions[elem]
        g = self.amp_grad[elem]
        k = self.kappa[elem]
        e = np.exp(1j * k[:, None] * np.einsum("pmi,pi->pm", d, delta))
        e = np.where(self.mask[elem], e, 0.0)
        amp = 1.0 + np.einsum("pmi,pi->pm", g, delta)
        vals = amp * e
        grads = g * e[..., None] + 1j * k[:, None, None] * d * vals[..., None]
        return vals, grads

    def element_values(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate element ``e``'s basis at ``pts[e]``; ``pts`` is ``(E, Q, 2)``."""
        E, Q, _ = pts.shape
        elem = np.repeat(np.arange(E), Q)
        v, g = self.evaluate(elem, pts.reshape(-1, 2))
        return v.reshape(E, Q, -1), g.reshape(E, Q, -1, 2)

    def subset(self, index) -> "PlaneWaveBasis":
        index = np.asarray(index)
        return PlaneWaveBasis(
            self.centers[index],
            self.kappa[index],
            self.directions[index],
            self.amp_grad[index],
            self.mask[index],
            self.omega,
            self.kind,
        )

    # invariants used by tests and the solver
    def phase_gradient(self) -> np.ndarray:
        """``grad tau`` per slot, ``(E, m, 2)``; ``omega grad tau = kappa d``."""
        return (self.kappa / self.omega)[:, None, None] * self.directions

    def to_arrays(self) -> dict:
        return {
            "centers": self.centers,
            "kappa": self.kappa,
            "directions": self.directions,
            "amp_grad": self.amp_grad,
            "mask": self.mask.astype(float),
        }

    @classmethod
    def from_arrays(cls, arrays: dict, omega: float, kind: str = "custom") -> "PlaneWaveBasis":
        return cls(
            arrays["centers"],
            arrays["kappa"],
            arrays["directions"],
            arrays["amp_grad"],
            np.asarray(arrays["mask"]) > 0.5,
            omega,
            kind,
        )


def _check_distinct(angles: np.ndarray) -> None:
    a = np.sort(np.mod(angles, 2 * np.pi))
    if len(a) > 1:
        gaps = np.diff(np.concatenate([a, a[:1] + 2 * np.pi]))
        if np.min(gaps) < _DUP_TOL:
            raise ValueError("duplicate ray angles in basis construction")


def _gopw_slots(angles: np.ndarray):
    d = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    perp = np.stack([np.sin(angles), -np.cos(angles)], axis=-1)
    directions = np.repeat(d, 2, axis=-2)
    sign = np.tile([1.0, -1.0], angles.shape[-1])
    amp = np.repeat(perp, 2, axis=-2) * sign[..., None]
    return directions, amp


def build_basis(center, ray_angles, omega: float, xi_at_r0: float) -> PlaneWaveBasis:
    """Ray-adapted basis ``p_j exp(i omega tau_n)`` on one element.

    Slot ``2n`` carries ``p_1 = 1 + d_perp . (r - r0)`` and slot ``2n + 1``
    carries ``p_2 = 1 - d_perp . (r - r0)``, with ``d_perp = (sin, -cos)``.
    """
    if not xi_at_r0 > 0:
        raise ValueError("xi(r0) must be positive")
    angles = np.mod(np.asarray(ray_angles, dtype=float).ravel(), 2 * np.pi)
    _check_distinct(angles)
    directions, amp = _gopw_slots(angles)
    m = 2 * len(angles)
    return PlaneWaveBasis(
        np.asarray(center, dtype=float)[None],
        [omega * math.sqrt(xi_at_r0)],
        directions[None],
        amp[None],
        np.ones((1, m), bool),
        float(omega),
        "gopw",
    )


def gopw_basis(mesh, ray_field, omega: float, medium) -> PlaneWaveBasis:
    """Ray-adapted basis on every element of ``mesh`` from ``ray_field``."""
    if ray_field.mesh.n_elements != mesh.n_elements:
        raise ValueError("ray field lives on another mesh")
    centers = mesh.barycenters()
    n_max = max(1, ray_field.n_max)
    angles = np.zeros((mesh.n_elements, n_max))
    angles[:, : ray_field.n_max] = np.nan_to_num(ray_field.angles)
    counts = ray_field.counts
    active = np.arange(n_max)[None, :] < counts[:, None]
    for e in np.flatnonzero(counts > 1):
        _check_distinct(angles[e, : counts[e]])
    directions, amp = _gopw_slots(angles)
    kappa = omega * np.sqrt(medium.xi(centers))
    return PlaneWaveBasis(centers, kappa, directions, amp, np.repeat(active, 2, axis=1), float(omega), "gopw")


def fan_basis(mesh, p: int, omega: float, medium) -> PlaneWaveBasis:
    """Classical plane waves in ``p`` equally spaced directions on every element."""
    if p < 1:
        raise ValueError("fan size must be positive")
    centers = mesh.barycenters()
    th = 2 * np.pi * np.arange(p) / p
    d = np.stack([np.cos(th), np.sin(th)], axis=-1)
    E = mesh.n_elements
    return PlaneWaveBasis(
        centers,
        omega * np.sqrt(medium.xi(centers)),
        np.broadcast_to(d, (E, p, 2)).copy(),
        np.zeros((E, p, 2)),
        np.ones((E, p), bool),
        float(omega),
        "fan",
    )


class ProjectionError(ArithmeticError):
    """Ill-conditioned local projection."""


@dataclass(frozen=True)
class LocalProjection:
    coefficients: np.ndarray
    l2_error: float
    norm: float
    measure: float
    condition: float


def _batched_lstsq(V: np.ndarray, b: np.ndarray, active: np.ndarray):
    """Least squares ``min |V c - b|`` per batch entry via Householder QR.

    ``V`` is ``(B, Q, m)``, ``b`` is ``(B, Q)`` and ``active`` ``(B, m)``
    marks usable columns. Inactive columns are replaced by unit vectors in
    ``m`` appended zero rows, so they decouple from the data and carry zero
    coefficients. Their scale is the largest active column norm, which leaves
    the returned 2-norm condition number equal to that of the active block.
    """
    B, Q, m = V.shape
    V = np.where(active[:, None, :], V, 0.0)
    scale = np.max(np.linalg.norm(V, axis=1), axis=1)
    scale = np.where(scale > 0, scale, 1.0)
    pad = np.where(active[:, :, None], 0.0, np.eye(m)[None] * scale[:, None, None])
    V = np.concatenate([V, pad.transpose(0, 2, 1)], axis=1)
    b = np.concatenate([b, np.zeros((B, m), b.dtype)], axis=1)
    q, r = np.linalg.qr(V)
    qb = np.einsum("bqm,bq->bm", q.conj(), b)
    c = np.linalg.solve(r, qb[..., None])[..., 0]
    c = np.where(active, c, 0.0)
    resid = b - np.einsum("bqm,bm->bq", V, c)
    err = np.sqrt(np.sum(np.abs(resid) ** 2, axis=1))
    s = np.linalg.svd(r, compute_uv=False)
    cond = s[:, 0] / np.maximum(s[:, -1], 1e-300)
    return c, err, cond


def _quad_order(omega: float, mesh, medium, quad_order: int | None) -> int:
    if quad_order is not None:
        return int(quad_order)
    return quad_points_per_axis(omega, mesh.h)


def local_l2_project(u, basis: PlaneWaveBasis, box, quad_order: int | None = None) -> LocalProjection:
    """Best ``L2(K)`` approximation of ``u`` from a single-element basis.

    ``box`` is the element rectangle ``(x0, x1, y0, y1)``. The default
    quadrature uses ``max(4, 2 ceil(k h / pi) + 4)`` Gauss points per axis with
    ``k`` the basis wavenumber.
    """
    if basis.n_elements != 1:
        raise ValueError("local projection needs a single-element basis")
    x0, x1, y0, y1 = box
    h = max(x1 - x0, y1 - y0)
    n = quad_order or quad_points_per_axis(float(basis.kappa[0]), h)
    t, w = gauss_points(n)
    X, Y = np.meshgrid(x0 + t * (x1 - x0), y0 + t * (y1 - y0), indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
    W = np.outer(w, w).ravel() * (x1 - x0) * (y1 - y0)
    sw = np.sqrt(W)
    vals, _ = basis.evaluate(np.zeros(len(pts), int), pts)
    uv = np.asarray(u.value(pts), dtype=complex)
    c, err, cond = _batched_lstsq((vals * sw[:, None])[None], (uv * sw)[None], basis.mask)
    if cond[0] ** 2 > _COND_MAX:
        raise ProjectionError(f"Gram matrix condition {cond[0] ** 2:.3g} exceeds {_COND_MAX:g}")
    return LocalProjection(c[0], float(err[0]), float(np.sqrt(np.sum(W * np.abs(uv) ** 2))),
                           (x1 - x0) * (y1 - y0), float(cond[0] ** 2))


def global_projection_error(u, mesh, ray_field, omega: float, medium, quad_order: int | None = None,
                            chunk: int = 8192, return_details: bool = False, strict: bool = True):
    """Relative ``L2(Omega)`` error of the element-wise best approximation of ``u``.

    The space is the ray-adapted basis built from ``ray_field`` on ``mesh``.
    Elements without rays contribute their full norm to the error. With
    ``strict`` an element whose Gram condition exceeds ``1e12`` raises
    :class:`ProjectionError`; otherwise such elements are only counted in
    ``details["ill_conditioned"]`` (the QR solve itself stays stable).
    """
    basis = gopw_basis(mesh, ray_field, omega, medium)
    n = _quad_order(omega, mesh, medium, quad_order)
    t, w = gauss_points(n)
    X, Y = np.meshgrid(t * mesh.dx, t * mesh.dy, indexing="ij")
    local = np.stack([X.ravel(), Y.ravel()], axis=-1)
    sw = np.sqrt(np.outer(w, w).ravel() * mesh.dx * mesh.dy)
    err2 = 0.0
    norm2 = 0.0
    worst = 0.0
    bad = 0
    E = mesh.n_elements
    for start in range(0, E, chunk):
        idx = np.arange(start, min(E, start + chunk))
        ix, iy = idx % mesh.nx, idx // mesh.nx
        corner = np.stack([mesh.domain[0] + ix * mesh.dx, mesh.domain[2] + iy * mesh.dy], axis=-1)
        pts = corner[:, None, :] + local[None]
        uv = np.asarray(u.value(pts), dtype=complex) * sw
        norm2 += float(np.sum(np.abs(uv) ** 2))
        sub = basis.subset(idx)
        vals, _ = sub.element_values(pts)
        c, err, cond = _batched_lstsq(vals * sw[None, :, None], uv, sub.mask)
        empty = ~sub.mask.any(axis=1)
        err = np.where(empty, np.sqrt(np.sum(np.abs(uv) ** 2, axis=1)), err)
        cond = np.where(empty, 1.0, cond)
        worst = max(worst, float(np.max(cond)) ** 2)
        bad += int(np.sum(cond**2 > _COND_MAX))
        err2 += float(np.sum(err**2))
    if strict and worst > _COND_MAX:
        raise ProjectionError(f"Gram matrix condition {worst:.3g} exceeds {_COND_MAX:g}")
    rel = math.sqrt(err2 / norm2) if norm2 > 0 else 0.0
    if return_details:
        return rel, {"abs_error": math.sqrt(err2), "norm": math.sqrt(norm2), "quad": n,
                     "dofs": basis.dim, "max_gram_condition": worst, "ill_conditioned": bad}
    return rel
