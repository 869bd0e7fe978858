"""Media and evaluable complex wavefields.

All evaluators are vectorised: ``points`` is any array whose last axis has
length 2, and results have the leading shape of ``points``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "FieldDomainError",
    "Medium",
    "Wavefield",
    "Ray",
    "RaySum",
    "DiscreteField",
    "Benchmark",
    "plane_wave",
    "example1_field",
    "example2_field",
    "example1_exact_angles",
    "example2_exact_angles",
    "fd_gradient",
    "unit_square",
]

unit_square = (0.0, 1.0, 0.0, 1.0)


class FieldDomainError(ValueError):
    """A field was evaluated where it is not defined."""


def _pts(points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    if p.shape[-1] != 2:
        raise ValueError("points must have a trailing axis of length 2")
    return p


def fd_gradient(fun: Callable, points, step: float = 1e-4) -> np.ndarray:
    """Sixth-order central-difference gradient of a scalar field."""
    p = _pts(points)
    weights = ((1, 45.0), (2, -9.0), (3, 1.0))
    out = []
    for axis in range(2):
        e = np.zeros(2)
        e[axis] = step
        acc = 0.0
        for m, w in weights:
            acc = acc + w * (fun(p + m * e) - fun(p - m * e))
        out.append(acc / (60.0 * step))
    return np.stack(out, axis=-1)


@dataclass(frozen=True)
class Medium:
    """Wave speed ``c`` and slowness squared ``xi = 1 / c**2``."""

    c: Callable[[np.ndarray], np.ndarray]
    grad_c: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = "medium"

    def xi(self, points) -> np.ndarray:
        return 1.0 / self.c(_pts(points)) ** 2

    def grad_xi(self, points) -> np.ndarray:
        p = _pts(points)
        if self.grad_c is None:
            return fd_gradient(self.xi, p)
        c = self.c(p)
        return -2.0 * self.grad_c(p) / c[..., None] ** 3

    @classmethod
    def constant(cls, c0: float = 1.0) -> "Medium":
        if not c0 > 0:
            raise ValueError("wave speed must be positive")
        return cls(
            lambda p: np.full(np.shape(p)[:-1], float(c0)),
            lambda p: np.zeros(np.shape(p)),
            name=f"constant({c0:g})",
        )


class Wavefield:
    """An evaluable complex field ``u(r)`` at angular frequency ``omega``.

    Subclasses provide ``value`` and ``gradient``. ``domain`` is the
    axis-aligned box ``(x0, x1, y0, y1)`` where evaluation is allowed, or
    ``None`` when the field is defined on the whole plane.
    """

    omega: float
    domain: tuple[float, float, float, float] | None = None

    def value(self, points) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, points) -> np.ndarray:
        raise NotImplementedError

    def radial_derivative(self, center, radius, theta) -> np.ndarray:
        """``d/dr u(center + r * d_theta)`` at ``r = radius``."""
        theta = np.asarray(theta, dtype=float)
        d = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        g = self.gradient(np.asarray(center, dtype=float) + radius * d)
        return np.sum(g * d, axis=-1)

    def contains_circle(self, center, radius: float, tol: float = 1e-12) -> bool:
        if self.domain is None:
            return True
        x0, x1, y0, y1 = self.domain
        cx, cy = center
        return (
            cx - radius >= x0 - tol
            and cx + radius <= x1 + tol
            and cy - radius >= y0 - tol
            and cy + radius <= y1 + tol
        )


@dataclass(frozen=True)
class Ray:
    """One geometric-optics term ``A(r) exp(i omega phi(r))``."""

    phase: Callable[[np.ndarray], np.ndarray]
    phase_grad: Callable[[np.ndarray], np.ndarray]
    amplitude: Callable[[np.ndarray], np.ndarray]
    amplitude_grad: Callable[[np.ndarray], np.ndarray]


class RaySum(Wavefield):
    """Finite superposition of geometric-optics terms."""

    def __init__(self, omega: float, rays: Sequence[Ray], domain=None, check: Callable | None = None):
        if not omega > 0:
            raise ValueError("omega must be positive")
        self.omega = float(omega)
        self.rays = tuple(rays)
        self.domain = domain
        self._check = check

    @property
    def n_rays(self) -> int:
        return len(self.rays)

    def _prep(self, points):
        p = _pts(points)
        if self._check is not None:
            self._check(p)
        return p

    def value(self, points) -> np.ndarray:
        p = self._prep(points)
        out = np.zeros(p.shape[:-1], complex)
        for ray in self.rays:
            out = out + ray.amplitude(p) * np.exp(1j * self.omega * ray.phase(p))
        return out

    def gradient(self, points) -> np.ndarray:
        p = self._prep(points)
        out = np.zeros(p.shape, complex)
        for ray in self.rays:
            e = np.exp(1j * self.omega * ray.phase(p))[..., None]
            a = ray.amplitude(p)[..., None]
            out = out + (ray.amplitude_grad(p) + 1j * self.omega * a * ray.phase_grad(p)) * e
        return out

    def ray_angles(self, points) -> np.ndarray:
        """Direction angle in ``[0, 2pi)`` of every phase gradient, shape ``(..., N)``."""
        p = self._prep(points)
        cols = []
        for ray in self.rays:
            g = ray.phase_grad(p)
            cols.append(np.mod(np.arctan2(g[..., 1], g[..., 0]), 2 * np.pi))
        return np.sort(np.stack(cols, axis=-1), axis=-1)

    def eikonal_residual(self, points, medium: Medium) -> np.ndarray:
        """``max_n | |grad phi_n|^2 - xi |`` at each point."""
        p = self._prep(points)
        xi = medium.xi(p)
        res = [np.abs(np.sum(r.phase_grad(p) ** 2, axis=-1) - xi) for r in self.rays]
        return np.max(np.stack(res, axis=-1), axis=-1)


class DiscreteField(Wavefield):
    """Piecewise plane-wave expansion of a DG solution.

    Each point is evaluated with the basis of the element containing it, so
    values and gradients are exact element by element.
    """

    def __init__(self, solution):
        self.solution = solution
        self.mesh = solution.mesh
        self.omega = float(solution.omega)
        self.domain = self.mesh.domain

    def _eval(self, points):
        p = _pts(points)
        flat = p.reshape(-1, 2)
        elem = self.mesh.locate(flat)
        if np.any(elem < 0):
            raise FieldDomainError("point outside the solution domain")
        vals, grads = self.solution.basis.evaluate(elem, flat)
        coef = self.solution.coefficients_by_element()[elem]
        return p, vals, grads, coef

    def value(self, points) -> np.ndarray:
        p, vals, _, coef = self._eval(points)
        return np.sum(vals * coef, axis=-1).reshape(p.shape[:-1])

    def gradient(self, points) -> np.ndarray:
        p, _, grads, coef = self._eval(points)
        return np.sum(grads * coef[..., None], axis=-2).reshape(p.shape)


def discrete_field(dg_solution) -> DiscreteField:
    return DiscreteField(dg_solution)


__all__.append("discrete_field")


class Benchmark(NamedTuple):
    """Medium, closed-form field, impedance data ``g`` and source ``f``."""

    medium: Medium
    wave: RaySum
    g: Callable
    f: Callable | None
    exact_angles: Callable


def _impedance_data(wave: Wavefield, medium: Medium):
    def g(points, normals):
        p = _pts(points)
        k = wave.omega * np.sqrt(medium.xi(p))
        dn = np.sum(wave.gradient(p) * np.asarray(normals, float), axis=-1)
        return dn + 1j * k * wave.value(p)

    return g


def plane_wave(omega: float, theta: float, amplitude: complex = 1.0) -> RaySum:
    """``a * exp(i omega d_theta . r)`` in the medium ``c = 1``."""
    d = np.array([np.cos(theta), np.sin(theta)])
    a = complex(amplitude)
    ray = Ray(
        phase=lambda p: p @ d,
        phase_grad=lambda p: np.broadcast_to(d, p.shape),
        amplitude=lambda p: np.full(p.shape[:-1], a),
        amplitude_grad=lambda p: np.zeros(p.shape, complex),
    )
    return RaySum(omega, [ray])


def plane_wave_benchmark(omega: float, theta: float, amplitude: complex = 1.0) -> Benchmark:
    wave = plane_wave(omega, theta, amplitude)
    medium = Medium.constant(1.0)
    return Benchmark(
        medium,
        wave,
        _impedance_data(wave, medium),
        lambda p: np.zeros(np.shape(p)[:-1], complex),
        lambda p: np.full(np.shape(p)[:-1] + (1,), np.mod(theta, 2 * np.pi)),
    )


__all__.append("plane_wave_benchmark")


# -- Example 1: Gaussian converging lens, u = c exp(i omega x y) ---------------

_LENS_CENTER = np.array([0.5, 0.5])


def _lens_gauss(p):
    d = p - _LENS_CENTER
    return np.exp(-32.0 * np.sum(d * d, axis=-1))


def lens_c(p):
    return 4.0 / 3.0 * (1.0 - _lens_gauss(p) / 8.0)


def lens_grad_c(p):
    d = p - _LENS_CENTER
    # d/dr of -(1/6) E with E = exp(-32 |d|^2)
    return (64.0 / 6.0) * _lens_gauss(p)[..., None] * d


def lens_laplacian_c(p):
    d = p - _LENS_CENTER
    rho2 = np.sum(d * d, axis=-1)
    return -(1.0 / 6.0) * (-128.0 + 4096.0 * rho2) * _lens_gauss(p)


def example1_exact_angles(points) -> np.ndarray:
    """Direction of grad(xy) = (y, x), shape ``(..., 1)``."""
    p = _pts(points)
    return np.mod(np.arctan2(p[..., 0], p[..., 1]), 2 * np.pi)[..., None]


def example1_field(omega: float) -> Benchmark:
    """Smooth converging lens with exact solution ``c(x, y) exp(i omega x y)``."""
    medium = Medium(lens_c, lens_grad_c, name="gaussian-lens")
    ray = Ray(
        phase=lambda p: p[..., 0] * p[..., 1],
        phase_grad=lambda p: np.stack([p[..., 1], p[..., 0]], axis=-1),
        amplitude=lambda p: lens_c(p).astype(complex),
        amplitude_grad=lambda p: lens_grad_c(p).astype(complex),
    )
    wave = RaySum(omega, [ray])

    def laplacian(p):
        p = _pts(p)
        c = lens_c(p)
        gc = lens_grad_c(p)
        gphi = np.stack([p[..., 1], p[..., 0]], axis=-1)
        e = np.exp(1j * omega * p[..., 0] * p[..., 1])
        # laplacian of xy vanishes
        return (
            lens_laplacian_c(p)
            + 2j * omega * np.sum(gc * gphi, axis=-1)
            - omega**2 * c * np.sum(gphi * gphi, axis=-1)
        ) * e

    def source(p):
        p = _pts(p)
        return -laplacian(p) - omega**2 * medium.xi(p) * wave.value(p)

    source.laplacian = laplacian
    return Benchmark(medium, wave, _impedance_data(wave, medium), source, example1_exact_angles)


# -- Example 2: constant gradient of slowness squared, two crossing rays -------

EX2_C0 = 1.0
EX2_G0 = np.array([0.1, -0.2])
EX2_R0 = np.array([-0.1, -0.1])


def _ex2_parts(p):
    d = p - EX2_R0
    g2 = float(EX2_G0 @ EX2_G0)
    cbar = EX2_C0 + d @ EX2_G0
    d2 = np.sum(d * d, axis=-1)
    disc = cbar**2 - g2 * d2
    if np.any(disc < 0) or np.any(cbar <= 0):
        raise FieldDomainError("example 2 phases are complex at the requested points")
    return d, g2, cbar, d2, np.sqrt(disc)


def _ex2_sigma(p, branch: int):
    """sigma_j and its gradient; ``branch`` is j in {1, 2}."""
    d, g2, cbar, d2, D = _ex2_parts(p)
    gD = (cbar[..., None] * EX2_G0 - g2 * d) / D[..., None]
    if branch == 1:
        # 2 (cbar - D) / g2 rewritten without cancellation
        s2 = 2.0 * d2 / (cbar + D)
        gs2 = 2.0 * (d - (d2 / (cbar + D))[..., None] * EX2_G0) / D[..., None]
    else:
        s2 = 2.0 * (cbar + D) / g2
        gs2 = 2.0 * (EX2_G0 + gD) / g2
    s = np.sqrt(s2)
    with np.errstate(divide="ignore", invalid="ignore"):
        gs = np.where(s[..., None] > 0, gs2 / (2.0 * s[..., None]), 0.0)
    return s, gs, cbar, g2


def ex2_phase(p, branch: int):
    s, _, cbar, g2 = _ex2_sigma(_pts(p), branch)
    return cbar * s - g2 * s**3 / 6.0


def ex2_phase_grad(p, branch: int):
    s, gs, cbar, g2 = _ex2_sigma(_pts(p), branch)
    return EX2_G0 * s[..., None] + (cbar - g2 * s**2 / 2.0)[..., None] * gs


def ex2_c(p):
    p = _pts(p)
    xi = EX2_C0**2 + 2.0 * (p - EX2_R0) @ EX2_G0
    return 1.0 / np.sqrt(xi)


def ex2_grad_c(p):
    c = ex2_c(p)
    # c = xi^(-1/2), grad xi = 2 G0
    return -0.5 * (c**3)[..., None] * (2.0 * EX2_G0)


def example2_exact_angles(points, step: float = 1e-4) -> np.ndarray:
    """Ray angles from sixth-order finite differences of both phases, sorted."""
    p = _pts(points)
    cols = []
    for j in (1, 2):
        g = fd_gradient(lambda q: ex2_phase(q, j), p, step)
        cols.append(np.mod(np.arctan2(g[..., 1], g[..., 0]), 2 * np.pi))
    return np.sort(np.stack(cols, axis=-1), axis=-1)


def example2_field(omega: float) -> Benchmark:
    """Two crossing rays in a medium with linear slowness squared."""
    medium = Medium(ex2_c, ex2_grad_c, name="linear-slowness-squared")

    def amp1(p):
        return 1.0 / (p[..., 0] * p[..., 1] + 1j)

    def amp1_grad(p):
        a = amp1(p)[..., None]
        return -np.stack([p[..., 1], p[..., 0]], axis=-1) * a**2

    def amp2(p):
        return 1.0 / (p[..., 0] ** 2 + p[..., 1] ** 2 + 1j)

    def amp2_grad(p):
        a = amp2(p)[..., None]
        return -2.0 * p * a**2

    rays = [
        Ray(lambda p: ex2_phase(p, 1), lambda p: ex2_phase_grad(p, 1), amp1, amp1_grad),
        Ray(lambda p: ex2_phase(p, 2), lambda p: ex2_phase_grad(p, 2), amp2, amp2_grad),
    ]
    wave = RaySum(omega, rays, check=_ex2_parts)
    return Benchmark(medium, wave, _impedance_data(wave, medium), None, example2_exact_angles)


def curved_wave(omega: float, quad=(0.3, 0.0, 0.0), slope=(0.6, 0.5), amp_grad=(0.3, -0.5)) -> Benchmark:
    """Single wave with quadratic phase in the medium ``c = 1 / |grad phi|``.

    ``phi = s1 x + s2 y + q1 x^2 + q2 x y + q3 y^2`` and
    ``A = 1 + a1 x + a2 y``. The eikonal equation holds exactly because the
    medium is defined from the phase.
    """
    s1, s2 = slope
    q1, q2, q3 = quad
    ag = np.asarray(amp_grad, dtype=complex)

    def phase(p):
        x, y = p[..., 0], p[..., 1]
        return s1 * x + s2 * y + q1 * x * x + q2 * x * y + q3 * y * y

    def phase_grad(p):
        x, y = p[..., 0], p[..., 1]
        return np.stack([s1 + 2 * q1 * x + q2 * y, s2 + q2 * x + 2 * q3 * y], axis=-1)

    def c(p):
        return 1.0 / np.linalg.norm(phase_grad(_pts(p)), axis=-1)

    def grad_c(p):
        p = _pts(p)
        g = phase_grad(p)
        H = np.array([[2 * q1, q2], [q2, 2 * q3]])
        n = np.linalg.norm(g, axis=-1)
        # grad(1/|g|) = -H g / |g|^3
        return -(g @ H) / n[..., None] ** 3

    ray = Ray(
        phase,
        phase_grad,
        lambda p: 1.0 + p @ ag,
        lambda p: np.broadcast_to(ag, p.shape),
    )
    medium = Medium(c, grad_c, name="curved-phase")
    wave = RaySum(omega, [ray])
    return Benchmark(medium, wave, _impedance_data(wave, medium), None, wave.ray_angles)


__all__.append("curved_wave")


def benchmark(example: str, omega: float, theta: float = np.pi / 4) -> Benchmark:
    """Look up a benchmark by id.

    Known ids: ``example1``, ``example2``, ``synthetic-plane-wave`` and
    ``synthetic-curved``.
    """
    if example == "example1":
        return example1_field(omega)
    if example == "example2":
        return example2_field(omega)
    if example == "synthetic-plane-wave":
        return plane_wave_benchmark(omega, theta)
    if example == "synthetic-curved":
        return curved_wave(omega)
    raise ValueError(f"unknown example {example!r}")


__all__.append("benchmark")
