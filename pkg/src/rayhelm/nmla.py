"""Circle-sampled microlocal analysis: low-accuracy ray directions.

The impedance quantity of a field is sampled on a small circle, expanded in
Fourier modes and divided by the plane-wave response of each mode. The result
is a sum of Dirichlet kernels peaked at the local ray directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .specfun import bessel_j_table

__all__ = [
    "CircleSamples",
    "FilteredSignal",
    "RayEstimate",
    "truncation_order",
    "sample_count",
    "sample_impedance",
    "fourier_coeffs",
    "filter_b",
    "dirichlet_kernel",
    "detect_peaks",
    "nmla_probe",
]

TWO_PI = 2.0 * np.pi
_I_POW = np.array([1, 1j, -1, -1j])


@dataclass(frozen=True)
class CircleSamples:
    center: np.ndarray
    radius: float
    values: np.ndarray

    @property
    def count(self) -> int:
        return len(self.values)

    @property
    def thetas(self) -> np.ndarray:
        return TWO_PI * np.arange(self.count) / self.count


@dataclass(frozen=True)
class FilteredSignal:
    """Filtered impedance ``BU(theta)`` as a trigonometric polynomial.

    ``modes[l + M]`` multiplies ``exp(i l theta)``; ``values`` is the polynomial
    on the sample grid ``thetas``.
    """

    modes: np.ndarray
    M: int
    thetas: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return self(self.thetas)

    def __call__(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        ell = np.arange(-self.M, self.M + 1)
        return np.exp(1j * theta[..., None] * ell) @ self.modes


@dataclass
class RayEstimate:
    """Ray angles in ``[0, 2pi)`` sorted ascending, with complex amplitudes."""

    angles: np.ndarray
    amplitudes: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.mod(np.asarray(self.angles, dtype=float).ravel(), TWO_PI)
        b = np.asarray(self.amplitudes, dtype=complex).ravel()
        if a.shape != b.shape:
            raise ValueError("angles and amplitudes differ in length")
        order = np.argsort(a)
        self.angles, self.amplitudes = a[order], b[order]

    @property
    def N(self) -> int:
        return len(self.angles)

    @classmethod
    def empty(cls, **info) -> "RayEstimate":
        return cls(np.zeros(0), np.zeros(0, complex), dict(info))


def truncation_order(omega_tilde0: float) -> int:
    """``max(1, [w], [w + (w^(1/3) - 2.5)])`` with ``[.]`` read as floor."""
    w = float(omega_tilde0)
    return int(max(1, math.floor(w), math.floor(w + (w ** (1.0 / 3.0) - 2.5))))


def sample_count(M: int) -> int:
    """Smallest power of two with at least ``8 (M + 2)`` samples."""
    return 1 << math.ceil(math.log2(8 * (M + 2)))


def sample_impedance(field, r0, rho: float, c0: float, S: int, sign: int = 1) -> CircleSamples:
    """Sample ``(1 + sign * c0 / (i omega) d_r) u`` on the circle ``|r - r0| = rho``."""
    if S < 4 or S & (S - 1):
        raise ValueError(f"sample count must be a power of two, got {S}")
    if not rho > 0:
        raise ValueError("radius must be positive")
    r0 = np.asarray(r0, dtype=float)
    if not field.contains_circle(r0, rho):
        raise ValueError(f"sampling circle at {r0.tolist()} radius {rho:g} exits the field domain")
    theta = TWO_PI * np.arange(S) / S
    d = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    pts = r0 + rho * d
    u = field.value(pts)
    dr = np.sum(field.gradient(pts) * d, axis=-1)
    return CircleSamples(r0, float(rho), u + sign * c0 / (1j * field.omega) * dr)


def fourier_coeffs(samples: CircleSamples, L: int) -> np.ndarray:
    """Trapezoidal Fourier coefficients for ``l = -L .. L`` (index ``l + L``)."""
    S = samples.count
    if L > S // 2 - 1:
        raise ValueError(f"L={L} too large for {S} samples")
    spec = np.fft.fft(samples.values) / S
    return spec[np.arange(-L, L + 1) % S]


def plane_wave_response(M: int, x: float) -> np.ndarray:
    """``i^l (J_l(x) - i J'_l(x))`` for ``l = -M .. M``."""
    tab = bessel_j_table(M + 1, x)
    J = tab[1:-1]
    Jp = 0.5 * (tab[:-2] - tab[2:])
    ell = np.arange(-M, M + 1)
    return _I_POW[ell % 4] * (J - 1j * Jp)


def filter_b(coeffs, omega_tilde0: float, S: int | None = None, M: int | None = None) -> FilteredSignal:
    """Divide each Fourier mode by its plane-wave response and resum.

    ``coeffs`` holds modes ``-L..L`` with ``L >= M``; only ``|l| <= M`` are used.
    """
    if not omega_tilde0 > 0:
        raise ValueError("omega_tilde0 must be positive")
    coeffs = np.asarray(coeffs, dtype=complex)
    L = (len(coeffs) - 1) // 2
    M = truncation_order(omega_tilde0) if M is None else int(M)
    if L < M:
        raise ValueError(f"coefficients cover |l| <= {L}, filter needs {M}")
    den = plane_wave_response(M, omega_tilde0)
    if np.min(np.abs(den)) < 1e-13:
        raise ValueError("ill-conditioned filter: plane-wave response vanishes")
    modes = coeffs[L - M : L + M + 1] / den / (2 * M + 1)
    S = sample_count(M) if S is None else int(S)
    return FilteredSignal(modes, M, TWO_PI * np.arange(S) / S)


def dirichlet_kernel(M: int, theta) -> np.ndarray:
    """``sin((2M+1) t/2) / ((2M+1) sin(t/2))``, equal to 1 at ``t = 0``."""
    t = np.asarray(theta, dtype=float)
    n = 2 * M + 1
    s = np.sin(t / 2)
    small = np.abs(s) < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sin(n * t / 2) / (n * s)
    # cos(n t / 2) / cos(t / 2) -> +-1 at multiples of 2 pi
    return np.where(small, np.cos(n * t / 2) / np.cos(t / 2), out)


def _circ_dist(a, b):
    d = np.mod(a - b, TWO_PI)
    return np.minimum(d, TWO_PI - d)


def detect_peaks(
    signal: FilteredSignal,
    rel_threshold: float = 0.4,
    min_sep: float | None = None,
    noise_floor: float = 1e-10,
) -> RayEstimate:
    """Local maxima of ``|BU|`` above ``rel_threshold * max |BU|``.

    Peaks closer than ``min_sep`` to a stronger peak are discarded. Each peak is
    refined with a three-point parabola through the log-free magnitudes.
    """
    if not 0 < rel_threshold < 1:
        raise ValueError("rel_threshold must lie in (0, 1)")
    if min_sep is None:
        min_sep = TWO_PI / (2 * signal.M + 1)
    mag = np.abs(signal.values)
    top = mag.max()
    if not top > noise_floor:
        return RayEstimate.empty(reason="below noise floor")
    S = len(mag)
    left, right = np.roll(mag, 1), np.roll(mag, -1)
    cand = np.flatnonzero((mag >= left) & (mag > right) & (mag >= rel_threshold * top))
    cand = cand[np.argsort(-mag[cand], kind="stable")]
    step = TWO_PI / S
    kept: list[float] = []
    for k in cand:
        y0, y1, y2 = mag[k - 1], mag[k], mag[(k + 1) % S]
        den = y0 - 2 * y1 + y2
        shift = 0.5 * (y0 - y2) / den if den < 0 else 0.0
        theta = (k + np.clip(shift, -0.5, 0.5)) * step
        if all(_circ_dist(theta, t) >= min_sep for t in kept):
            kept.append(theta)
    angles = np.mod(np.array(kept), TWO_PI)
    return RayEstimate(angles, signal(angles))


def nmla_probe(field, r0, omega_tilde: float | None = None, medium=None, *, c0: float | None = None,
               rel_threshold: float = 0.4, return_signal: bool = False):
    """Ray count, angles and amplitudes at ``r0`` from one impedance circle.

    The radius is ``omega_tilde**-0.5``, so ``omega_tilde * rho**2 = 1``.
    """
    omega_tilde = field.omega if omega_tilde is None else float(omega_tilde)
    if not omega_tilde > 0:
        raise ValueError("omega_tilde must be positive")
    if abs(omega_tilde - field.omega) > 1e-12 * omega_tilde:
        raise ValueError("field frequency does not match omega_tilde")
    r0 = np.asarray(r0, dtype=float)
    if c0 is None:
        c0 = 1.0 if medium is None else float(medium.c(r0))
    rho = 1.0 / math.sqrt(omega_tilde)
    w0 = omega_tilde * rho / c0
    M = truncation_order(w0)
    S = sample_count(M)
    samples = sample_impedance(field, r0, rho, c0, S)
    signal = filter_b(fourier_coeffs(samples, M), w0, S, M)
    est = detect_peaks(signal, rel_threshold)
    est.info.update(center=r0.tolist(), radius=rho, M=M, S=S)
    return (est, signal) if return_signal else est
