"""Post-processing of probe directions by fitting the dual-impedance model.

Two impedance quantities ``U+`` and ``U-`` are sampled on a circle of radius
``r1 = 3 N c / omega_tilde``. Their Fourier modes combine into sampling
quantities ``Ut_l`` that depend, up to ``O(omega_tilde^-2)``, linearly on five
coefficients per ray and nonlinearly on the ray angle:

    Ut_l ~ sum_n sum_k mu_{l,k} chi_{n,k} exp(-i (l + k) theta_n),  k = -2..2.

The angles are refined by minimising the squared misfit with a
Levenberg-Marquardt iteration started from the probe estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nmla import (
    CircleSamples,
    RayEstimate,
    fourier_coeffs,
    sample_count,
    sample_impedance,
    truncation_order,
)
from .specfun import MAX_ORDER, bessel_j_table

__all__ = [
    "A_MINUS",
    "A_PLUS",
    "KS",
    "MuTable",
    "SamplingQuantities",
    "FitParams",
    "dual_impedance_samples",
    "mu_table",
    "mu_quotient_forms",
    "sampling_quantities",
    "ray_coefficients",
    "model_g",
    "objective",
    "residual",
    "residual_jacobian",
    "refine_directions",
    "postprocess_probe",
]

TWO_PI = 2.0 * np.pi
KS = np.arange(-2, 3)
_I_POW = np.array([1, 1j, -1, -1j])

# d_theta = exp(i theta) a_{-1} + exp(-i theta) a_{1}
A_MINUS = np.array([0.5, -0.5j])
A_PLUS = np.array([0.5, 0.5j])

_DEGENERATE = 1e-13


def _ipow(ell) -> np.ndarray:
    return _I_POW[np.asarray(ell) % 4]


def dual_impedance_samples(field, r0, r1: float, c0: float, omega_tilde: float | None = None,
                           S: int | None = None) -> tuple[CircleSamples, CircleSamples]:
    """Sample ``(1 +/- c0 / (i omega_tilde) d_r) u`` on the circle ``|r - r0| = r1``.

    ``S`` defaults to the probe rule applied to ``M = M(omega_tilde r1 / c0)``.
    """
    omega_tilde = field.omega if omega_tilde is None else float(omega_tilde)
    if abs(omega_tilde - field.omega) > 1e-12 * omega_tilde:
        raise ValueError("field frequency does not match omega_tilde")
    if S is None:
        S = sample_count(truncation_order(omega_tilde * r1 / c0))
    plus = sample_impedance(field, r0, r1, c0, S, sign=1)
    # the minus set reuses the same points, so derive it from the plus set
    r0 = np.asarray(r0, dtype=float)
    theta = plus.thetas
    d = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    u = field.value(r0 + r1 * d)
    minus = CircleSamples(plus.center, plus.radius, 2.0 * u - plus.values)
    return plus, minus


@dataclass(frozen=True)
class MuTable:
    """Model coefficients ``mu[l + M, k + 2]`` and the normalisers ``a+``, ``a-``."""

    omega_tilde1: float
    M: int
    mu: np.ndarray
    a_plus: np.ndarray
    a_minus: np.ndarray

    @property
    def ells(self) -> np.ndarray:
        return np.arange(-self.M, self.M + 1)

    def __call__(self, ell: int, k: int) -> complex:
        if abs(ell) > self.M or abs(k) > 2:
            raise IndexError(f"(l, k) = ({ell}, {k}) outside the table")
        return complex(self.mu[ell + self.M, k + 2])


def _bessel_block(t: float, M: int):
    """``J_m(t)`` and ``J'_m(t)`` for ``m = -M-2 .. M+2`` (index ``m + M + 2``)."""
    tab = bessel_j_table(M + 3, t)
    J = tab[1:-1]
    Jp = 0.5 * (tab[:-2] - tab[2:])
    return J, Jp


def _normalisers(t: float, J: np.ndarray, Jp: np.ndarray):
    a_plus = 0.5j * t * (J - 1j * Jp) + J
    a_minus = 0.5j * t * (J + 1j * Jp) - J
    return a_plus, a_minus


def mu_quotient_forms(omega_tilde1: float, M: int) -> np.ndarray:
    """Same table as :func:`mu_table`, from the unsimplified Bessel quotients.

    Used as an independent cross-check of the closed forms.
    """
    t = float(omega_tilde1)
    J, Jp = _bessel_block(t, M)
    off = M + 2
    ell = np.arange(-M, M + 1)
    ap, am = _normalisers(t, J[ell + off], Jp[ell + off])
    out = np.empty((2 * M + 1, 5), complex)
    Jl, Jpl = J[ell + off], Jp[ell + off]
    out[:, 2] = (Jl - 1j * Jpl) / ap - (Jl + 1j * Jpl) / am
    for j in (-1, 1):
        m = ell + j + off
        out[:, 2 + j] = ((1 + 1 / (1j * t)) * J[m] - 1j * Jp[m]) / ap - (
            (1 - 1 / (1j * t)) * J[m] + 1j * Jp[m]
        ) / am
        m = ell + 2 * j + off
        out[:, 2 + 2 * j] = ((0.5j * t + 1) * J[m] + 0.5 * t * Jp[m]) / ap - (
            (0.5j * t - 1) * J[m] - 0.5 * t * Jp[m]
        ) / am
    return out


def mu_table(omega_tilde1: float, M: int, floor: float = 1e-10, check: bool = True) -> MuTable:
    """Closed Bessel forms of ``mu_{l,k}`` for ``|l| <= M``, argument ``omega_tilde1``.

    With ``D = a+ a-``::

        mu_{l,0}  = -2 J_l^2 / D
        mu_{l,j}  = j [t (J_{l+j}^2 + J_l^2) - 2 (l+j) J_{l+j} J_l] / D
        mu_{l,2j} = i j (l+j) t [J_{l+j}^2 - J_{l+2j} J_l] / D

    for ``j = +-1``. When ``check`` is set the table is compared with
    :func:`mu_quotient_forms` and ``|mu_{l,0}|`` is required to exceed
    ``floor``.
    """
    t = float(omega_tilde1)
    M = int(M)
    if not t > 0:
        raise ValueError("omega_tilde1 must be positive")
    if not 0 <= M <= MAX_ORDER - 2:
        raise ValueError(f"M must lie in [0, {MAX_ORDER - 2}], got {M}")
    J, Jp = _bessel_block(t, M)
    off = M + 2
    ell = np.arange(-M, M + 1)
    Jl = J[ell + off]
    ap, am = _normalisers(t, Jl, Jp[ell + off])
    D = ap * am
    if np.min(np.abs(D)) < _DEGENERATE:
        raise ValueError("degenerate sampling radius: a+ a- vanishes")
    mu = np.empty((2 * M + 1, 5), complex)
    mu[:, 2] = -2.0 * Jl**2 / D
    for j in (-1, 1):
        J1 = J[ell + j + off]
        J2 = J[ell + 2 * j + off]
        mu[:, 2 + j] = j * (t * (J1**2 + Jl**2) - 2.0 * (ell + j) * J1 * Jl) / D
        mu[:, 2 + 2 * j] = 1j * j * (ell + j) * t * (J1**2 - J2 * Jl) / D
    if check:
        ref = mu_quotient_forms(t, M)
        scale = max(1.0, float(np.max(np.abs(ref))))
        if np.max(np.abs(ref - mu)) > 1e-10 * scale:
            raise ArithmeticError("closed-form mu table disagrees with the quotient forms")
        if np.min(np.abs(mu[:, 2])) < floor:
            raise ValueError(f"|mu_(l,0)| falls below {floor:g}; choose another radius")
    return MuTable(t, M, mu, ap, am)


@dataclass(frozen=True)
class SamplingQuantities:
    omega_tilde1: float
    M: int
    values: np.ndarray

    @property
    def ells(self) -> np.ndarray:
        return np.arange(-self.M, self.M + 1)


def sampling_quantities(Uplus_coeffs, Uminus_coeffs, omega_tilde1: float, M: int | None = None,
                        mu: MuTable | None = None) -> SamplingQuantities:
    """``Ut_l = i^-l [(F U+)_l / a+_l - (F U-)_l / a-_l]`` for ``|l| <= M``.

    Coefficient arrays hold modes ``-L..L`` with ``L >= M``; ``M`` defaults to
    ``M(omega_tilde1)``.
    """
    t = float(omega_tilde1)
    M = truncation_order(t) if M is None else int(M)
    fp = np.asarray(Uplus_coeffs, dtype=complex)
    fm = np.asarray(Uminus_coeffs, dtype=complex)
    if fp.shape != fm.shape:
        raise ValueError("dual coefficient arrays differ in length")
    L = (len(fp) - 1) // 2
    if L < M:
        raise ValueError(f"coefficients cover |l| <= {L}, need {M}")
    if mu is None:
        J, Jp = _bessel_block(t, M)
        ell = np.arange(-M, M + 1)
        ap, am = _normalisers(t, J[ell + M + 2], Jp[ell + M + 2])
    else:
        if mu.M != M or abs(mu.omega_tilde1 - t) > 1e-14 * t:
            raise ValueError("mu table built for other parameters")
        ap, am = mu.a_plus, mu.a_minus
    if min(np.min(np.abs(ap)), np.min(np.abs(am))) < _DEGENERATE:
        raise ValueError("degenerate normaliser a+ or a-")
    sl = slice(L - M, L + M + 1)
    ell = np.arange(-M, M + 1)
    values = (fp[sl] / ap - fm[sl] / am) / _ipow(ell)
    return SamplingQuantities(t, M, values)


def ray_coefficients(B, grad_B, hess_phi, c0: float, r1: float) -> np.ndarray:
    """Model coefficients ``b_k``, ``k = -2..2``, of one smooth ray.

    ``B`` is ``A(r0) exp(i omega phi(r0))``, ``grad_B`` the gradient of the
    amplitude factor ``grad A(r0) exp(i omega phi(r0))`` and ``hess_phi`` the
    Hessian of the phase at ``r0``::

        b_0  = B
        b_j  = i^j r1 a_j . grad_B
        b_2j = -r1 c0 B a_j^T H a_j
    """
    gB = np.asarray(grad_B, dtype=complex)
    H = np.asarray(hess_phi, dtype=float)
    out = np.zeros(5, complex)
    out[2] = B
    for j, a in ((-1, A_MINUS), (1, A_PLUS)):
        out[2 + j] = (1j**j) * r1 * (a @ gB)
        out[2 + 2 * j] = -r1 * c0 * B * (a @ H @ a)
    return out


@dataclass
class FitParams:
    """Angles ``theta_bar`` (N,) and coefficients ``chi`` (N, 5), column ``k + 2``."""

    theta_bar: np.ndarray
    chi: np.ndarray

    def __post_init__(self):
        self.theta_bar = np.mod(np.asarray(self.theta_bar, dtype=float).ravel(), TWO_PI)
        self.chi = np.asarray(self.chi, dtype=complex).reshape(len(self.theta_bar), 5)

    @property
    def N(self) -> int:
        return len(self.theta_bar)

    def to_vector(self) -> np.ndarray:
        """Real vector ``[theta (N), Re chi (5N), Im chi (5N)]``."""
        return np.concatenate([self.theta_bar, self.chi.real.ravel(), self.chi.imag.ravel()])

    @classmethod
    def from_vector(cls, x, N: int) -> "FitParams":
        x = np.asarray(x, dtype=float)
        if x.shape != (11 * N,):
            raise ValueError(f"expected {11 * N} reals, got {x.shape}")
        re = x[N : 6 * N].reshape(N, 5)
        im = x[6 * N :].reshape(N, 5)
        return cls(x[:N], re + 1j * im)

    @classmethod
    def initial(cls, estimate: RayEstimate) -> "FitParams":
        chi = np.zeros((estimate.N, 5), complex)
        chi[:, 2] = estimate.amplitudes
        return cls(estimate.angles.copy(), chi)


def _phases(theta, ells):
    # exp(-i (l + k) theta_n) with shape (L, N, 5)
    m = ells[:, None, None] + KS[None, None, :]
    return np.exp(-1j * m * np.asarray(theta)[None, :, None]), m


def model_g(params: FitParams, mu: MuTable, ell: int | None = None):
    """``G_l = sum_n sum_k mu_{l,k} chi_{n,k} exp(-i (l + k) theta_n)``.

    Returns the full vector over ``|l| <= M`` when ``ell`` is omitted.
    """
    if ell is not None:
        if abs(ell) > mu.M:
            raise IndexError(f"|l| = {abs(ell)} exceeds M = {mu.M}")
        E, _ = _phases(params.theta_bar, np.array([ell]))
        return complex(np.einsum("k,nk,nk->", mu.mu[ell + mu.M], params.chi, E[0]))
    E, _ = _phases(params.theta_bar, mu.ells)
    return np.einsum("lk,nk,lnk->l", mu.mu, params.chi, E)


def residual(params: FitParams, quantities: SamplingQuantities, mu: MuTable) -> np.ndarray:
    """Complex misfit ``G(lambda) - Ut``."""
    if quantities.M != mu.M:
        raise ValueError("sampling quantities and mu table use different M")
    return model_g(params, mu) - quantities.values


def objective(params: FitParams, quantities: SamplingQuantities, mu: MuTable) -> float:
    """``J = sum_l |Ut_l - G_l|^2``."""
    r = residual(params, quantities, mu)
    return float(np.vdot(r, r).real)


def residual_jacobian(params: FitParams, mu: MuTable) -> np.ndarray:
    """Real Jacobian of ``[Re r; Im r]`` with respect to :meth:`FitParams.to_vector`.

    Shape ``(2 (2M+1), 11 N)``.
    """
    N = params.N
    E, m = _phases(params.theta_bar, mu.ells)
    dchi = mu.mu[:, None, :] * E  # dG_l / dchi_{n,k}, shape (L, N, 5)
    dtheta = np.sum(dchi * params.chi[None] * (-1j * m), axis=2)  # (L, N)
    dchi = dchi.reshape(len(mu.ells), 5 * N)
    Jc = np.concatenate([dtheta, dchi, 1j * dchi], axis=1)
    return np.concatenate([Jc.real, Jc.imag], axis=0)


def _real(r: np.ndarray) -> np.ndarray:
    return np.concatenate([r.real, r.imag])


def refine_directions(quantities: SamplingQuantities, init: RayEstimate, mu: MuTable | None = None,
                      max_iter: int = 200, gtol: float = 1e-12, ftol: float = 1e-14) -> RayEstimate:
    """Levenberg-Marquardt fit of the model to ``quantities`` from ``init``.

    The damping starts at ``1e-3 max diag(J^T J)``, halves on accepted steps
    and doubles on rejected ones. Iteration stops when the gradient max-norm
    drops below ``gtol (1 + J)``, when an accepted step lowers ``J`` by less
    than the relative amount ``ftol``, when a rejected step predicts a gain
    below ``ftol J``, or after ``max_iter`` iterations. In the
    last case the estimate is flagged with ``info["converged"] = False`` and
    carries the best parameters seen.
    """
    if init.N < 1:
        raise ValueError("refinement needs at least one initial ray")
    if quantities.M < 3 * init.N:
        raise ValueError(f"M = {quantities.M} is below 3N = {3 * init.N}")
    if mu is None:
        mu = mu_table(quantities.omega_tilde1, quantities.M)
    N = init.N
    x = FitParams.initial(init).to_vector()

    def evaluate(x):
        p = FitParams.from_vector(x, N)
        r = _real(residual(p, quantities, mu))
        return p, r, float(r @ r)

    p, r, J = evaluate(x)
    J0 = J
    Jac = residual_jacobian(p, mu)
    A = Jac.T @ Jac
    g = Jac.T @ r
    damp = 1e-3 * float(np.max(np.diag(A)))
    if not damp > 0:
        damp = 1e-3
    eye = np.eye(len(x))
    converged, reason, iters, accepted = False, "max_iter", 0, 0
    history = [J]
    while iters < max_iter:
        if np.max(np.abs(g)) < gtol * (1.0 + J):
            converged, reason = True, "gradient"
            break
        iters += 1
        try:
            step = np.linalg.solve(A + damp * eye, -g)
        except np.linalg.LinAlgError:
            damp *= 2.0
            continue
        x_new = x + step
        x_new[:N] = np.mod(x_new[:N], TWO_PI)
        p_new, r_new, J_new = evaluate(x_new)
        if J_new < J:
            decrease = (J - J_new) / J
            x, p, r, J = x_new, p_new, r_new, J_new
            accepted += 1
            history.append(J)
            damp *= 0.5
            Jac = residual_jacobian(p, mu)
            A = Jac.T @ Jac
            g = Jac.T @ r
            if decrease < ftol:
                converged, reason = True, "ftol"
                break
        else:
            # a rejected step whose predicted gain is below rounding level
            # means J cannot be lowered further in floating point
            predicted = -(g @ step) - 0.5 * step @ (A @ step)
            if predicted < ftol * J:
                converged, reason = True, "roundoff"
                break
            damp *= 2.0
    if not converged and np.max(np.abs(g)) < gtol * (1.0 + J):
        converged, reason = True, "gradient"
    info = dict(init.info)
    info.update(iters=iters, accepted=accepted, J=J, J0=J0, converged=converged, stop=reason,
                J_history=history)
    order = np.argsort(p.theta_bar)
    info["chi"] = [[complex(v) for v in row] for row in p.chi[order]]
    return RayEstimate(p.theta_bar, p.chi[:, 2], info)


def postprocess_probe(field, r0, init: RayEstimate, omega_tilde: float | None = None, medium=None, *,
                      c0: float | None = None, max_iter: int = 200) -> RayEstimate:
    """Dual-impedance sampling at ``r0`` followed by :func:`refine_directions`.

    The radius is ``r1 = 3 N c0 / omega_tilde`` so that ``omega_tilde1 = 3N``.
    Elements without rays are returned unchanged.
    """
    if init.N == 0:
        return RayEstimate.empty(**init.info)
    omega_tilde = field.omega if omega_tilde is None else float(omega_tilde)
    r0 = np.asarray(r0, dtype=float)
    if c0 is None:
        c0 = 1.0 if medium is None else float(medium.c(r0))
    t = 3.0 * init.N
    r1 = t * c0 / omega_tilde
    M = max(truncation_order(t), 3 * init.N)
    S = sample_count(M)
    plus, minus = dual_impedance_samples(field, r0, r1, c0, omega_tilde, S)
    mu = mu_table(t, M)
    q = sampling_quantities(fourier_coeffs(plus, M), fourier_coeffs(minus, M), t, M, mu)
    est = refine_directions(q, init, mu, max_iter=max_iter)
    est.info.update(center=r0.tolist(), r1=r1, M=M)
    return est
