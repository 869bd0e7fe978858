"""Cylindrical Bessel functions of integer order.

Values are computed with Miller's downward recurrence, normalised by the
Neumann identity ``J_0(x) + 2 * sum_k J_{2k}(x) = 1``. Only real arguments
``x >= 0`` and orders ``|l| <= 64`` are supported, which is all the filter and
sampling-quantity code needs.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["MAX_ORDER", "bessel_j", "bessel_j_prime", "bessel_j_table"]

MAX_ORDER = 64

_RESCALE = 1e250


def _check(order: int, x: float) -> None:
    if not np.isfinite(x) or x < 0:
        raise ValueError(f"Bessel argument must be finite and >= 0, got {x!r}")
    if abs(order) > MAX_ORDER:
        raise ValueError(f"|order| must be <= {MAX_ORDER}, got {order}")


def _start_index(nmax: int, x: float) -> int:
    m = max(nmax, int(x)) + 1
    m += 30 + int(2.0 * math.sqrt(40.0 * m))
    return m + (m % 2)


_SERIES_BELOW = 1e-3


def _table_series(nmax: int, x: float) -> np.ndarray:
    """Leading terms of the power series; exact to rounding for tiny ``x``."""
    q = -(0.5 * x) ** 2
    out = np.zeros(nmax + 1)
    lead = 1.0
    for n in range(nmax + 1):
        term, acc = lead, lead
        for m in range(1, 5):
            term *= q / (m * (n + m))
            acc += term
        out[n] = acc
        lead *= 0.5 * x / (n + 1)
    return out


def _table_nonneg(nmax: int, x: float) -> np.ndarray:
    """J_0(x) ... J_nmax(x) for x > 0."""
    start = _start_index(nmax, x)
    out = np.zeros(nmax + 1)
    two_over_x = 2.0 / x
    j_next, j_cur = 0.0, 1e-300
    norm = 0.0
    for k in range(start, 0, -1):
        j_prev = k * two_over_x * j_cur - j_next
        j_next, j_cur = j_cur, j_prev
        # j_cur now holds the unnormalised value of order k - 1
        order = k - 1
        if order <= nmax:
            out[order] = j_cur
        if order > 0 and order % 2 == 0:
            norm += 2.0 * j_cur
        if abs(j_cur) > _RESCALE:
            j_cur /= _RESCALE
            j_next /= _RESCALE
            norm /= _RESCALE
            out /= _RESCALE
    norm += j_cur
    return out / norm


def bessel_j_table(nmax: int, x: float) -> np.ndarray:
    """Return ``J_l(x)`` for ``l = -nmax .. nmax`` as one array.

    Index ``l + nmax`` holds order ``l``. Negative orders come from
    ``J_{-l} = (-1)^l J_l`` exactly.
    """
    nmax = int(nmax)
    if not 0 <= nmax <= MAX_ORDER + 2:
        # two extra orders so derivatives of the top supported order work
        raise ValueError(f"nmax must lie in [0, {MAX_ORDER + 2}], got {nmax}")
    _check(0, x)
    if x < _SERIES_BELOW:
        pos = _table_series(nmax, float(x))
    else:
        pos = _table_nonneg(nmax, float(x))
    signs = np.where(np.arange(1, nmax + 1) % 2 == 1, -1.0, 1.0)
    neg = (signs * pos[1:])[::-1]
    return np.concatenate([neg, pos])


def bessel_j(order: int, x: float) -> float:
    """Bessel function of the first kind ``J_order(x)``.

    Parameters
    ----------
    order : int
        Integer order with ``|order| <= 64``.
    x : float
        Real argument, ``x >= 0``.
    """
    order = int(order)
    _check(order, x)
    n = abs(order)
    value = bessel_j_table(n, x)[2 * n] if n else bessel_j_table(0, x)[0]
    if order < 0 and n % 2 == 1:
        return -float(value)
    return float(value)


def bessel_j_prime(order: int, x: float) -> float:
    """Derivative ``J'_order(x) = (J_{order-1}(x) - J_{order+1}(x)) / 2``."""
    order = int(order)
    _check(order, x)
    n = abs(order) + 1
    tab = bessel_j_table(n, x)
    return 0.5 * float(tab[order - 1 + n] - tab[order + 1 + n])
