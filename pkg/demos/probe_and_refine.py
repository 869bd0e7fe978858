#!/usr/bin/env python3
"""Probe a curved wave with NMLA, then refine the direction by least squares.

The probe error decays like omega^(-1/2), the refined one like omega^(-2).
Run:  python3 demos/probe_and_refine.py
"""

import numpy as np

from rayhelm.field import curved_wave
from rayhelm.nmla import nmla_probe
from rayhelm.raytune import postprocess_probe

POINT = np.array([0.3, 0.4])
OMEGAS = [25.0, 100.0, 400.0, 1600.0]


def circ_dist(a, b):
    return abs(np.angle(np.exp(1j * (a - b))))


raw, post = [], []
print(f"{'omega':>8} {'probe error':>12} {'refined error':>14} {'LM iters':>9}")
for w in OMEGAS:
    b = curved_wave(w)
    exact = b.exact_angles(POINT[None])[0, 0]
    init = nmla_probe(b.wave, POINT, w, b.medium)
    est = postprocess_probe(b.wave, POINT, init, w, b.medium)
    raw.append(circ_dist(init.angles[0], exact))
    post.append(circ_dist(est.angles[0], exact))
    print(f"{w:8.0f} {raw[-1]:12.3e} {post[-1]:14.3e} {est.info['iters']:9d}")

for name, errs in (("probe", raw), ("refined", post)):
    q = np.polyfit(np.log(OMEGAS), np.log(errs), 1)[0]
    print(f"{name}: error = O(omega^{q:.2f})")
