#!/usr/bin/env python3
"""Best L2 approximation of Example 2 by ray-adapted plane waves.

With the exact ray directions on every element and h = 1/omega, the
relative error decays at first order in omega.
Run:  python3 demos/projection_order.py
"""

import numpy as np

from rayhelm.field import benchmark, unit_square
from rayhelm.geom import build_mesh
from rayhelm.pipeline import convergence_orders, exact_ray_field
from rayhelm.pwspace import global_projection_error

OMEGAS = [100.0, 225.0, 400.0]

errs = []
for w in OMEGAS:
    b = benchmark("example2", w)
    mesh = build_mesh(unit_square, 1.0 / w)
    rays = exact_ray_field(mesh, b.exact_angles)
    err, det = global_projection_error(b.wave, mesh, rays, w, b.medium, return_details=True, strict=False)
    errs.append(err)
    print(f"omega={w:5.0f}  elements={mesh.n_elements:7d}  dofs={det['dofs']:7d}  rel L2 error={err:.3e}")

print("orders:", ", ".join(f"{o:.2f}" for o in convergence_orders(OMEGAS, errs)))
