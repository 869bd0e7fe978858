#!/usr/bin/env python3
"""Steps 1 to 5 on Example 2 at one frequency, with a per-stage summary.

Uses the exact low-frequency field; pass ``pwdg`` as the first argument to
solve the low-frequency problem instead.
Run:  python3 demos/pipeline_example2.py [analytic-oracle|pwdg]
"""

import sys

import numpy as np

from rayhelm.pipeline import PipelineConfig, run_single

lowfreq = sys.argv[1] if len(sys.argv) > 1 else "analytic-oracle"
cfg = PipelineConfig(example="example2", omegas=[400.0], lowfreq=lowfreq)
row, st = run_single(cfg, 0)

m0, m1, m = st.meshes["h0"], st.meshes["h_tilde"], st.meshes["h"]
print(f"omega={row.omega:g}, omega_tilde={row.omega_tilde:g}, low-frequency source: {lowfreq}")
print(f"meshes: h0={m0.h:.4f} ({m0.n_elements} el), h_tilde={m1.h:.4f} ({m1.n_elements} el), "
      f"h={m.h:.5f} ({m.n_elements} el)")
print(f"probe: rays per element {np.bincount(st.probe.counts).tolist()} (index = N)")
print(f"refine: max LM iterations {row.dls_max_iters}, merged rays {row.merged_rays}")
errs = st.angle_errors
print(f"angle error: median {np.median(errs):.3e}, max {errs.max():.3e}")
print(f"projection: dofs {row.dofs}, relative L2 error {row.rel_l2_error:.3e}, "
      f"ill-conditioned elements {row.ill_conditioned}")
print(f"wall time {row.wall_time:.1f}s")
