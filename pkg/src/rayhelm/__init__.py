"""Ray-learning plane-wave methods for high-frequency Helmholtz problems.

Submodules
----------
specfun   Bessel functions of the first kind.
geom      Structured meshes and per-element ray fields.
field     Media, wavefields and benchmark problems.
nmla      Circle-sampled direction estimation.
raytune   Dual-impedance refinement of ray directions.
pwspace   Ray-adapted plane-wave spaces and projections.
pwdg      Plane-wave discontinuous Galerkin solver.
pipeline  Multi-frequency pipeline and convergence reports.
"""

__version__ = "0.1.0"
