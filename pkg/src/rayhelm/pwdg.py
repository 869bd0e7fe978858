"""Plane-wave discontinuous Galerkin solver for the impedance Helmholtz problem.

Solves ``-Lap u - k(r)^2 u = f`` in a rectangle with ``d_n u + i k u = g`` on
the boundary, ``k = omega sqrt(xi)``. On each element ``K`` and for each test
function ``v``

    int_K (grad u . grad v* - k^2 u v*) + int_dK (u_hat - u) d_n v*
        - int_dK i k sigma_hat . n v* = int_K f v*,

with the numerical fluxes

    interior:  u_hat = {u} - beta / (i k) [grad u]_N
               i k sigma_hat = {grad u} - alpha i k [u]_N
    boundary:  u_hat = u - delta / (i k) (d_n u + i k u - g)
               i k sigma_hat = grad u - (1 - delta) (d_n u + i k u - g) n

The volume term vanishes for plane waves when ``k`` is constant on ``K``; it
is kept so the scheme stays consistent when ``k`` varies inside an element.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geom import Mesh
from .pwspace import PlaneWaveBasis, element_quadrature, fan_basis, gauss_points, quad_points_per_axis

__all__ = [
    "DGSpace",
    "DGSystem",
    "DGSolution",
    "SolveError",
    "assemble",
    "solve",
    "solve_benchmark",
    "save_solution",
    "load_solution",
]

ALPHA = 0.5
BETA = 0.5
DELTA = 0.5
DIRECT_LIMIT = 200_000
_MAGIC = b"RHDG\x01\n"


class SolveError(RuntimeError):
    """Linear solve failed or missed the residual tolerance."""


@dataclass
class DGSpace:
    """Global numbering of the active basis slots on a mesh.

    Slot ``(e, j)`` maps to column ``index[e, j]``, or ``-1`` when inactive.
    """

    mesh: Mesh
    basis: PlaneWaveBasis

    def __post_init__(self):
        if self.basis.n_elements != self.mesh.n_elements:
            raise ValueError("basis and mesh sizes differ")
        counts = self.basis.counts
        if np.any(counts == 0):
            raise ValueError("empty basis on some element")
        flat = np.cumsum(self.basis.mask.ravel()) - 1
        self.index = np.where(self.basis.mask, flat.reshape(self.basis.mask.shape), -1)

    @property
    def dofs(self) -> int:
        return int(self.basis.mask.sum())


@dataclass
class DGSystem:
    space: DGSpace
    matrix: sp.csr_matrix
    rhs: np.ndarray
    omega: float


@dataclass
class DGSolution:
    """Coefficients of a DG solve together with the space they refer to."""

    mesh: Mesh
    basis: PlaneWaveBasis
    coefficients: np.ndarray
    omega: float
    info: dict = field(default_factory=dict)

    @property
    def dofs(self) -> int:
        return len(self.coefficients)

    def coefficients_by_element(self) -> np.ndarray:
        out = np.zeros(self.basis.mask.shape, complex)
        out[self.basis.mask] = self.coefficients
        return out

    def value(self, points) -> np.ndarray:
        from .field import DiscreteField

        return DiscreteField(self).value(points)


def _edge_rule(omega: float, medium, mesh: Mesh, kmax: float | None) -> int:
    if kmax is None:
        kmax = omega * float(np.sqrt(np.max(medium.xi(mesh.barycenters()))))
    # test times trial oscillates with up to twice the wavenumber
    return quad_points_per_axis(2.0 * kmax, mesh.h)


def _faces(mesh: Mesh, n: int):
    """Quadrature on all faces, grouped as (interior, boundary).

    Interior faces give ``(a, b, pts, w, normal)`` with the normal pointing from
    ``a`` to ``b``. Boundary faces give ``(a, pts, w, normal)`` with the outward
    normal.
    """
    t, w = gauss_points(n)
    nx, ny = mesh.nx, mesh.ny
    x0, _, y0, _ = mesh.domain
    dx, dy = mesh.dx, mesh.dy
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    ix, iy = ix.ravel(), iy.ravel()
    elem = iy * nx + ix

    def vertical(x, ys):
        # faces x = const spanning [ys, ys + dy]
        pts = np.stack([np.broadcast_to(x[:, None], (len(x), n)), ys[:, None] + t * dy], axis=-1)
        return pts, np.broadcast_to(w * dy, (len(x), n))

    def horizontal(y, xs):
        pts = np.stack([xs[:, None] + t * dx, np.broadcast_to(y[:, None], (len(y), n))], axis=-1)
        return pts, np.broadcast_to(w * dx, (len(y), n))

    interior = []
    sel = ix < nx - 1
    a = elem[sel]
    pts, ww = vertical(x0 + (ix[sel] + 1) * dx, y0 + iy[sel] * dy)
    interior.append((a, a + 1, pts, ww, np.array([1.0, 0.0])))
    sel = iy < ny - 1
    a = elem[sel]
    pts, ww = horizontal(y0 + (iy[sel] + 1) * dy, x0 + ix[sel] * dx)
    interior.append((a, a + nx, pts, ww, np.array([0.0, 1.0])))

    boundary = []
    for sel, normal, maker in (
        (ix == 0, (-1.0, 0.0), lambda s: vertical(x0 + ix[s] * dx, y0 + iy[s] * dy)),
        (ix == nx - 1, (1.0, 0.0), lambda s: vertical(x0 + (ix[s] + 1) * dx, y0 + iy[s] * dy)),
        (iy == 0, (0.0, -1.0), lambda s: horizontal(y0 + iy[s] * dy, x0 + ix[s] * dx)),
        (iy == ny - 1, (0.0, 1.0), lambda s: horizontal(y0 + (iy[s] + 1) * dy, x0 + ix[s] * dx)),
    ):
        pts, ww = maker(sel)
        boundary.append((elem[sel], pts, ww, np.array(normal)))
    return interior, boundary


def _face_block(test_v, test_dn, trial_v, trial_dn, k, w, same: bool):
    """Face contribution for test functions on side ``s``.

    ``*_dn`` are normal derivatives along the outward normal of side ``s``.
    Returns blocks ``(F, m_test, m_trial)``.
    """
    ik = (1j * k)[..., None]
    s = -1.0 if same else 1.0
    # (u_hat - u_s) d_n v* - (i k sigma_hat . n_s) v*
    flux_u = s * 0.5 * trial_v + s * BETA / ik * trial_dn
    flux_s = s * ALPHA * ik * trial_v + 0.5 * trial_dn
    wt = w[..., None]
    return np.einsum("fqi,fqj->fij", (wt * test_dn).conj(), flux_u) - np.einsum(
        "fqi,fqj->fij", (wt * test_v).conj(), flux_s
    )


def _boundary_block(v, dn, k, w):
    ik = 1j * k
    imp = dn + ik[..., None] * v  # d_n u + i k u
    flux_u = -DELTA * imp / ik[..., None]
    flux_s = dn - (1.0 - DELTA) * imp
    wt = w[..., None]
    return np.einsum("fqi,fqj->fij", (wt * dn).conj(), flux_u) - np.einsum(
        "fqi,fqj->fij", (wt * v).conj(), flux_s
    )


def _eval_on(basis: PlaneWaveBasis, elem, pts, normal):
    F, Q, _ = pts.shape
    e = np.repeat(elem, Q)
    v, g = basis.evaluate(e, pts.reshape(-1, 2))
    v = v.reshape(F, Q, -1)
    dn = (g @ normal).reshape(F, Q, -1)
    return v, dn


def assemble(space: DGSpace, omega: float, medium, g=None, f=None, quad_order: int | None = None) -> DGSystem:
    """Assemble the sparse system for data ``g(points, normals)`` and source ``f``.

    ``g`` and ``f`` may be ``None`` (zero data). Face and volume quadrature use
    ``max(4, 2 ceil(2 k h / pi) + 4)`` Gauss points per direction unless
    ``quad_order`` is given, enough for products of two plane waves.
    """
    mesh, basis = space.mesh, space.basis
    n = quad_order or _edge_rule(omega, medium, mesh, None)
    rows, cols, vals = [], [], []
    rhs = np.zeros(space.dofs, complex)
    m = basis.m

    def emit(test_elem, trial_elem, blocks):
        ti = space.index[test_elem][:, :, None]
        tj = space.index[trial_elem][:, None, :]
        ti, tj = np.broadcast_arrays(ti, tj)
        keep = (ti >= 0) & (tj >= 0)
        rows.append(ti[keep])
        cols.append(tj[keep])
        vals.append(blocks[keep])

    # volume terms
    pts, W = element_quadrature(mesh, n)
    v, gr = basis.element_values(pts)
    k2 = omega**2 * medium.xi(pts)
    wv = W[None, :, None]
    vol = np.einsum("eqid,eqjd->eij", (wv[..., None] * gr).conj(), gr) - np.einsum(
        "eqi,eqj->eij", (wv * v).conj(), k2[..., None] * v
    )
    E = mesh.n_elements
    emit(np.arange(E), np.arange(E), vol)
    if f is not None:
        fv = np.asarray(f(pts), dtype=complex)
        loc = np.einsum("eqi,eq->ei", (wv * v).conj(), fv)
        np.add.at(rhs, space.index[space.index >= 0], loc[basis.mask])

    interior, boundary = _faces(mesh, n)
    for a, b, fpts, fw, normal in interior:
        if len(a) == 0:
            continue
        k = omega * np.sqrt(medium.xi(fpts))
        va, dna = _eval_on(basis, a, fpts, normal)
        vb, dnb = _eval_on(basis, b, fpts, normal)
        # test on a: normal n_a; test on b: normal -n_a
        emit(a, a, _face_block(va, dna, va, dna, k, fw, True))
        emit(a, b, _face_block(va, dna, vb, dnb, k, fw, False))
        emit(b, b, _face_block(vb, -dnb, vb, -dnb, k, fw, True))
        emit(b, a, _face_block(vb, -dnb, va, -dna, k, fw, False))

    for a, fpts, fw, normal in boundary:
        k = omega * np.sqrt(medium.xi(fpts))
        va, dna = _eval_on(basis, a, fpts, normal)
        emit(a, a, _boundary_block(va, dna, k, fw))
        if g is not None:
            gv = np.asarray(g(fpts, np.broadcast_to(normal, fpts.shape)), dtype=complex)
            wt = fw * gv
            ik = 1j * k
            loc = np.einsum("fqi,fq->fi", dna.conj(), -DELTA * wt / ik) + np.einsum(
                "fqi,fq->fi", va.conj(), (1.0 - DELTA) * wt
            )
            idx = space.index[a]
            keep = idx >= 0
            np.add.at(rhs, idx[keep], loc[keep])

    r = np.concatenate(rows)
    c = np.concatenate(cols)
    d = np.concatenate(vals)
    order = np.lexsort((c, r))
    A = sp.coo_matrix((d[order], (r[order], c[order])), shape=(space.dofs, space.dofs)).tocsr()
    A.sum_duplicates()
    return DGSystem(space, A, rhs, float(omega))


def solve(system: DGSystem, tol: float = 1e-10) -> DGSolution:
    """Direct sparse LU up to ``2e5`` dofs, ILU-preconditioned GMRES beyond.

    The relative residual ``|A x - b| / |b|`` must not exceed ``tol``.
    """
    A, b = system.matrix, system.rhs
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        x = np.zeros_like(b)
        method = "trivial"
    elif A.shape[0] <= DIRECT_LIMIT:
        try:
            x = spla.spsolve(A.tocsc(), b)
        except RuntimeError as exc:  # singular factor
            raise SolveError(f"sparse factorisation failed: {exc}") from exc
        method = "direct"
    else:
        ilu = spla.spilu(A.tocsc(), drop_tol=1e-6, fill_factor=20)
        M = spla.LinearOperator(A.shape, ilu.solve, dtype=complex)
        x, code = spla.gmres(A, b, M=M, rtol=tol * 0.1, restart=200, maxiter=2000)
        method = "gmres"
        if code != 0:
            res = np.linalg.norm(A @ x - b) / bnorm
            raise SolveError(f"GMRES did not converge (code {code}), residual {res:.3e}")
    res = float(np.linalg.norm(A @ x - b) / bnorm) if bnorm else 0.0
    if not np.all(np.isfinite(x)) or res > tol:
        raise SolveError(f"relative residual {res:.3e} exceeds {tol:g}")
    sp_ = system.space
    return DGSolution(sp_.mesh, sp_.basis, x, system.omega, {"residual": res, "method": method, "dofs": sp_.dofs})


def solve_benchmark(bench, mesh: Mesh, omega: float, p: int = 9, use_source: bool = False) -> DGSolution:
    """Fan-basis solve of a benchmark's impedance problem on ``mesh``.

    By default the source is dropped, giving the homogeneous problem with the
    benchmark's boundary data.
    """
    basis = fan_basis(mesh, p, omega, bench.medium)
    space = DGSpace(mesh, basis)
    f = bench.f if use_source else None
    return solve(assemble(space, omega, bench.medium, bench.g, f))


# -- binary solution files ----------------------------------------------------


def save_solution(sol: DGSolution, path: str | Path, extra: dict | None = None) -> None:
    """Write ``magic | header length | JSON header | coefficients | basis arrays``."""
    arrays = sol.basis.to_arrays()
    header = {
        "dofs": sol.dofs,
        "omega": sol.omega,
        "mesh_hash": sol.mesh.hash(),
        "mesh": sol.mesh.to_dict(),
        "basis_kind": sol.basis.kind,
        "basis_omega": sol.basis.omega,
        "arrays": {k: list(v.shape) for k, v in arrays.items()},
        "info": {k: v for k, v in sol.info.items() if isinstance(v, (int, float, str))},
    }
    if extra:
        header.update(extra)
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(np.uint64(len(text)).tobytes())
    buf.write(text)
    buf.write(np.ascontiguousarray(sol.coefficients, dtype="<c16").tobytes())
    for key in sorted(arrays):
        buf.write(np.ascontiguousarray(arrays[key], dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_solution(path: str | Path) -> DGSolution:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a DG solution file")
    pos = len(_MAGIC)
    hlen = int(np.frombuffer(data[pos : pos + 8], dtype="<u8")[0])
    pos += 8
    header = json.loads(data[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    ndof = int(header["dofs"])
    coef = np.frombuffer(data[pos : pos + 16 * ndof], dtype="<c16").copy()
    pos += 16 * ndof
    arrays = {}
    for key in sorted(header["arrays"]):
        shape = tuple(header["arrays"][key])
        count = int(np.prod(shape))
        arrays[key] = np.frombuffer(data[pos : pos + 8 * count], dtype="<f8").reshape(shape).copy()
        pos += 8 * count
    if pos != len(data):
        raise ValueError(f"{path}: trailing or missing bytes")
    mesh = Mesh.from_dict(header["mesh"])
    if mesh.hash() != header["mesh_hash"]:
        raise ValueError(f"{path}: mesh hash mismatch")
    basis = PlaneWaveBasis.from_arrays(arrays, header["basis_omega"], header["basis_kind"])
    if int(basis.mask.sum()) != ndof:
        raise ValueError(f"{path}: basis size does not match dofs")
    return DGSolution(mesh, basis, coef, float(header["omega"]), dict(header.get("info", {})))
