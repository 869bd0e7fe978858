"""Command line entry point ``rayhelm``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .field import benchmark, discrete_field, unit_square
from .geom import RayField, build_mesh, fit_circle_center, interpolate_ray_field, refine_to
from .nmla import nmla_probe
from .pipeline import (
    EXAMPLES,
    PipelineConfig,
    angle_errors,
    emit_report,
    exact_ray_field,
    min_wave_speed,
    probe_mesh,
    refine_mesh,
    run_pipeline,
)
from .pwdg import load_solution, save_solution, solve_benchmark
from .pwspace import global_projection_error


def _lowfreq(args, omega_tilde):
    bench = benchmark(args.example, omega_tilde)
    if getattr(args, "solution", None):
        sol = load_solution(args.solution)
        if abs(sol.omega - omega_tilde) > 1e-12 * omega_tilde:
            raise SystemExit(f"solution file is at omega {sol.omega}, expected {omega_tilde}")
        return bench, discrete_field(sol), sol.mesh
    return bench, bench.wave, None


def cmd_pipeline(args) -> int:
    cfg = PipelineConfig.from_file(args.config)
    outdir = args.outdir or cfg.outdir
    rows = run_pipeline(cfg)
    doc = emit_report(rows, outdir, cfg)
    for r in rows:
        print(f"omega={r.omega:g} status={r.status} angle={r.max_angle_error:.4e} "
              f"l2={r.rel_l2_error:.4e} dofs={r.dofs} iters={r.dls_max_iters}")
    print(f"wrote {outdir}/results.csv (run {doc['run_hash'][:12]})")
    return 0 if all(r.status == "ok" for r in rows) else 1


def cmd_solve(args) -> int:
    bench = benchmark(args.example, args.omega_tilde)
    mesh = build_mesh(unit_square, args.h if args.h else args.omega_tilde**-0.5)
    sol = solve_benchmark(bench, mesh, args.omega_tilde, args.p, use_source=args.source)
    save_solution(sol, args.out, {"example": args.example, "fan_size": args.p})
    print(f"dofs={sol.dofs} residual={sol.info['residual']:.2e} -> {args.out}")
    return 0


def cmd_probe(args) -> int:
    bench, field_, mesh = _lowfreq(args, args.omega_tilde)
    if args.point is not None:
        r0 = fit_circle_center(args.point, args.omega_tilde**-0.5, unit_square)
        est, sig = nmla_probe(field_, r0, args.omega_tilde, bench.medium,
                              rel_threshold=args.threshold, return_signal=True)
        out = open(args.signal, "w", newline="", encoding="utf-8") if args.signal else sys.stdout
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["theta", "abs", "re", "im"])
        for t, v in zip(sig.thetas, sig.values):
            w.writerow([repr(float(t)), repr(float(abs(v))), repr(float(v.real)), repr(float(v.imag))])
        if out is not sys.stdout:
            out.close()
        print(json.dumps({"angles": est.angles.tolist(), "M": est.info["M"]}), file=sys.stderr)
        return 0
    mesh = mesh or build_mesh(unit_square, args.omega_tilde**-0.5)
    rf = probe_mesh(field_, mesh, args.omega_tilde, bench.medium, args.threshold)
    rf.to_json(args.out)
    print(f"{mesh.n_elements} elements, ray counts {np.bincount(rf.counts).tolist()} -> {args.out}")
    return 0


def cmd_refine(args) -> int:
    bench, field_, _ = _lowfreq(args, args.omega_tilde)
    coarse = RayField.from_json(args.rays)
    if args.h_tilde:
        target = args.h_tilde
    else:
        target = 3.0 * max(1, coarse.n_max) * min_wave_speed(bench.medium) / args.omega_tilde
    mesh = refine_to(coarse.mesh, target) if target < coarse.mesh.h else coarse.mesh
    post, infos = refine_mesh(field_, interpolate_ray_field(coarse, mesh), args.omega_tilde, bench.medium)
    post.to_json(args.out)
    errs, _ = angle_errors(post, bench.exact_angles)
    csv_path = args.csv or str(Path(args.out).with_suffix(".csv"))
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["element_index", "iters", "J_final", "angle_error"])
        for rec, e in zip(infos, errs):
            w.writerow([rec["element_index"], rec["iters"], repr(float(rec["J"])), repr(float(e))])
    print(f"max angle error {errs.max():.4e}, max iters {max(r['iters'] for r in infos)} -> {args.out}")
    return 0


def cmd_project(args) -> int:
    bench = benchmark(args.example, args.omega)
    if args.angle_source == "exact":
        base = build_mesh(unit_square, 1.0 / args.omega)
        rf = exact_ray_field(base, bench.exact_angles)
    else:
        if not args.rays:
            raise SystemExit("--rays is required unless --angle-source exact")
        coarse = RayField.from_json(args.rays)
        rf = interpolate_ray_field(coarse, refine_to(coarse.mesh, 1.0 / args.omega))
    rel, det = global_projection_error(bench.wave, rf.mesh, rf, args.omega, bench.medium, return_details=True)
    path = Path(args.results)
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["omega", "h", "dofs", "rel_l2_error"])
        w.writerow([repr(args.omega), repr(rf.mesh.h), det["dofs"], repr(rel)])
    print(f"omega={args.omega:g} h={rf.mesh.h:.4g} dofs={det['dofs']} rel_l2_error={rel:.4e}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rayhelm", description="Ray-learning plane-wave Helmholtz toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pipeline", help="run a convergence study from a YAML/JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--outdir")
    s.set_defaults(run=cmd_pipeline)

    def example(sp):
        sp.add_argument("--example", choices=EXAMPLES, required=True)

    s = sub.add_parser("solve", help="low-frequency fan-basis DG solve")
    example(s)
    s.add_argument("--omega-tilde", type=float, required=True)
    s.add_argument("--h", type=float, help="mesh size (default omega_tilde**-0.5)")
    s.add_argument("--p", type=int, default=9, help="directions per element")
    s.add_argument("--source", action="store_true", help="include the volume source")
    s.add_argument("--out", required=True)
    s.set_defaults(run=cmd_solve)

    s = sub.add_parser("probe", help="circle probing on the coarse mesh or at one point")
    example(s)
    s.add_argument("--omega-tilde", type=float, required=True)
    s.add_argument("--solution", help="DG solution file instead of the closed-form field")
    s.add_argument("--threshold", type=float, default=0.4)
    s.add_argument("--point", type=float, nargs=2, metavar=("X", "Y"))
    s.add_argument("--signal", help="CSV file for the filtered signal (with --point)")
    s.add_argument("--out", default="rays.json")
    s.set_defaults(run=cmd_probe)

    s = sub.add_parser("refine", help="refine probed directions on the intermediate mesh")
    example(s)
    s.add_argument("--omega-tilde", type=float, required=True)
    s.add_argument("--rays", required=True)
    s.add_argument("--solution")
    s.add_argument("--h-tilde", type=float)
    s.add_argument("--out", default="post.json")
    s.add_argument("--csv")
    s.set_defaults(run=cmd_refine)

    s = sub.add_parser("project", help="projection error of the exact field onto the ray basis")
    example(s)
    s.add_argument("--omega", type=float, required=True)
    s.add_argument("--angle-source", choices=("exact", "nmla", "post"), default="post")
    s.add_argument("--rays", help="RayField JSON from probe (nmla) or refine (post)")
    s.add_argument("--results", default="results.csv")
    s.set_defaults(run=cmd_project)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.run(args)


if __name__ == "__main__":
    sys.exit(main())
