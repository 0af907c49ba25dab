"""Command line entry point: ``immersed-cbas {sweep,converge,export,precondition,transient}``."""

from __future__ import annotations

import argparse
import logging
import math
import sys

from .geometry import ConfigError
from .harness import (
    TransientConfig,
    convergence_case,
    export_matrix,
    ingest,
    make_run_config,
    precondition_ingested,
    read_config,
    run_transient,
    slope_fit,
    sweep,
    write_preconditioner,
    FitError,
)
from .problems import PROBLEMS

log = logging.getLogger("immersed_cbas")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI file; command line flags take precedence")
    p.add_argument("--problem", choices=PROBLEMS)
    p.add_argument("--h", type=float)
    p.add_argument("--p", type=int)
    p.add_argument("--alpha", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--rescale", action="store_true", default=None, help="multiplicity rescaling of CbAS")
    p.add_argument("--threshold", type=float, help="only build blocks for elements with eta below this")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="immersed-cbas", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sweep", help="rotation sweep of raw and preconditioned conditioning")
    _common(s)
    s.add_argument("--angles", type=int)
    s.add_argument("--theta-min", type=float, dest="theta_min")
    s.add_argument("--theta-max", type=float, dest="theta_max")
    s.add_argument("--fit-cutoff", type=float, default=1e-2)

    c = sub.add_parser("converge", help="Krylov residual histories with and without CbAS")
    _common(c)
    c.add_argument("--theta", type=float, default=25.0, help="grid angle in degrees")
    c.add_argument("--maxiter", type=int)

    e = sub.add_parser("export", help="write the system matrix and block sidecar")
    _common(e)
    e.add_argument("--theta", type=float, default=25.0)

    pc = sub.add_parser("precondition", help="build CbAS from an exported matrix and sidecar")
    pc.add_argument("matrix")
    pc.add_argument("blocks")
    pc.add_argument("--rescale", action="store_true")
    pc.add_argument("--out", required=True)

    t = sub.add_parser("transient", help="theta-scheme run on the reduced channel")
    t.add_argument("--steps", type=int, default=20)
    t.add_argument("--dt", type=float, default=1e-2)
    t.add_argument("--nu", type=float, default=5e-3)
    t.add_argument("--theta", type=float, default=45.0, help="grid angle in degrees")
    t.add_argument("--h", type=float, default=1.0 / 16)
    t.add_argument("--solver", choices=("gmres", "direct"), default="direct")
    t.add_argument("--out")
    return ap


def _run_config(args, **extra):
    file_values = read_config(args.config) if args.config else {}
    keys = ("problem", "h", "p", "alpha", "depth", "rescale", "threshold", "out")
    flags = {k: getattr(args, k, None) for k in keys}
    flags.update(extra)
    return make_run_config(file_values, **flags)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "sweep":
            cfg = _run_config(args, angles=args.angles, theta_min=args.theta_min, theta_max=args.theta_max)
            recs = sweep(cfg, progress=lambda r: print(",".join(r.row()), flush=True))
            try:
                print(f"# raw slope {slope_fit(recs, args.fit_cutoff):.3f}")
                print(f"# preconditioned slope {slope_fit(recs, args.fit_cutoff, 'precond'):.3f}")
            except FitError as err:
                print(f"# slope fit skipped: {err}")
            return 2 if any(math.isnan(r.raw) or math.isnan(r.precond) for r in recs) else 0
        if args.command == "converge":
            cfg = _run_config(args, maxiter=args.maxiter)
            raw, pre = convergence_case(cfg, args.theta, cfg.out)
            print(f"unpreconditioned: {raw.iterations} iterations, converged={raw.converged}")
            print(f"preconditioned:   {pre.iterations} iterations, converged={pre.converged}")
            return 0
        if args.command == "export":
            cfg = _run_config(args)
            prefix = cfg.out or f"{cfg.problem}-{args.theta:g}"
            mtx, blk = export_matrix(cfg, args.theta, prefix)
            print(mtx)
            print(blk)
            return 0
        if args.command == "precondition":
            try:
                A, layout, specs = ingest(args.matrix, args.blocks)
            except ValueError as err:
                print(f"input error: {err}", file=sys.stderr)
                return 1
            P = precondition_ingested(A, layout, specs, args.rescale)
            write_preconditioner(P, args.out)
            print(args.out)
            return 0
        if args.command == "transient":
            tc = TransientConfig(nu=args.nu, steps=args.steps, dt=args.dt, theta_deg=args.theta, h=args.h, linear_solver=args.solver)

            def show(rec):
                print(f"step {rec.step} t={rec.time:.3f} picard={rec.picard_iterations} rho={rec.spectral.metric:.4g}", flush=True)

            run_transient(tc, args.out, progress=show)
            return 0
    except (ConfigError, FileNotFoundError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
