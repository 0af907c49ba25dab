"""Benchmark driver: rotation sweeps, slope fits, solver comparisons, exports."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from .cbas import (
    BlockSpec,
    assemble_cbas,
    build_blocks,
    build_mixed,
    mixed_specs,
    multiplicity_rescale,
)
from .forms import AssembledSystem, ThetaSchemeConfig
from .geometry import ConfigError, DomainSpec
from .problems import MIXED, PROBLEMS, ProblemConfig, ProblemInstance, assemble, build_instance
from .solvers import KrylovConfig, SolveReport, cg, gmres, picard, solve_stokes, spectral_metrics, transient_drive
from .spline import FieldLayout, scalar_layout

log = logging.getLogger(__name__)

CSV_FIELDS = ("problem", "theta_deg", "eta", "metric_kind", "raw", "precond", "walltime_s")
SYMMETRIC = ("poisson-sym", "stokes")


@dataclass(frozen=True)
class RunConfig:
    problem: str = "poisson-sym"
    h: float = 1.0 / 16
    p: int = 2
    alpha: int = 1
    angles: int = 100
    theta_min: float = 0.0
    theta_max: float = 45.0
    depth: int = 3
    rescale: bool = False
    threshold: float | None = None
    spectral_tol: float = 1e-6
    krylov_tol: float = 1e-10
    maxiter: int = 5000
    nu: float = 1e-2
    eps: float = 1e-6
    picard_tol: float = 1e-6
    picard_solver: str = "direct"
    out: str | None = None

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}; choose from {', '.join(PROBLEMS)}")
        if self.angles < 1:
            raise ConfigError("need at least one angle")
        if not 0.0 <= self.theta_min <= self.theta_max <= 45.0:
            raise ConfigError("sweep angles must satisfy 0 <= min <= max <= 45 degrees")
        if self.h <= 0 or self.depth < 0:
            raise ConfigError("mesh size must be positive and depth non-negative")
        if not 0 <= self.alpha <= self.p - 1:
            raise ConfigError(f"regularity {self.alpha} invalid for degree {self.p}")
        if not 0 < self.spectral_tol < 1:
            raise ConfigError("spectral tolerance must lie in (0, 1)")
        if self.picard_solver not in ("gmres", "direct"):
            raise ConfigError("picard_solver must be 'gmres' or 'direct'")

    def problem_config(self, domain: DomainSpec | None = None) -> ProblemConfig:
        return ProblemConfig(
            self.problem, self.h, self.p, self.alpha, self.depth, self.eps, self.nu, domain=domain
        )

    def angle_list(self) -> np.ndarray:
        return np.linspace(self.theta_min, self.theta_max, self.angles)

    @property
    def krylov(self) -> KrylovConfig:
        return KrylovConfig(tol=self.krylov_tol, maxiter=self.maxiter)


@dataclass
class SweepRecord:
    problem: str
    theta_deg: float
    eta: float
    metric_kind: str
    raw: float
    precond: float
    walltime_s: float

    def row(self) -> list[str]:
        return [
            self.problem, repr(float(self.theta_deg)), repr(float(self.eta)), self.metric_kind,
            repr(float(self.raw)), repr(float(self.precond)), f"{self.walltime_s:.3f}",
        ]


@dataclass
class Case:
    """A fully assembled benchmark case with its preconditioner."""

    instance: ProblemInstance
    system: AssembledSystem
    preconditioner: object
    specs: tuple

    @property
    def symmetric(self) -> bool:
        return self.instance.config.problem in SYMMETRIC


def block_specs(inst: ProblemInstance, threshold=None) -> tuple:
    d = inst.discretization
    if inst.mixed:
        return mixed_specs(inst.geometry, d.velocity, d.pressure, d.layout, threshold)
    return (build_blocks(inst.geometry, d.space, scalar_layout(d.space), "u", threshold),)


def build_preconditioner(system: AssembledSystem, specs, rescale=False):
    if len(specs) == 2:
        b = system.blocks
        return build_mixed(b["vu"], b["vp"], b["qu"], specs[0], specs[1], rescale)
    P = assemble_cbas(system.A, specs[0])
    return multiplicity_rescale(P) if rescale else P


def build_case(cfg: RunConfig, theta_deg: float, krylov: KrylovConfig | None = None) -> Case:
    """Assemble the benchmark matrix at one angle.

    For Navier-Stokes the matrix is the Oseen operator at the converged
    Picard iterate.
    """
    inst = build_instance(cfg.problem_config(), math.radians(theta_deg))
    specs = block_specs(inst, cfg.threshold)
    if cfg.problem == "navier-stokes":
        kry = krylov or KrylovConfig(tol=1e-12, maxiter=cfg.maxiter)
        rep = picard(
            inst.discretization, specs[0], specs[1], nu=cfg.nu, tol=cfg.picard_tol, krylov=kry,
            rescale=cfg.rescale, linear_solver=cfg.picard_solver,
        )
        if not rep.converged:
            raise RuntimeError(f"Picard iteration did not converge at theta={theta_deg}")
        system = rep.system
        system.meta["picard_iterations"] = rep.iterations
        system.meta["picard_increments"] = rep.increments
    else:
        system = assemble(inst)
    P = build_preconditioner(system, specs, cfg.rescale)
    return Case(inst, system, P, specs)


def evaluate_angle(cfg: RunConfig, theta_deg: float) -> SweepRecord:
    t0 = time.perf_counter()
    case = build_case(cfg, theta_deg)
    sym = case.symmetric
    raw = spectral_metrics(case.system.A, None, sym, tol=cfg.spectral_tol)
    pre = spectral_metrics(case.system.A, case.preconditioner, sym, tol=cfg.spectral_tol)
    return SweepRecord(
        cfg.problem, float(theta_deg), case.instance.geometry.eta, raw.kind, raw.metric, pre.metric,
        time.perf_counter() - t0,
    )


def sweep(cfg: RunConfig, progress=None) -> list[SweepRecord]:
    """One record per angle; failures become NaN rows and the sweep continues."""
    kind = "kappa2" if cfg.problem in SYMMETRIC else "rho"
    records = []
    for theta in cfg.angle_list():
        try:
            rec = evaluate_angle(cfg, float(theta))
        except Exception as err:  # one bad cut must not end the sweep
            log.error("angle %.6g failed: %s", theta, err)
            rec = SweepRecord(cfg.problem, float(theta), float("nan"), kind, float("nan"), float("nan"), 0.0)
        records.append(rec)
        if progress is not None:
            progress(rec)
    if cfg.out:
        write_csv(records, cfg.out)
    return records


def write_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow(r.row())


def read_csv(path) -> list[SweepRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        SweepRecord(
            r["problem"], float(r["theta_deg"]), float(r["eta"]), r["metric_kind"],
            float(r["raw"]), float(r["precond"]), float(r["walltime_s"]),
        )
        for r in rows
    ]


class FitError(ValueError):
    pass


def slope_fit(records, cutoff: float = 1e-2, field: str = "raw", min_records: int = 10, min_decades: float = 3.0) -> float:
    """Least-squares exponent of ``metric ~ eta^s`` over records with ``eta < cutoff``."""
    eta = np.array([r.eta for r in records], float)
    val = np.array([getattr(r, field) for r in records], float)
    ok = np.isfinite(eta) & np.isfinite(val) & (eta > 0) & (val > 0) & (eta < cutoff)
    if ok.sum() < min_records:
        raise FitError(f"only {int(ok.sum())} usable records below eta={cutoff}")
    le, lv = np.log10(eta[ok]), np.log10(val[ok])
    if le.max() - le.min() < min_decades:
        raise FitError(f"eta spans {le.max() - le.min():.2f} decades, need {min_decades}")
    slope, _ = np.polyfit(le, lv, 1)
    return float(slope)


# --------------------------------------------------------------------------
# solver comparison


def convergence_case(cfg: RunConfig, theta_deg: float, out: str | None = None) -> tuple[SolveReport, SolveReport]:
    """Unpreconditioned and CbAS-preconditioned Krylov histories at one angle."""
    case = build_case(cfg, theta_deg)
    A, b = case.system.A, case.system.b
    solver = cg if cfg.problem == "poisson-sym" else gmres
    _, raw = solver(A, b, None, cfg.krylov)
    _, pre = solver(A, b, case.preconditioner, cfg.krylov)
    if out:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("iteration", "raw", "precond"))
            for k in range(max(len(raw.history), len(pre.history))):
                rv = repr(raw.history[k]) if k < len(raw.history) else ""
                pv = repr(pre.history[k]) if k < len(pre.history) else ""
                w.writerow((k, rv, pv))
    return raw, pre


# --------------------------------------------------------------------------
# matrix exchange


def _field_blocks(specs, layout: FieldLayout):
    for spec in specs:
        for idx, tag in zip(spec.blocks, spec.tags):
            yield tag, idx + spec.offset


def write_blocks(path, specs, layout: FieldLayout) -> None:
    """One line per block: field tag then sorted 1-based global indices."""
    with open(path, "w") as fh:
        fh.write("# layout " + " ".join(f"{n}:{c}" for n, c in zip(layout.names, layout.counts)) + "\n")
        for tag, idx in _field_blocks(specs, layout):
            fh.write(tag + " " + " ".join(str(int(i) + 1) for i in idx) + "\n")


def read_blocks(path):
    """Inverse of :func:`write_blocks`: layout and one block set per field group."""
    layout = None
    lines = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts and parts[0] == "layout":
                    names, counts = zip(*(p.split(":") for p in parts[1:]))
                    layout = FieldLayout(tuple(names), tuple(int(c) for c in counts))
                continue
            tag, *idx = line.split()
            lines.append((tag, np.array([int(i) - 1 for i in idx], dtype=int)))
    if layout is None:
        raise ValueError(f"{path}: missing layout header")
    return layout, specs_from_blocks(layout, lines)


def specs_from_blocks(layout: FieldLayout, lines) -> tuple:
    groups = [("vel_x", "vel_y"), ("pressure",)] if "pressure" in layout.names else [tuple(layout.names)]
    specs = []
    for group in groups:
        off = layout.offset(group[0])
        n = sum(layout.count(f) for f in group)
        blocks = [idx - off for tag, idx in lines if tag in group]
        tags = [tag for tag, _ in lines if tag in group]
        specs.append(BlockSpec(n, tuple(blocks), tuple(tags), (), off))
    return tuple(specs)


def split_mixed(A: sp.spmatrix, layout: FieldLayout):
    A = sp.csr_matrix(A)
    nu = layout.count("vel_x") + layout.count("vel_y")
    return {"vu": A[:nu, :nu], "vp": A[:nu, nu:], "qu": A[nu:, :nu]}


def export_matrix(cfg: RunConfig, theta_deg: float, prefix: str) -> tuple[Path, Path]:
    case = build_case(cfg, theta_deg)
    mtx, blk = Path(f"{prefix}.mtx"), Path(f"{prefix}.blocks")
    scipy.io.mmwrite(
        str(mtx), sp.coo_matrix(case.system.A), precision=17,
        comment=f"{cfg.problem} theta_deg={theta_deg!r} eta={case.instance.geometry.eta!r}",
    )
    write_blocks(blk, case.specs, case.system.layout)
    return mtx, blk


def ingest(mtx_path, blocks_path):
    for path in (mtx_path, blocks_path):
        if not Path(path).is_file():
            raise FileNotFoundError(f"no such file: {path}")
    A = sp.csr_matrix(scipy.io.mmread(str(mtx_path)))
    layout, specs = read_blocks(blocks_path)
    if A.shape != (layout.total, layout.total):
        raise ValueError(f"matrix {A.shape} does not match layout size {layout.total}")
    return A, layout, specs


def precondition_ingested(A, layout: FieldLayout, specs, rescale=False):
    if len(specs) == 2:
        b = split_mixed(A, layout)
        return build_mixed(b["vu"], b["vp"], b["qu"], specs[0], specs[1], rescale)
    P = assemble_cbas(A, specs[0])
    return multiplicity_rescale(P) if rescale else P


def write_preconditioner(P, path) -> None:
    scipy.io.mmwrite(str(path), sp.coo_matrix(P.S), precision=17)


# --------------------------------------------------------------------------
# transient channel


@dataclass(frozen=True)
class TransientConfig:
    """Reduced channel: the large channel scaled by one half."""

    lower: tuple[float, float] = (-1.0, -0.5)
    upper: tuple[float, float] = (3.0, 0.5)
    center: tuple[float, float] = (0.0, -5e-4)
    radius: float = 0.125
    theta_deg: float = 45.0
    nu: float = 5e-3
    steps: int = 20
    dt: float = 1e-2
    theta_scheme: float = 0.5
    h: float = 1.0 / 16
    depth: int = 3
    picard_tol: float = 1e-6
    spectral_tol: float = 1e-6
    # inner solves; "gmres" uses the CbAS-preconditioned Krylov solver
    linear_solver: str = "direct"

    def domain(self) -> DomainSpec:
        return DomainSpec(self.lower, self.upper, self.center, self.radius)


def run_transient(tc: TransientConfig, out: str | None = None, progress=None):
    pc = ProblemConfig("navier-stokes", tc.h, 2, 0, tc.depth, nu=tc.nu, domain=tc.domain())
    inst = build_instance(pc, math.radians(tc.theta_deg))
    d = inst.discretization
    vs, ps = mixed_specs(inst.geometry, d.velocity, d.pressure, d.layout)
    kry = KrylovConfig(tol=1e-12)
    x0, rep, _, _ = solve_stokes(d, vs, ps, kry, linear_solver=tc.linear_solver)
    steps = transient_drive(
        d, vs, ps, x0, ThetaSchemeConfig(tc.theta_scheme, tc.dt, tc.steps), nu=tc.nu, tol=tc.picard_tol,
        krylov=kry, spectral_tol=tc.spectral_tol, callback=progress, linear_solver=tc.linear_solver,
    )
    if out:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("step", "time", "picard_iterations", "lam_max", "lam_min", "precond_rho"))
            for s in steps:
                sr = s.spectral
                w.writerow((s.step, repr(s.time), s.picard_iterations, repr(sr.lam_max), repr(sr.lam_min), repr(sr.metric)))
    return inst, steps


# --------------------------------------------------------------------------
# configuration files

_SECTIONS = {
    "run": ("problem", "angles", "theta_min", "theta_max", "out"),
    "geometry": ("h", "depth"),
    "basis": ("p", "alpha"),
    "preconditioner": ("rescale", "threshold"),
    "solver": ("spectral_tol", "krylov_tol", "maxiter", "picard_tol", "picard_solver"),
    "physics": ("nu", "eps"),
}


def _coerce(name: str, text: str):
    ftype = {f.name: f.type for f in dataclasses.fields(RunConfig)}[name]
    text = text.strip()
    if "bool" in str(ftype):
        return text.lower() in ("1", "true", "yes", "on")
    if "int" in str(ftype):
        return int(text)
    if "float" in str(ftype):
        if text.lower() in ("", "none"):
            return None
        if "/" in text:
            num, den = text.split("/")
            return float(num) / float(den)
        return float(text)
    return text


def read_config(path) -> dict:
    """Read ``key = value`` pairs from the known sections of an INI file."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read config file {path}")
    out = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, val in cp[section].items():
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                out[key] = _coerce(key, val)
            except ValueError as err:
                raise ConfigError(f"bad value for {key}: {val!r}") from err
    return out


def make_run_config(file_values: dict | None = None, **overrides) -> RunConfig:
    values = dict(file_values or {})
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from err
