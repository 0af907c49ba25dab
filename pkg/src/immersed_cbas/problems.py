"""Benchmark problem definitions on the rotated circle-in-rectangle domain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forms import (
    AssembledSystem,
    MixedDiscretization,
    ScalarDiscretization,
    assemble_convdiff_supg,
    assemble_oseen,
    assemble_poisson_nonsymmetric,
    assemble_poisson_symmetric,
    assemble_stokes,
)
from .geometry import DIRICHLET, NEUMANN, ConfigError, DomainSpec, EmbeddingConfig, Geometry, build_geometry
from .spline import restrict_to_domain, taylor_hood, tensor_space

PROBLEMS = ("poisson-sym", "poisson-nonsym", "convdiff", "stokes", "navier-stokes")
MIXED = ("stokes", "navier-stokes")


def poisson_domain(base: DomainSpec | None = None) -> DomainSpec:
    """Dirichlet on the rectangle, Neumann on the hole."""
    base = base or DomainSpec()
    tags = {s: DIRICHLET for s in ("left", "right", "bottom", "top")}
    tags["circle"] = NEUMANN
    return DomainSpec(base.lower, base.upper, base.center, base.radius, tags)


def flow_domain(base: DomainSpec | None = None) -> DomainSpec:
    """Traction-free right side, Dirichlet everywhere else."""
    base = base or DomainSpec()
    tags = {s: DIRICHLET for s in ("left", "bottom", "top", "circle")}
    tags["right"] = NEUMANN
    return DomainSpec(base.lower, base.upper, base.center, base.radius, tags)


def convdiff_data(x, sides):
    """One on the bottom side and the lower part of the left side."""
    lower_left = (sides == "left") & (x[:, 1] < -0.25)
    return np.where((sides == "bottom") | lower_left, 1.0, 0.0)


def poiseuille(domain: DomainSpec):
    """Parabolic inflow on the left side with unit peak, zero elsewhere."""
    y0, y1 = domain.lower[1], domain.upper[1]
    mid, half = 0.5 * (y0 + y1), 0.5 * (y1 - y0)

    def g(x, sides):
        out = np.zeros((len(x), 2))
        on = sides == "left"
        out[on, 0] = 1.0 - ((x[on, 1] - mid) / half) ** 2
        return out

    return g


@dataclass(frozen=True)
class ProblemConfig:
    problem: str = "poisson-sym"
    h: float = 1.0 / 16
    p: int = 2
    alpha: int = 1
    depth: int = 3
    eps: float = 1e-6
    nu: float = 1e-2
    velocity: tuple[float, float] = (1.0, 1.0)
    domain: DomainSpec | None = None

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ConfigError(f"unknown problem {self.problem!r}; choose from {PROBLEMS}")
        if self.h <= 0:
            raise ConfigError("mesh size must be positive")
        if not 0 <= self.alpha <= self.p - 1:
            raise ConfigError(f"regularity {self.alpha} invalid for degree {self.p}")
        if self.depth < 0:
            raise ConfigError("tessellation depth must be non-negative")


@dataclass
class ProblemInstance:
    config: ProblemConfig
    geometry: Geometry
    discretization: ScalarDiscretization | MixedDiscretization

    @property
    def mixed(self) -> bool:
        return self.config.problem in MIXED


def build_instance(cfg: ProblemConfig, theta: float) -> ProblemInstance:
    """Geometry and tabulated spaces for the problem at grid angle ``theta`` (radians)."""
    if cfg.problem in MIXED:
        domain = flow_domain(cfg.domain)
    elif cfg.problem.startswith("poisson"):
        domain = poisson_domain(cfg.domain)
    else:
        base = cfg.domain or DomainSpec()
        domain = DomainSpec(base.lower, base.upper, base.center, base.radius)
    geo = build_geometry(domain, EmbeddingConfig(theta=theta, h=cfg.h, depth=cfg.depth))
    if cfg.problem in MIXED:
        vel, pre, layout = taylor_hood(geo.grid, geo.classes)
        disc = MixedDiscretization.build(geo, vel, pre, layout, gD=poiseuille(domain))
    else:
        space = restrict_to_domain(tensor_space(geo.grid, cfg.p, cfg.alpha), geo.classes)
        disc = ScalarDiscretization.build(geo, space)
    return ProblemInstance(cfg, geo, disc)


def assemble(inst: ProblemInstance, convective=None) -> AssembledSystem:
    """Assemble the benchmark system; ``convective`` is the Oseen field."""
    cfg, disc = inst.config, inst.discretization
    if cfg.problem == "poisson-sym":
        return assemble_poisson_symmetric(disc, f=1.0, gD=0.0, gN=0.0)
    if cfg.problem == "poisson-nonsym":
        return assemble_poisson_nonsymmetric(disc, f=1.0, gD=0.0, gN=0.0)
    if cfg.problem == "convdiff":
        return assemble_convdiff_supg(disc, w=cfg.velocity, eps=cfg.eps, gD=convdiff_data)
    if cfg.problem == "stokes":
        return assemble_stokes(disc)
    return assemble_oseen(disc, convective, nu=cfg.nu)
