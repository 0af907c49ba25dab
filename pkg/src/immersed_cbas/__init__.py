"""Immersed isogeometric finite elements with CbAS preconditioning."""

from .cbas import (
    BlockSpec,
    CbasPreconditioner,
    MixedPreconditioner,
    SingularBlockError,
    assemble_cbas,
    build_blocks,
    build_mixed,
    multiplicity_rescale,
)
from .forms import AssembledSystem, ThetaSchemeConfig
from .geometry import ConfigError, DomainSpec, ElementClass, EmbeddingConfig, build_geometry, build_grid
from .solvers import KrylovConfig, SolveReport, SpectralReport, cg, gmres, power_extremes, spectral_metrics
from .spline import FieldLayout, SplineSpace, taylor_hood, tensor_space

__all__ = [
    "AssembledSystem",
    "BlockSpec",
    "CbasPreconditioner",
    "ConfigError",
    "DomainSpec",
    "ElementClass",
    "EmbeddingConfig",
    "FieldLayout",
    "KrylovConfig",
    "MixedPreconditioner",
    "SingularBlockError",
    "SolveReport",
    "SpectralReport",
    "SplineSpace",
    "ThetaSchemeConfig",
    "assemble_cbas",
    "build_blocks",
    "build_geometry",
    "build_grid",
    "build_mixed",
    "cg",
    "gmres",
    "multiplicity_rescale",
    "power_extremes",
    "spectral_metrics",
    "taylor_hood",
    "tensor_space",
]
