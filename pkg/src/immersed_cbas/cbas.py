"""Connectivity-based Additive-Schwarz preconditioning.

One block per trimmed element and scalar field component holds the active
functions supported on that element; the inverses of the corresponding
sub-matrices are summed, and every function outside all blocks is scaled by
its diagonal entry.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .geometry import Geometry
from .spline import FieldLayout, SplineSpace

DIAG_FLOOR = 1e-300


class SingularBlockError(np.linalg.LinAlgError):
    def __init__(self, msg, element=None, tag=None):
        super().__init__(msg)
        self.element = element
        self.tag = tag


class ScalingError(ValueError):
    """Non-positive diagonal where an SPD matrix was expected."""


@dataclass(frozen=True)
class BlockSpec:
    """Index blocks over the range ``[offset, offset + n)`` of a layout.

    ``blocks`` hold indices relative to ``offset``; ``tags`` and
    ``elements`` record the field component and source element of each block.
    """

    n: int
    blocks: tuple
    tags: tuple = ()
    elements: tuple = ()
    offset: int = 0

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("empty active index set")
        blocks = tuple(np.unique(np.asarray(b, dtype=int)) for b in self.blocks)
        for b in blocks:
            if len(b) and (b[0] < 0 or b[-1] >= self.n):
                raise IndexError("block index out of range")
        object.__setattr__(self, "blocks", blocks)
        if not self.tags:
            object.__setattr__(self, "tags", ("",) * len(blocks))
        if not self.elements:
            object.__setattr__(self, "elements", (-1,) * len(blocks))
        if not (len(self.tags) == len(self.elements) == len(blocks)):
            raise ValueError("tags/elements must match the block count")

    @property
    def multiplicity(self) -> np.ndarray:
        """Number of blocks containing each index."""
        k = np.zeros(self.n, dtype=int)
        for b in self.blocks:
            k[b] += 1
        return k

    @property
    def singletons(self) -> np.ndarray:
        return np.flatnonzero(self.multiplicity == 0)


def _field_index(layout: FieldLayout, name: str, dofs: np.ndarray) -> np.ndarray:
    return layout.offset(name) + dofs


def build_blocks(
    geo: Geometry,
    space: SplineSpace,
    layout: FieldLayout,
    fields: tuple[str, ...] | str,
    threshold: float | None = None,
) -> BlockSpec:
    """One block per trimmed element for every field in ``fields``.

    All ``fields`` must be contiguous in ``layout`` and use ``space``. With
    ``threshold`` set, only elements whose volume fraction is below it get a
    block.
    """
    fields = (fields,) if isinstance(fields, str) else tuple(fields)
    offset = layout.offset(fields[0])
    n = sum(layout.count(f) for f in fields)
    if n == 0:
        raise ValueError("empty active index set")
    blocks, tags, elements = [], [], []
    for f in fields:
        for e in geo.trimmed_elements:
            if threshold is not None and geo.elements[e].eta >= threshold:
                continue
            dofs = space.element_dofs(e)
            blocks.append(_field_index(layout, f, dofs) - offset)
            tags.append(f)
            elements.append(e)
    return BlockSpec(n, tuple(blocks), tuple(tags), tuple(elements), offset)


def spec_from_lists(n: int, blocks, tags=None, offset: int = 0) -> BlockSpec:
    tags = tuple(tags) if tags is not None else ()
    return BlockSpec(n, tuple(blocks), tags, (), offset)


@dataclass
class CbasPreconditioner:
    S: sp.csr_matrix
    spec: BlockSpec
    rescaled: bool = False

    @property
    def shape(self):
        return self.S.shape

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[0] != self.S.shape[1]:
            raise ValueError(f"vector of length {x.shape[0]} for preconditioner of size {self.S.shape[1]}")
        return self.S @ x

    def __matmul__(self, x):
        return self.apply(x)


def _is_symmetric(A: sp.spmatrix, rtol=1e-12) -> bool:
    D = abs(A - A.T)
    top = abs(A).max() if A.nnz else 0.0
    return D.nnz == 0 or D.max() <= rtol * top


def _invert_block(Ab: np.ndarray, element, tag) -> np.ndarray:
    with warnings.catch_warnings():
        # exact zero pivots are reported below with the element attached
        warnings.simplefilter("ignore", la.LinAlgWarning)
        lu, piv = la.lu_factor(Ab, check_finite=True) if Ab.size else (Ab, None)
    d = np.abs(np.diag(lu))
    if Ab.size and (not np.all(np.isfinite(lu)) or d.min() == 0.0 or d.min() <= 1e-300 * max(d.max(), 1e-300)):
        raise SingularBlockError(f"singular block on element {element} ({tag or 'field'})", element, tag)
    return la.lu_solve((lu, piv), np.eye(len(Ab)))


def assemble_cbas(
    A: sp.spmatrix,
    spec: BlockSpec,
    diag_source: sp.spmatrix | None = None,
    symmetric: bool | None = None,
) -> CbasPreconditioner:
    """``S = sum_i P_i (P_i^T A P_i)^{-1} P_i^T`` plus singleton scaling.

    ``A`` and ``diag_source`` are indexed by the block set's local indices.
    Singleton diagonal entries must be positive when the source is
    symmetric; otherwise their magnitude (floored) is used.
    """
    A = sp.csr_matrix(A)
    if A.shape != (spec.n, spec.n):
        raise ValueError(f"matrix {A.shape} does not match block spec of size {spec.n}")
    src = A if diag_source is None else sp.csr_matrix(diag_source)
    if symmetric is None:
        symmetric = _is_symmetric(src)
    rows, cols, vals = [], [], []
    for idx, tag, e in zip(spec.blocks, spec.tags, spec.elements):
        if len(idx) == 0:
            continue
        inv = _invert_block(A[idx][:, idx].toarray(), e, tag)
        rows.append(np.repeat(idx, len(idx)))
        cols.append(np.tile(idx, len(idx)))
        vals.append(inv.ravel())
    single = spec.singletons
    if len(single):
        d = src.diagonal()[single]
        if symmetric:
            if np.any(d <= 0):
                j = int(single[np.argmin(d)])
                raise ScalingError(f"non-positive diagonal entry at index {j + spec.offset}")
        else:
            d = np.maximum(np.abs(d), DIAG_FLOOR)
        rows.append(single)
        cols.append(single)
        vals.append(1.0 / d)
    if rows:
        S = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=A.shape)
    else:
        S = sp.coo_matrix(A.shape)
    return CbasPreconditioner(S.tocsr(), spec)


def multiplicity_rescale(P: CbasPreconditioner) -> CbasPreconditioner:
    """``diag(k)^{-1/2} S diag(k)^{-1/2}``; singletons count once."""
    k = np.maximum(P.spec.multiplicity, 1).astype(float)
    D = sp.diags(1.0 / np.sqrt(k))
    return replace(P, S=(D @ P.S @ D).tocsr(), rescaled=True)


@dataclass
class MixedPreconditioner:
    velocity: CbasPreconditioner
    pressure: CbasPreconditioner
    schur: sp.csr_matrix = field(repr=False, default=None)

    @property
    def n_u(self) -> int:
        return self.velocity.S.shape[0]

    @property
    def S(self) -> sp.csr_matrix:
        return sp.block_diag([self.velocity.S, self.pressure.S], format="csr")

    @property
    def shape(self):
        n = self.n_u + self.pressure.S.shape[0]
        return (n, n)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[0] != self.shape[0]:
            raise ValueError("dimension mismatch")
        return np.concatenate([self.velocity.apply(x[: self.n_u]), self.pressure.apply(x[self.n_u:])])

    def __matmul__(self, x):
        return self.apply(x)


def build_mixed(
    Avu: sp.spmatrix,
    Avp: sp.spmatrix,
    Aqu: sp.spmatrix,
    velocity_spec: BlockSpec,
    pressure_spec: BlockSpec,
    rescale: bool = False,
) -> MixedPreconditioner:
    """Velocity CbAS plus CbAS of the pressure matrix ``1/2 A_qu S_u A_vp``."""
    Su = assemble_cbas(Avu, velocity_spec)
    if rescale:
        Su = multiplicity_rescale(Su)
    T = (0.5 * (sp.csr_matrix(Aqu) @ Su.S @ sp.csr_matrix(Avp))).tocsr()
    T.eliminate_zeros()
    try:
        Sp = assemble_cbas(T, pressure_spec, T)
    except (SingularBlockError, ScalingError) as err:
        raise SingularBlockError(f"pressure preconditioner undefined: {err}", getattr(err, "element", None), "pressure") from err
    if rescale:
        Sp = multiplicity_rescale(Sp)
    return MixedPreconditioner(Su, Sp, T)


def mixed_specs(geo: Geometry, velocity: SplineSpace, pressure: SplineSpace, layout: FieldLayout, threshold=None):
    vel = build_blocks(geo, velocity, layout, ("vel_x", "vel_y"), threshold)
    pre = build_blocks(geo, pressure, layout, "pressure", threshold)
    return vel, pre


def apply(S, x):
    """Action of a CbAS (or mixed) preconditioner or plain matrix on ``x``."""
    if hasattr(S, "apply"):
        return S.apply(x)
    if S.shape[1] != np.shape(x)[0]:
        raise ValueError("dimension mismatch")
    return S @ x
