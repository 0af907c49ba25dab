"""Basis tabulation on the quadrature points of a tessellated geometry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import Geometry
from .spline import SplineSpace


@dataclass
class PointSet:
    """Quadrature points of all active elements, grouped by element."""

    elem: np.ndarray
    xi: np.ndarray
    x: np.ndarray
    w: np.ndarray
    ranges: dict  # element -> slice
    normals: np.ndarray | None = None
    sides: np.ndarray | None = None

    def __len__(self):
        return len(self.w)

    def subset(self, mask: np.ndarray) -> "PointSet":
        idx = np.flatnonzero(mask)
        elem = self.elem[idx]
        ranges = {}
        if len(idx):
            starts = np.flatnonzero(np.r_[True, elem[1:] != elem[:-1]])
            ends = np.r_[starts[1:], len(idx)]
            ranges = {int(elem[s]): slice(int(s), int(t)) for s, t in zip(starts, ends)}
        return PointSet(
            elem, self.xi[idx], self.x[idx], self.w[idx], ranges,
            None if self.normals is None else self.normals[idx],
            None if self.sides is None else self.sides[idx],
        )

    def on_sides(self, sides) -> "PointSet":
        return self.subset(np.isin(self.sides, list(sides)))


def volume_points(geo: Geometry) -> PointSet:
    elems, xis, ws, ranges = [], [], [], {}
    start = 0
    for e in geo.active_elements:
        g = geo.elements[e]
        n = len(g.vol_weights)
        elems.append(np.full(n, e))
        xis.append(g.vol_points)
        ws.append(g.vol_weights)
        ranges[e] = slice(start, start + n)
        start += n
    xi = np.vstack(xis)
    return PointSet(np.concatenate(elems), xi, geo.grid.to_physical(xi), np.concatenate(ws), ranges)


def boundary_points(geo: Geometry) -> PointSet:
    elems, xis, ws, ns, ss, ranges = [], [], [], [], [], {}
    start = 0
    for e in geo.active_elements:
        g = geo.elements[e]
        n = len(g.bnd_weights)
        if n == 0:
            continue
        elems.append(np.full(n, e))
        xis.append(g.bnd_points)
        ws.append(g.bnd_weights)
        ns.append(g.bnd_normals)
        ss.append(g.bnd_sides)
        ranges[e] = slice(start, start + n)
        start += n
    if not elems:
        z = np.zeros((0, 2))
        return PointSet(np.zeros(0, int), z, z, np.zeros(0), {}, z, np.zeros(0, dtype="<U6"))
    xi = np.vstack(xis)
    return PointSet(
        np.concatenate(elems), xi, geo.grid.to_physical(xi), np.concatenate(ws), ranges,
        np.vstack(ns), np.concatenate(ss),
    )


@dataclass
class Tabulation:
    """A spline space evaluated on a point set, physical-frame derivatives."""

    space: SplineSpace
    points: PointSet
    vals: np.ndarray  # (Q, nloc)
    grads: np.ndarray  # (Q, nloc, 2)
    lap: np.ndarray  # (Q, nloc)
    cols: np.ndarray  # (Q, nloc) active indices

    @property
    def n(self) -> int:
        return self.space.n_active

    def _sparse(self, data):
        Q, k = data.shape
        rows = np.repeat(np.arange(Q), k)
        return sp.csr_matrix((data.ravel(), (rows, self.cols.ravel())), shape=(Q, self.n))

    def V(self, scale=None):
        return self._sparse(self.vals if scale is None else self.vals * scale[:, None])

    def D(self, c: int, scale=None):
        d = self.grads[:, :, c]
        return self._sparse(d if scale is None else d * scale[:, None])

    def Dvec(self, vec: np.ndarray):
        """Directional derivative along a per-point vector field."""
        return self._sparse(np.einsum("qkc,qc->qk", self.grads, vec))

    def L(self):
        return self._sparse(self.lap)

    def field(self, coeffs):
        return np.einsum("qk,qk->q", self.vals, np.asarray(coeffs)[self.cols])

    def field_grad(self, coeffs):
        return np.einsum("qkc,qk->qc", self.grads, np.asarray(coeffs)[self.cols])

    def subset(self, mask) -> "Tabulation":
        idx = np.flatnonzero(mask)
        return Tabulation(self.space, self.points.subset(mask), self.vals[idx], self.grads[idx], self.lap[idx], self.cols[idx])

    def on_sides(self, sides) -> "Tabulation":
        return self.subset(np.isin(self.points.sides, list(sides)))

    def local(self, e: int):
        """Values and gradients on element ``e`` plus its active dofs."""
        r = self.points.ranges[e]
        return self.vals[r], self.grads[r], self.points.w[r], self.space.element_dofs(e)


def tabulate(space: SplineSpace, pts: PointSet) -> Tabulation:
    Q, k = len(pts), space.n_local
    vals = np.zeros((Q, k))
    grads = np.zeros((Q, k, 2))
    lap = np.zeros((Q, k))
    cols = np.zeros((Q, k), dtype=int)
    R = space.grid.R
    for e, r in pts.ranges.items():
        v, g, hss = space.evaluate(e, pts.xi[r], nd=2)
        vals[r] = v
        grads[r] = g @ R.T
        lap[r] = hss[..., 0, 0] + hss[..., 1, 1]
        dofs = space.element_dofs(e)
        if np.any(dofs < 0):
            raise ValueError(f"inactive function on active element {e}")
        cols[r] = dofs
    return Tabulation(space, pts, vals, grads, lap, cols)


def weighted(A: sp.spmatrix, B: sp.spmatrix, w: np.ndarray) -> sp.csr_matrix:
    """``A^T diag(w) B``."""
    return (A.T @ sp.diags(w) @ B).tocsr()
