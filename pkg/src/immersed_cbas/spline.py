"""Tensor-product B-spline spaces on the embedding grid."""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np

from .geometry import ElementClass, Grid


class RegularityError(ValueError):
    pass


def univariate_space(p: int, alpha: int, n_elems: int, breakpoints=None):
    """Open knot vector of degree ``p`` and regularity ``alpha``.

    Interior knots are repeated ``p - alpha`` times. Returns ``(knots, n)``
    with ``n`` the number of basis functions.
    """
    if not (0 <= alpha <= p - 1):
        raise RegularityError(f"regularity {alpha} invalid for degree {p}")
    if breakpoints is None:
        breakpoints = np.arange(n_elems + 1, dtype=float)
    bp = np.asarray(breakpoints, float)
    if len(bp) != n_elems + 1:
        raise ValueError("breakpoint count does not match element count")
    knots = np.concatenate([[bp[0]] * (p + 1), np.repeat(bp[1:-1], p - alpha), [bp[-1]] * (p + 1)])
    return knots, len(knots) - p - 1


def basis_derivatives(knots, p, span, x, nd):
    """Nonzero basis functions and their derivatives.

    ``span`` and ``x`` are arrays of equal length. Returns ``ders`` of shape
    ``(nd + 1, p + 1, len(x))``; ``ders[k, r]`` is the ``k``-th derivative of
    function ``span - p + r``.
    """
    x = np.asarray(x, float)
    span = np.broadcast_to(np.asarray(span, int), x.shape)
    m = x.shape[0]
    ndu = np.zeros((p + 1, p + 1, m))
    ndu[0, 0] = 1.0
    left = np.zeros((p + 1, m))
    right = np.zeros((p + 1, m))
    for j in range(1, p + 1):
        left[j] = x - knots[span + 1 - j]
        right[j] = knots[span + j] - x
        saved = np.zeros(m)
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved

    ders = np.zeros((nd + 1, p + 1, m))
    ders[0] = ndu[:, p]
    for r in range(p + 1):
        a = np.zeros((2, p + 1, m))
        a[0, 0] = 1.0
        s1, s2 = 0, 1
        for k in range(1, min(nd, p) + 1):
            d = np.zeros(m)
            rk, pk = r - k, p - k
            if r >= k:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d = d + a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                d = d + a[s2, k] * ndu[r, pk]
            ders[k, r] = d
            s1, s2 = s2, s1
    for k in range(1, min(nd, p) + 1):
        ders[k] *= factorial(p) / factorial(p - k)
    return ders


@dataclass(frozen=True)
class Univariate:
    degree: int
    regularity: int
    breakpoints: np.ndarray
    knots: np.ndarray
    n_functions: int
    spans: np.ndarray  # knot span index of every element

    @classmethod
    def build(cls, p, alpha, breakpoints):
        bp = np.asarray(breakpoints, float)
        knots, n = univariate_space(p, alpha, len(bp) - 1, bp)
        spans = np.searchsorted(knots, bp[:-1], side="right") - 1
        return cls(p, alpha, bp, knots, n, spans)

    def first_function(self, e):
        return self.spans[e] - self.degree

    def evaluate(self, e, x, nd=2):
        """Derivatives ``(nd+1, p+1, len(x))`` of the functions on element(s) ``e``."""
        return basis_derivatives(self.knots, self.degree, self.spans[np.asarray(e)], x, nd)


@dataclass(frozen=True)
class SplineSpace:
    """Tensor-product B-spline space ``S^p_alpha`` over a grid.

    ``active`` maps tensor indices to the restricted numbering (-1 when the
    function is not supported on the physical domain).
    """

    grid: Grid
    degree: int
    regularity: int
    bases: tuple[Univariate, Univariate]
    active: np.ndarray = field(default=None)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bases[0].n_functions, self.bases[1].n_functions

    @property
    def n_functions(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def n_active(self) -> int:
        if self.active is None:
            return self.n_functions
        return int((self.active >= 0).sum())

    @property
    def n_local(self) -> int:
        return (self.degree + 1) ** 2

    def element_functions(self, e: int) -> np.ndarray:
        """Sorted tensor indices of the functions supported on element ``e``."""
        i, j = self.grid.element_ij(e)
        fx = self.bases[0].first_function(i) + np.arange(self.degree + 1)
        fy = self.bases[1].first_function(j) + np.arange(self.degree + 1)
        return (fx[:, None] * self.shape[1] + fy[None, :]).ravel()

    def element_dofs(self, e: int) -> np.ndarray:
        """Active indices of the functions on element ``e`` (same order)."""
        f = self.element_functions(e)
        return f if self.active is None else self.active[f]

    def function_support(self, f: int) -> list[int]:
        """Grid elements on which tensor function ``f`` is nonzero."""
        fx, fy = divmod(int(f), self.shape[1])
        out = []
        for ax, fi in ((0, fx), (1, fy)):
            u = self.bases[ax]
            first = u.spans - u.degree
            out.append(np.flatnonzero((first <= fi) & (fi <= u.spans)))
        ny = self.grid.shape[1]
        return sorted(int(i * ny + j) for i in out[0] for j in out[1])

    def evaluate(self, e: int, xi: np.ndarray, nd: int = 2):
        """Values, embedding-frame gradients and Hessians on element ``e``.

        Returns arrays of shapes ``(q, nloc)``, ``(q, nloc, 2)`` and
        ``(q, nloc, 2, 2)`` with local functions ordered as
        :meth:`element_functions`.
        """
        i, j = self.grid.element_ij(e)
        xi = np.atleast_2d(xi)
        q = len(xi)
        nd1 = max(nd, 0)
        bx = self.bases[0].evaluate(np.full(q, i), xi[:, 0], nd1)
        by = self.bases[1].evaluate(np.full(q, j), xi[:, 1], nd1)
        # (q, a, b)
        val = np.einsum("aq,bq->qab", bx[0], by[0]).reshape(q, -1)
        if nd == 0:
            return val, None, None
        gx = np.einsum("aq,bq->qab", bx[1], by[0]).reshape(q, -1)
        gy = np.einsum("aq,bq->qab", bx[0], by[1]).reshape(q, -1)
        grad = np.stack([gx, gy], axis=-1)
        if nd == 1:
            return val, grad, None
        hxx = np.einsum("aq,bq->qab", bx[2], by[0]).reshape(q, -1)
        hxy = np.einsum("aq,bq->qab", bx[1], by[1]).reshape(q, -1)
        hyy = np.einsum("aq,bq->qab", bx[0], by[2]).reshape(q, -1)
        hess = np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)
        return val, grad, hess

    def locate(self, xi: np.ndarray) -> np.ndarray:
        """Grid element containing each embedding-frame point."""
        xi = np.atleast_2d(xi)
        idx = []
        for ax in range(2):
            bp = self.bases[ax].breakpoints
            idx.append(np.clip(np.searchsorted(bp, xi[:, ax], side="right") - 1, 0, len(bp) - 2))
        return idx[0] * self.grid.shape[1] + idx[1]


def tensor_space(grid: Grid, p: int, alpha: int) -> SplineSpace:
    bases = tuple(Univariate.build(p, alpha, grid.breakpoints(ax)) for ax in range(2))
    return SplineSpace(grid, p, alpha, bases)


def restrict_to_domain(space: SplineSpace, classes: np.ndarray) -> SplineSpace:
    """Keep functions supported on at least one inside or trimmed element.

    Active functions are numbered lexicographically by tensor index.
    """
    used = np.zeros(space.n_functions, bool)
    for e in np.flatnonzero(np.asarray(classes) != ElementClass.OUTSIDE):
        used[space.element_functions(int(e))] = True
    active = np.full(space.n_functions, -1, dtype=int)
    active[used] = np.arange(int(used.sum()))
    return SplineSpace(space.grid, space.degree, space.regularity, space.bases, active)


@dataclass(frozen=True)
class FieldLayout:
    """Contiguous placement of scalar fields in the global unknown vector."""

    names: tuple[str, ...]
    counts: tuple[int, ...]

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.counts)[:-1]]))

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    def offset(self, name: str) -> int:
        return self.offsets[self.names.index(name)]

    def count(self, name: str) -> int:
        return self.counts[self.names.index(name)]

    def slice(self, name: str) -> slice:
        o = self.offset(name)
        return slice(o, o + self.count(name))

    def field_of(self, index: int) -> str:
        for name, o, c in zip(self.names, self.offsets, self.counts):
            if o <= index < o + c:
                return name
        raise IndexError(index)

    def global_index(self, name: str, local) -> np.ndarray:
        return self.offset(name) + np.asarray(local)


VELOCITY_FIELDS = ("vel_x", "vel_y")


def scalar_layout(space: SplineSpace) -> FieldLayout:
    return FieldLayout(("u",), (space.n_active,))


def taylor_hood(grid: Grid, classes) -> tuple[SplineSpace, SplineSpace, FieldLayout]:
    """Velocity ``S^2_0 x S^2_0`` and pressure ``S^1_0`` on the same grid."""
    vel = restrict_to_domain(tensor_space(grid, 2, 0), classes)
    pre = restrict_to_domain(tensor_space(grid, 1, 0), classes)
    layout = FieldLayout((*VELOCITY_FIELDS, "pressure"), (vel.n_active, vel.n_active, pre.n_active))
    return vel, pre, layout
