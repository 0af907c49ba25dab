"""Embedding grids, element classification and bisection-based tessellation.

All tessellation work happens in the embedding frame ``xi``, in which the grid
is axis aligned. The physical frame is obtained by rotating with the grid
angle, ``x = R(theta) @ xi``. Quadrature points are stored in the embedding
frame (that is where the B-splines live); normals are stored in the physical
frame because the weak forms are written there.
"""

from __future__ import annotations

import enum
import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq

log = logging.getLogger(__name__)

SIDES = ("left", "right", "bottom", "top")
DIRICHLET = "dirichlet"
NEUMANN = "neumann"

# relative to the grid size h
_CLASSIFY_TOL = 1e-12
MEASURE_ZERO_ETA = 1e-14


class ConfigError(ValueError):
    """Invalid domain or embedding configuration."""


class ElementClass(enum.IntEnum):
    INSIDE = 0
    OUTSIDE = 1
    TRIMMED = 2


@dataclass(frozen=True)
class DomainSpec:
    """Rectangle ``lower < x < upper`` minus a closed disk.

    ``tags`` maps each of ``left``, ``right``, ``bottom``, ``top`` and
    ``circle`` to ``"dirichlet"`` or ``"neumann"``.
    """

    lower: tuple[float, float] = (-0.5, -0.5)
    upper: tuple[float, float] = (0.5, 0.5)
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 0.25
    tags: dict = field(
        default_factory=lambda: {s: DIRICHLET for s in (*SIDES, "circle")}
    )

    def __post_init__(self):
        lo, up = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if np.any(up <= lo):
            raise ConfigError("empty outer rectangle")
        c = np.asarray(self.center, float)
        if self.radius <= 0:
            raise ConfigError("exclusion radius must be positive")
        if np.any(c - self.radius <= lo) or np.any(c + self.radius >= up):
            raise ConfigError("exclusion must lie strictly inside the outer boundary")
        missing = {*SIDES, "circle"} - set(self.tags)
        if missing:
            raise ConfigError(f"untagged boundary segments: {sorted(missing)}")
        bad = {v for v in self.tags.values()} - {DIRICHLET, NEUMANN}
        if bad:
            raise ConfigError(f"unknown boundary tags: {sorted(bad)}")

    @classmethod
    def square_with_hole(cls, tags: dict | None = None) -> "DomainSpec":
        """The origin-centred unit square with a hole of radius 1/4."""
        base = {s: DIRICHLET for s in (*SIDES, "circle")}
        base.update(tags or {})
        return cls(tags=base)

    @property
    def area(self) -> float:
        (x0, y0), (x1, y1) = self.lower, self.upper
        return (x1 - x0) * (y1 - y0) - math.pi * self.radius**2

    def side_segments(self) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Physical endpoints and outward normal of each rectangle side."""
        (x0, y0), (x1, y1) = self.lower, self.upper
        return {
            "left": (np.array([x0, y0]), np.array([x0, y1]), np.array([-1.0, 0.0])),
            "right": (np.array([x1, y0]), np.array([x1, y1]), np.array([1.0, 0.0])),
            "bottom": (np.array([x0, y0]), np.array([x1, y0]), np.array([0.0, -1.0])),
            "top": (np.array([x0, y1]), np.array([x1, y1]), np.array([0.0, 1.0])),
        }

    def level_set(self, x: np.ndarray) -> np.ndarray:
        """Negative inside the physical domain (intersection of both parts)."""
        x = np.atleast_2d(x)
        lo, up = np.asarray(self.lower), np.asarray(self.upper)
        mid, half = 0.5 * (lo + up), 0.5 * (up - lo)
        box = np.max(np.abs(x - mid) - half, axis=-1)
        circ = self.radius - np.linalg.norm(x - np.asarray(self.center), axis=-1)
        return np.maximum(box, circ)


@dataclass(frozen=True)
class EmbeddingConfig:
    theta: float = 0.0
    h: float = 1.0 / 16
    depth: int = 3
    # Gauss points per direction on square cells, per collapsed direction on
    # triangles, and on boundary segments
    square_order: int = 4
    triangle_order: int = 5
    boundary_order: int = 7
    # optional fixed element count per direction (centred on the origin)
    n_elements: tuple[int, int] | None = None

    def __post_init__(self):
        if not self.h > 0:
            raise ConfigError("mesh size must be positive")
        if self.depth < 0:
            raise ConfigError("tessellation depth must be non-negative")
        if min(self.square_order, self.triangle_order, self.boundary_order) < 1:
            raise ConfigError("quadrature orders must be positive")


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Grid:
    """Uniform axis-aligned grid in the embedding frame.

    Element ``e`` covers ``[xi0 + i*h, xi0 + (i+1)*h] x [eta0 + j*h, ...]``
    with ``e = i * ny + j``.
    """

    theta: float
    h: float
    origin_index: tuple[int, int]  # integer index of the lower-left vertex
    shape: tuple[int, int]  # elements per direction

    @property
    def R(self) -> np.ndarray:
        return rotation(self.theta)

    @property
    def n_elements(self) -> int:
        return self.shape[0] * self.shape[1]

    def breakpoints(self, axis: int) -> np.ndarray:
        i0 = self.origin_index[axis]
        return (i0 + np.arange(self.shape[axis] + 1)) * self.h

    def element_ij(self, e: int) -> tuple[int, int]:
        return divmod(int(e), self.shape[1])

    def element_box(self, e: int) -> tuple[np.ndarray, np.ndarray]:
        i, j = self.element_ij(e)
        lo = (np.array(self.origin_index) + (i, j)) * self.h
        return lo, lo + self.h

    def to_physical(self, xi: np.ndarray) -> np.ndarray:
        return np.asarray(xi) @ self.R.T

    def to_embedding(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.R


def build_grid(domain: DomainSpec, cfg: EmbeddingConfig) -> Grid:
    """Smallest grid (with a vertex at the origin) covering the rotated domain."""
    (x0, y0), (x1, y1) = domain.lower, domain.upper
    corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    xi = corners @ rotation(cfg.theta)
    h = cfg.h
    tol = _CLASSIFY_TOL
    lo = np.floor(xi.min(axis=0) / h + tol).astype(int)
    hi = np.ceil(xi.max(axis=0) / h - tol).astype(int)
    if cfg.n_elements is not None:
        n = np.asarray(cfg.n_elements, int)
        lo_f, hi_f = -(n // 2), n - n // 2
        if np.any(lo_f > lo) or np.any(hi_f < hi):
            raise ConfigError("embedding rectangle does not cover the physical domain")
        lo, hi = lo_f, hi_f
    return Grid(cfg.theta, h, (int(lo[0]), int(lo[1])), (int(hi[0] - lo[0]), int(hi[1] - lo[1])))


# --------------------------------------------------------------------------
# implicit constraints in the embedding frame


class _HalfPlane:
    """``a . xi <= c`` is inside."""

    def __init__(self, a, c, name):
        self.a, self.c, self.name = np.asarray(a, float), float(c), name

    def value(self, p):
        return p @ self.a - self.c

    def classify_box(self, lo, hi, tol):
        verts = _box_vertices(lo, hi)
        v = self.value(verts)
        if v.max() <= tol:
            return ElementClass.INSIDE
        if v.min() >= -tol:
            return ElementClass.OUTSIDE
        return ElementClass.TRIMMED

    def root(self, s, e, fs, fe):
        t = fs / (fs - fe)
        return s + t * (e - s)


class _DiskExclusion:
    """``|xi - c| >= r`` is inside."""

    name = "circle"

    def __init__(self, c, r):
        self.c, self.r = np.asarray(c, float), float(r)

    def value(self, p):
        return self.r - np.linalg.norm(np.atleast_2d(p) - self.c, axis=-1)

    def classify_box(self, lo, hi, tol):
        nearest = np.clip(self.c, lo, hi)
        dmin = np.linalg.norm(nearest - self.c)
        dmax = np.linalg.norm(_box_vertices(lo, hi) - self.c, axis=1).max()
        if dmin >= self.r - tol:
            return ElementClass.INSIDE
        if dmax <= self.r + tol:
            return ElementClass.OUTSIDE
        return ElementClass.TRIMMED

    def root(self, s, e, fs, fe):
        f = lambda t: self.r - np.linalg.norm(s + t * (e - s) - self.c)
        t = brentq(f, 0.0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        return s + t * (e - s)


def _box_vertices(lo, hi):
    return np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])


def _constraints(domain: DomainSpec, grid: Grid):
    R = grid.R
    out = []
    for name, (p0, _, n) in domain.side_segments().items():
        out.append(_HalfPlane(R.T @ n, float(n @ p0), name))
    out.append(_DiskExclusion(R.T @ np.asarray(domain.center, float), domain.radius))
    return out


def classify_elements(grid: Grid, domain: DomainSpec) -> np.ndarray:
    """Exact box classification of every grid element (array of ElementClass)."""
    cons = _constraints(domain, grid)
    tol = _CLASSIFY_TOL * grid.h
    out = np.empty(grid.n_elements, dtype=int)
    for e in range(grid.n_elements):
        out[e] = _classify_box(cons, *grid.element_box(e), tol)
    return out


def _classify_box(cons, lo, hi, tol):
    state = ElementClass.INSIDE
    for con in cons:
        s = con.classify_box(lo, hi, tol)
        if s == ElementClass.OUTSIDE:
            return ElementClass.OUTSIDE
        if s == ElementClass.TRIMMED:
            state = ElementClass.TRIMMED
    return state


# --------------------------------------------------------------------------
# quadrature rules


@functools.lru_cache(maxsize=None)
def _gauss01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@functools.lru_cache(maxsize=None)
def _collapsed01(n):
    t, w = _gauss01(n)
    U, V = np.meshgrid(t, t, indexing="ij")
    return U.ravel(), V.ravel(), np.outer(w, w).ravel()


def square_rule(lo, hi, n):
    t, w = _gauss01(n)
    d = hi - lo
    X, Y = np.meshgrid(lo[0] + d[0] * t, lo[1] + d[1] * t, indexing="ij")
    W = np.outer(w, w) * d[0] * d[1]
    return np.column_stack([X.ravel(), Y.ravel()]), W.ravel()


def triangle_rule(a, b, c, n):
    """Collapsed-coordinate Gauss rule; exact for total degree <= 2n - 2.

    Weights carry the sign of the triangle orientation.
    """
    pts, W = _triangles_rule(a[None], b[None], c[None], n)
    return pts, W


def _triangles_rule(a, b, c, n):
    U, V, w = _collapsed01(n)
    ba, ca = (b - a)[:, None, :], (c - a)[:, None, :]
    pts = a[:, None, :] + U[None, :, None] * ((1 - V)[None, :, None] * ba + V[None, :, None] * ca)
    det = ba[:, 0, 0] * ca[:, 0, 1] - ba[:, 0, 1] * ca[:, 0, 0]
    W = (w * U)[None, :] * det[:, None]
    return pts.reshape(-1, 2), W.ravel()


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_rule(poly, n):
    """Fan rule: from vertex 0 on convex polygons, else signed fan from the
    vertex average (exact for any simple polygon, weights may be negative)."""
    e = np.roll(poly, -1, axis=0) - poly
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    if np.all(cross >= 0) or np.all(cross <= 0):
        m = len(poly) - 2
        return _triangles_rule(np.repeat(poly[:1], m, axis=0), poly[1:-1], poly[2:], n)
    c = np.repeat(poly.mean(axis=0)[None], len(poly), axis=0)
    return _triangles_rule(c, poly, np.roll(poly, -1, axis=0), n)


def segment_rule(p0, p1, n):
    t, w = _gauss01(n)
    return p0 + t[:, None] * (p1 - p0), w * np.linalg.norm(p1 - p0)


# --------------------------------------------------------------------------
# clipping


def clip_polygon(poly, labels, con, k):
    """Sutherland-Hodgman clip of ``poly`` by constraint ``con``.

    ``labels[i]`` tags the edge ending at vertex ``i`` (None for cell edges);
    new edges along the interface receive label ``k``.
    """
    vals = con.value(poly)
    out, out_lab = [], []
    m = len(poly)
    for i in range(m):
        s, e = poly[i - 1], poly[i]
        fs, fe = vals[i - 1], vals[i]
        lab = labels[i]
        s_in, e_in = fs <= 0.0, fe <= 0.0
        if s_in and e_in:
            out.append(e)
            out_lab.append(lab)
        elif s_in and not e_in:
            out.append(con.root(s, e, fs, fe))
            out_lab.append(lab)
        elif e_in:
            out.append(con.root(s, e, fs, fe))
            out_lab.append(k)
            out.append(e)
            out_lab.append(lab)
    if len(out) < 3:
        return None, None
    return _dedupe(np.array(out), out_lab)


def _dedupe(poly, labels, tol=1e-15):
    keep_p, keep_l = [poly[0]], [labels[0]]
    for p, l in zip(poly[1:], labels[1:]):
        if np.linalg.norm(p - keep_p[-1]) > tol:
            keep_p.append(p)
            keep_l.append(l)
        elif l is not None:
            keep_l[-1] = l
    if len(keep_p) > 1 and np.linalg.norm(keep_p[0] - keep_p[-1]) <= tol:
        if keep_l[0] is None:
            keep_l[0] = keep_l[-1]
        keep_p.pop()
        keep_l.pop()
    if len(keep_p) < 3:
        return None, None
    return np.array(keep_p), keep_l


# --------------------------------------------------------------------------
# per-element data


@dataclass
class ElementGeometry:
    """Quadrature data of one active element.

    For trimmed elements ``cells`` lists the tessellation as
    ``(vertices, inside)`` pairs: axis-aligned sub-squares fully inside the
    domain and clipped leaf polygons straddling the boundary.
    """

    element: int
    cls: ElementClass
    eta: float
    vol_points: np.ndarray  # (q, 2) embedding frame
    vol_weights: np.ndarray
    bnd_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    bnd_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bnd_normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))  # physical
    bnd_sides: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype="<U6"))
    cells: list = field(default_factory=list)

    def boundary_length(self, sides: Iterable[str] | None = None) -> float:
        mask = np.ones(len(self.bnd_weights), bool) if sides is None else np.isin(self.bnd_sides, list(sides))
        return float(self.bnd_weights[mask].sum())


# backwards-friendly alias matching the domain vocabulary
TrimmedElementData = ElementGeometry


def tessellate(
    grid: Grid, e: int, domain: DomainSpec, depth: int, cfg: EmbeddingConfig | None = None, _cons=None
) -> ElementGeometry:
    """Bisection tessellation of element ``e`` (volume part only).

    Sub-cells are bisected up to ``depth`` levels; straddling leaves are cut
    by the piecewise-linear interface through the edge roots of the implicit
    function.
    """
    cfg = cfg or EmbeddingConfig(theta=grid.theta, h=grid.h, depth=depth)
    cons = _cons or _constraints(domain, grid)
    tol = _CLASSIFY_TOL * grid.h
    lo, hi = grid.element_box(e)
    cells, chords = [], []

    def rec(lo, hi, level):
        s = _classify_box(cons, lo, hi, tol)
        if s == ElementClass.OUTSIDE:
            return
        if s == ElementClass.INSIDE:
            cells.append((_box_vertices(lo, hi), True))
            return
        if level < depth:
            mid = 0.5 * (lo + hi)
            for qlo, qhi in (
                (lo, mid),
                (np.array([mid[0], lo[1]]), np.array([hi[0], mid[1]])),
                (np.array([lo[0], mid[1]]), np.array([mid[0], hi[1]])),
                (mid, hi),
            ):
                rec(qlo, qhi, level + 1)
            return
        poly, labels = _box_vertices(lo, hi), [None] * 4
        for k, con in enumerate(cons):
            poly, labels = clip_polygon(poly, labels, con, k)
            if poly is None:
                return
        if polygon_area(poly) <= 0.0:
            return
        cells.append((poly, False))
        for i, lab in enumerate(labels):
            if lab is not None and cons[lab].name == "circle":
                chords.append((poly[i - 1], poly[i]))

    rec(lo, hi, 0)

    pts, wts = [np.zeros((0, 2))], [np.zeros(0)]
    area = 0.0
    for verts, inside in cells:
        if inside:
            p, w = square_rule(verts[0], verts[2], cfg.square_order)
            area += (verts[2] - verts[0]).prod()
        else:
            p, w = polygon_rule(verts, cfg.triangle_order)
            area += polygon_area(verts)
        pts.append(p)
        wts.append(w)
    eta = area / grid.h**2
    geo = ElementGeometry(e, ElementClass.TRIMMED, eta, np.vstack(pts), np.concatenate(wts), cells=cells)

    # circle chords: normal points out of the domain, i.e. towards the centre
    c = cons[-1].c
    bp, bw, bn = [geo.bnd_points], [geo.bnd_weights], [geo.bnd_normals]
    for a, b in chords:
        if np.linalg.norm(b - a) <= 0.0:
            continue
        t = (b - a) / np.linalg.norm(b - a)
        n = np.array([t[1], -t[0]])
        if n @ (c - 0.5 * (a + b)) < 0:
            n = -n
        p, w = segment_rule(a, b, cfg.boundary_order)
        bp.append(p)
        bw.append(w)
        bn.append(np.tile(grid.R @ n, (len(w), 1)))
    geo.bnd_points = np.vstack(bp)
    geo.bnd_weights = np.concatenate(bw)
    geo.bnd_normals = np.vstack(bn)
    geo.bnd_sides = np.array(["circle"] * len(geo.bnd_weights), dtype="<U6")
    return geo


def _inside_element(grid: Grid, e: int, cfg: EmbeddingConfig) -> ElementGeometry:
    lo, hi = grid.element_box(e)
    p, w = square_rule(lo, hi, cfg.square_order)
    return ElementGeometry(e, ElementClass.INSIDE, 1.0, p, w)


def _clip_segment_to_box(p0, p1, lo, hi):
    """Liang-Barsky; returns the clipped segment or None."""
    d = p1 - p0
    t0, t1 = 0.0, 1.0
    for ax in range(2):
        if abs(d[ax]) < 1e-300:
            if p0[ax] < lo[ax] or p0[ax] > hi[ax]:
                return None
            continue
        ta, tb = (lo[ax] - p0[ax]) / d[ax], (hi[ax] - p0[ax]) / d[ax]
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 >= t1:
            return None
    return p0 + t0 * d, p0 + t1 * d


def smallest_volume_fraction(elements: Iterable[ElementGeometry]) -> float:
    etas = [g.eta for g in elements if g.cls == ElementClass.TRIMMED]
    return float(min(etas)) if etas else 1.0


@dataclass
class Geometry:
    """Classified and tessellated embedding of a domain."""

    domain: DomainSpec
    cfg: EmbeddingConfig
    grid: Grid
    classes: np.ndarray  # ElementClass per grid element, after reclassification
    elements: dict[int, ElementGeometry]  # active elements only

    @property
    def active_elements(self) -> list[int]:
        return sorted(self.elements)

    @property
    def trimmed_elements(self) -> list[int]:
        return [e for e in self.active_elements if self.classes[e] == ElementClass.TRIMMED]

    @property
    def eta(self) -> float:
        return smallest_volume_fraction(self.elements.values())

    def volume(self) -> float:
        return float(sum(g.vol_weights.sum() for g in self.elements.values()))

    def boundary_length(self, sides: Sequence[str] | None = None) -> float:
        return float(sum(g.boundary_length(sides) for g in self.elements.values()))

    def dump_cells(self) -> str:
        """Plain-text tessellation: ``element inside x0 y0 x1 y1 ...`` per sub-cell."""
        lines = []
        for e in self.active_elements:
            g = self.elements[e]
            cells = g.cells or [(_box_vertices(*self.grid.element_box(e)), True)]
            for verts, inside in cells:
                coords = " ".join(f"{v:.17g}" for v in verts.ravel())
                lines.append(f"{e} {int(inside)} {coords}")
        return "\n".join(lines) + "\n"


def build_geometry(domain: DomainSpec, cfg: EmbeddingConfig) -> Geometry:
    grid = build_grid(domain, cfg)
    classes = classify_elements(grid, domain)
    cons = _constraints(domain, grid)
    elements: dict[int, ElementGeometry] = {}
    for e in np.flatnonzero(classes == ElementClass.TRIMMED):
        geo = tessellate(grid, int(e), domain, cfg.depth, cfg, _cons=cons)
        if geo.eta < MEASURE_ZERO_ETA:
            log.warning("element %d touches the domain in a null set; treated as outside", e)
            classes[e] = ElementClass.OUTSIDE
            continue
        elements[int(e)] = geo
    for e in np.flatnonzero(classes == ElementClass.INSIDE):
        elements[int(e)] = _inside_element(grid, int(e), cfg)
    _attach_side_boundaries(domain, grid, cfg, classes, elements)
    return Geometry(domain, cfg, grid, classes, elements)


def _attach_side_boundaries(domain, grid, cfg, classes, elements):
    """Exact quadrature on the straight outer sides, per element."""
    R = grid.R
    h = grid.h
    bp0 = grid.breakpoints(0)
    bp1 = grid.breakpoints(1)
    for side, (p0, p1, n) in domain.side_segments().items():
        a, b = R.T @ p0, R.T @ p1
        n_xi = R.T @ n
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        i_rng = range(max(0, int(np.searchsorted(bp0, lo[0]) - 1)), min(grid.shape[0], int(np.searchsorted(bp0, hi[0]) + 1)))
        j_rng = range(max(0, int(np.searchsorted(bp1, lo[1]) - 1)), min(grid.shape[1], int(np.searchsorted(bp1, hi[1]) + 1)))
        for i in i_rng:
            for j in j_rng:
                e = i * grid.shape[1] + j
                blo, bhi = grid.element_box(e)
                seg = _clip_segment_to_box(a, b, blo, bhi)
                if seg is None or np.linalg.norm(seg[1] - seg[0]) <= 1e-14 * h:
                    continue
                probe = 0.5 * (seg[0] + seg[1]) - 1e-9 * h * n_xi
                if np.any(probe <= blo) or np.any(probe >= bhi):
                    continue
                g = elements.get(e)
                if g is None:
                    log.warning("boundary segment on inactive element %d dropped", e)
                    continue
                p, w = segment_rule(seg[0], seg[1], cfg.boundary_order)
                g.bnd_points = np.vstack([g.bnd_points, p])
                g.bnd_weights = np.concatenate([g.bnd_weights, w])
                g.bnd_normals = np.vstack([g.bnd_normals, np.tile(n, (len(w), 1))])
                g.bnd_sides = np.concatenate([g.bnd_sides, np.array([side] * len(w), dtype="<U6")])
