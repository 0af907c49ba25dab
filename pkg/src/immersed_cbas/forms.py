"""Weak forms: Nitsche Poisson, SUPG convection-diffusion, Stokes and Oseen.

Every operator is built from sparse point-evaluation matrices (one row per
quadrature point, one column per active function), so a bilinear form
``int a(x) d1(v) d2(u)`` becomes ``D1^T diag(w * a) D2``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .discretization import Tabulation, boundary_points, tabulate, volume_points, weighted
from .geometry import DIRICHLET, NEUMANN, Geometry
from .spline import VELOCITY_FIELDS, FieldLayout, SplineSpace, scalar_layout

log = logging.getLogger(__name__)

EIG_DROP = 1e-12
GEOM_TRACE_CONSTANT = 2.0  # times (p + 1)^2, per unit inverse length


class AssemblyError(RuntimeError):
    pass


@dataclass
class AssembledSystem:
    A: sp.csr_matrix
    b: np.ndarray
    layout: FieldLayout
    beta: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    # named sub-blocks for mixed systems: "vu", "vp", "qu"
    blocks: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.layout.total
        if self.A.shape != (n, n) or self.b.shape != (n,):
            raise AssemblyError(f"system size {self.A.shape}/{self.b.shape} does not match layout {n}")


@dataclass(frozen=True)
class ThetaSchemeConfig:
    theta: float = 0.5
    dt: float = 1e-2
    steps: int = 20

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.dt <= 0:
            raise ValueError("time step must be positive")
        if self.steps < 0:
            raise ValueError("step count must be non-negative")


# --------------------------------------------------------------------------
# data helpers


def _volume_data(f, x):
    if callable(f):
        return np.asarray(f(x), float)
    return np.full(len(x), float(f))


def _boundary_data(g, x, sides, ncomp=1):
    """Evaluate boundary data ``g(x, sides)`` (or a constant)."""
    shape = (len(x),) if ncomp == 1 else (len(x), ncomp)
    if g is None:
        return np.zeros(shape)
    if callable(g):
        return np.asarray(g(x, sides), float).reshape(shape)
    return np.broadcast_to(np.asarray(g, float), shape).copy()


def _sides_with(geo: Geometry, tag: str) -> list[str]:
    return [s for s, t in geo.domain.tags.items() if t == tag]


# --------------------------------------------------------------------------
# Nitsche parameter


def max_generalized_eigenvalue(B: np.ndarray, V: np.ndarray, M: np.ndarray, drop: float = EIG_DROP):
    """Largest ``lambda`` with ``B y = lambda V y`` on the range of ``V``.

    The local functions are first orthonormalized against the mass Gram
    ``M`` (directions below ``drop`` relative are discarded), then the
    null space of ``V`` is removed in the same way. Returns ``None`` when
    ``V`` has no usable range.
    """
    mv, U = la.eigh(M)
    if mv[-1] <= 0:
        return None
    keep = mv > drop * mv[-1]
    T = U[:, keep] / np.sqrt(mv[keep])
    vv, W = la.eigh(T.T @ V @ T)
    if vv[-1] <= 0:
        return None
    keep = vv > drop * vv[-1]
    Z = T @ (W[:, keep] / np.sqrt(vv[keep]))
    return float(la.eigvalsh(Z.T @ B @ Z)[-1])


def _sym_grad(vals, grads):
    """Vector test functions ``phi_i e_a``: values and symmetric gradients.

    Returns ``(q, 2n, 2)`` values and ``(q, 2n, 2, 2)`` symmetric gradients,
    ordered direction-major.
    """
    q, n = vals.shape
    v = np.zeros((q, 2, n, 2))
    s = np.zeros((q, 2, n, 2, 2))
    for a in range(2):
        v[:, a, :, a] = vals
        s[:, a, :, a, :] += 0.5 * grads
        s[:, a, :, :, a] += 0.5 * grads
    return v.reshape(q, 2 * n, 2), s.reshape(q, 2 * n, 2, 2)


def _gram(w, X, Y=None):
    """``sum_q w_q X[q, i, ...] . Y[q, j, ...]`` contracting trailing axes."""
    Y = X if Y is None else Y
    q, k = X.shape[:2]
    Xf = X.reshape(q, k, -1)
    return np.tensordot(Xf * w[:, None, None], Y.reshape(q, k, -1), axes=([0, 2], [0, 2]))


def local_nitsche_matrices(vals, grads, w, bvals, bgrads, bw, normals, symmetric_gradient=False):
    """Boundary, volume and mass Grams of one element's local functions."""
    if not symmetric_gradient:
        dn = np.einsum("qic,qc->qi", bgrads, normals)
        return _gram(bw, dn), _gram(w, grads), _gram(w, vals)
    vv, sv = _sym_grad(vals, grads)
    _, sb = _sym_grad(bvals, bgrads)
    tn = np.einsum("qicd,qc->qid", sb, normals)
    return _gram(bw, tn), _gram(w, sv), _gram(w, vv)


def nitsche_constant(geo: Geometry, space: SplineSpace, e: int, dirichlet_sides=None, symmetric_gradient=False) -> float:
    """Stabilization ``beta = 2 C`` for element ``e`` evaluated from scratch."""
    g = geo.elements[e]
    sides = _sides_with(geo, DIRICHLET) if dirichlet_sides is None else list(dirichlet_sides)
    mask = np.isin(g.bnd_sides, sides)
    if not mask.any():
        raise ValueError(f"element {e} has no Dirichlet boundary")
    R = space.grid.R
    v, gr, _ = space.evaluate(e, g.vol_points, nd=1)
    bv, bg, _ = space.evaluate(e, g.bnd_points[mask], nd=1)
    return _beta_from_local(
        v, gr @ R.T, g.vol_weights, bv, bg @ R.T, g.bnd_weights[mask], g.bnd_normals[mask],
        space.degree, symmetric_gradient, e,
    )


def _beta_from_local(vals, grads, w, bvals, bgrads, bw, normals, p, symmetric_gradient, e):
    B, V, M = local_nitsche_matrices(vals, grads, w, bvals, bgrads, bw, normals, symmetric_gradient)
    C = max_generalized_eigenvalue(B, V, M)
    if C is None or not np.isfinite(C) or C <= 0:
        length = float(bw.sum())
        hhat = float(w.sum()) / length if length > 0 else 1.0
        C = GEOM_TRACE_CONSTANT * (p + 1) ** 2 / hhat
        warnings.warn(f"degenerate Nitsche eigenproblem on element {e}; geometric fallback used", RuntimeWarning)
    return 2.0 * C


def nitsche_constants(vol: Tabulation, bnd: Tabulation, symmetric_gradient=False) -> dict[int, float]:
    """``beta`` for every element that carries points of ``bnd``."""
    out = {}
    for e, r in bnd.points.ranges.items():
        v, g, w, _ = vol.local(e)
        out[e] = _beta_from_local(
            v, g, w, bnd.vals[r], bnd.grads[r], bnd.points.w[r], bnd.points.normals[r],
            vol.space.degree, symmetric_gradient, e,
        )
    return out


def _beta_at_points(beta: dict, tab: Tabulation) -> np.ndarray:
    return np.array([beta[int(e)] for e in tab.points.elem], dtype=float)


# --------------------------------------------------------------------------
# scalar problems


@dataclass
class ScalarDiscretization:
    geometry: Geometry
    space: SplineSpace
    vol: Tabulation
    bnd: Tabulation

    @classmethod
    def build(cls, geo: Geometry, space: SplineSpace) -> "ScalarDiscretization":
        return cls(geo, space, tabulate(space, volume_points(geo)), tabulate(space, boundary_points(geo)))

    @property
    def h(self) -> float:
        return self.geometry.grid.h

    def stiffness(self, coef=None) -> sp.csr_matrix:
        w = self.vol.points.w if coef is None else self.vol.points.w * coef
        return weighted(self.vol.D(0), self.vol.D(0), w) + weighted(self.vol.D(1), self.vol.D(1), w)

    def mass(self) -> sp.csr_matrix:
        V = self.vol.V()
        return weighted(V, V, self.vol.points.w)

    def load(self, f) -> np.ndarray:
        return self.vol.V().T @ (self.vol.points.w * _volume_data(f, self.vol.points.x))

    def boundary(self, tag: str) -> Tabulation:
        return self.bnd.on_sides(_sides_with(self.geometry, tag))


def _nitsche_parts(btab: Tabulation):
    Vb = btab.V()
    Dn = btab.Dvec(btab.points.normals)
    return Vb, Dn, btab.points.w


def _meta(geo: Geometry, problem: str, **extra):
    return {"problem": problem, "theta": geo.grid.theta, "eta": geo.eta, **extra}


def assemble_poisson_symmetric(disc: ScalarDiscretization, f=1.0, gD=0.0, gN=0.0) -> AssembledSystem:
    bD, bN = disc.boundary(DIRICHLET), disc.boundary(NEUMANN)
    beta = nitsche_constants(disc.vol, bD)
    Vb, Dn, w = _nitsche_parts(bD)
    bq = _beta_at_points(beta, bD)
    flux = weighted(Vb, Dn, w)
    A = disc.stiffness() - flux - flux.T + weighted(Vb, Vb, w * bq)
    g = _boundary_data(gD, bD.points.x, bD.points.sides)
    b = disc.load(f) - Dn.T @ (w * g) + Vb.T @ (w * bq * g)
    b = b + bN.V().T @ (bN.points.w * _boundary_data(gN, bN.points.x, bN.points.sides))
    return AssembledSystem(A.tocsr(), b, scalar_layout(disc.space), beta, _meta(disc.geometry, "poisson-sym"))


def assemble_poisson_nonsymmetric(disc: ScalarDiscretization, f=1.0, gD=0.0, gN=0.0) -> AssembledSystem:
    bD, bN = disc.boundary(DIRICHLET), disc.boundary(NEUMANN)
    Vb, Dn, w = _nitsche_parts(bD)
    pen = 1.0 / disc.h
    flux = weighted(Vb, Dn, w)
    A = disc.stiffness() + flux.T - flux + pen * weighted(Vb, Vb, w)
    g = _boundary_data(gD, bD.points.x, bD.points.sides)
    b = disc.load(f) + Dn.T @ (w * g) + pen * (Vb.T @ (w * g))
    b = b + bN.V().T @ (bN.points.w * _boundary_data(gN, bN.points.x, bN.points.sides))
    return AssembledSystem(A.tocsr(), b, scalar_layout(disc.space), {}, _meta(disc.geometry, "poisson-nonsym", penalty=pen))


def supg_tau(h: float, theta: float, w) -> float:
    """``h / (2 max_i |w . e_i|)`` with ``e_i`` the rotated grid directions."""
    w = np.asarray(w, float)
    if not np.any(w):
        raise ValueError("SUPG parameter undefined for zero convective velocity")
    c, s = np.cos(theta), np.sin(theta)
    proj = max(abs(w @ [c, s]), abs(w @ [-s, c]))
    return h / (2.0 * proj)


def assemble_convdiff_supg(disc: ScalarDiscretization, w=(1.0, 1.0), eps=1e-6, gD=0.0, tau=None) -> AssembledSystem:
    geo = disc.geometry
    w = np.asarray(w, float)
    tau = supg_tau(disc.h, geo.grid.theta, w) if tau is None else tau
    vol, bD = disc.vol, disc.boundary(DIRICHLET)
    qw = vol.points.w
    V = vol.V()
    Dw = vol.Dvec(np.broadcast_to(w, (len(vol.points), 2)))
    A = -weighted(Dw, V, qw) + eps * disc.stiffness() + tau * weighted(Dw, Dw - eps * vol.L(), qw)
    beta = nitsche_constants(vol, bD)
    Vb, Dn, bw = _nitsche_parts(bD)
    bq = _beta_at_points(beta, bD)
    nw = bD.points.normals @ w
    flux = weighted(Vb, Dn, bw)
    A = A + weighted(Vb, Vb, bw * (np.maximum(0.0, nw) + eps * bq)) - eps * (flux + flux.T)
    g = _boundary_data(gD, bD.points.x, bD.points.sides)
    b = Vb.T @ (bw * g * (eps * bq - np.minimum(0.0, nw))) - eps * (Dn.T @ (bw * g))
    meta = _meta(geo, "convdiff", eps=eps, tau=tau, w=tuple(w))
    return AssembledSystem(A.tocsr(), b, scalar_layout(disc.space), beta, meta)


# --------------------------------------------------------------------------
# mixed problems


def _blockdiag2(X):
    return sp.block_diag([X, X], format="csr")


@dataclass
class MixedDiscretization:
    """Taylor-Hood tabulations plus the form parts that do not depend on ``w``."""

    geometry: Geometry
    velocity: SplineSpace
    pressure: SplineSpace
    layout: FieldLayout
    vol: Tabulation
    pvol: Tabulation
    bD: Tabulation
    pbD: Tabulation
    bN: Tabulation
    gD: Callable | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, geo: Geometry, velocity: SplineSpace, pressure: SplineSpace, layout: FieldLayout, gD=None):
        vpts, bpts = volume_points(geo), boundary_points(geo)
        dsides, nsides = _sides_with(geo, DIRICHLET), _sides_with(geo, NEUMANN)
        vb = tabulate(velocity, bpts)
        return cls(
            geo, velocity, pressure, layout,
            tabulate(velocity, vpts), tabulate(pressure, vpts),
            vb.on_sides(dsides), tabulate(pressure, bpts.on_sides(dsides)), vb.on_sides(nsides), gD,
        )

    @property
    def n_u(self) -> int:
        return self.velocity.n_active

    @property
    def n_p(self) -> int:
        return self.pressure.n_active

    def _get(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    # -- velocity Grams
    def scalar_mass(self):
        return self._get("M1", lambda: weighted(self.vol.V(), self.vol.V(), self.vol.points.w))

    def scalar_stiffness(self):
        def k():
            w = self.vol.points.w
            return weighted(self.vol.D(0), self.vol.D(0), w) + weighted(self.vol.D(1), self.vol.D(1), w)
        return self._get("K1", k)

    def velocity_mass(self):
        return self._get("M", lambda: _blockdiag2(self.scalar_mass()))

    def velocity_h1(self):
        return self._get("H1", lambda: _blockdiag2(self.scalar_mass() + self.scalar_stiffness()))

    def pressure_mass(self):
        return self._get("Mp", lambda: weighted(self.pvol.V(), self.pvol.V(), self.pvol.points.w))

    # -- symmetric-gradient parts
    def beta(self):
        return self._get("beta", lambda: nitsche_constants(self.vol, self.bD, symmetric_gradient=True))

    def sym_grad_gram(self):
        """``int grad^s v : grad^s u``."""
        def build():
            w = self.vol.points.w
            D = [self.vol.D(0), self.vol.D(1)]
            K = self.scalar_stiffness()
            blocks = [[None, None], [None, None]]
            for a in range(2):
                for b in range(2):
                    X = 0.5 * weighted(D[b], D[a], w)
                    blocks[a][b] = X + 0.5 * K if a == b else X
            return sp.bmat(blocks, format="csr")
        return self._get("G", build)

    def nitsche_flux(self):
        """``int_GD v . (n . grad^s u)``."""
        def build():
            t = self.bD
            w, n = t.points.w, t.points.normals
            Vb = t.V()
            D = [t.D(0), t.D(1)]
            Fn = weighted(Vb, t.Dvec(n), w)
            blocks = [[None, None], [None, None]]
            for a in range(2):
                for b in range(2):
                    X = 0.5 * weighted(Vb, D[a], w * n[:, b])
                    blocks[a][b] = X + 0.5 * Fn if a == b else X
            return sp.bmat(blocks, format="csr")
        return self._get("N", build)

    def nitsche_penalty(self):
        def build():
            bq = _beta_at_points(self.beta(), self.bD)
            return _blockdiag2(weighted(self.bD.V(), self.bD.V(), self.bD.points.w * bq))
        return self._get("P", build)

    def viscous(self):
        """Symmetric Nitsche operator of the symmetric gradient."""
        def build():
            N = self.nitsche_flux()
            return (self.sym_grad_gram() - N - N.T + self.nitsche_penalty()).tocsr()
        return self._get("visc", build)

    def pressure_coupling(self):
        """``A_vp``: ``int -p div v + int_GD p n . v``."""
        def build():
            w = self.vol.points.w
            P = self.pvol.V()
            Pb = self.pbD.V()
            bw, n = self.bD.points.w, self.bD.points.normals
            parts = [
                -weighted(self.vol.D(a), P, w) + weighted(self.bD.V(), Pb, bw * n[:, a]) for a in range(2)
            ]
            return sp.vstack(parts, format="csr")
        return self._get("Avp", build)

    def dirichlet_data(self):
        def build():
            x, s = self.bD.points.x, self.bD.points.sides
            return _boundary_data(self.gD, x, s, ncomp=2)
        return self._get("g", build)

    def dirichlet_velocity_mass(self, coef):
        t = self.bD
        return _blockdiag2(weighted(t.V(), t.V(), t.points.w * coef))

    # -- right-hand side pieces
    def nitsche_rhs(self):
        """``int_GD -g . (n . grad^s v) + beta v . g`` per velocity dof."""
        def build():
            t = self.bD
            g, n, w = self.dirichlet_data(), t.points.normals, t.points.w
            bq = _beta_at_points(self.beta(), t)
            Vb = t.V()
            Dn = t.Dvec(n)
            Dg = t.Dvec(g)
            out = []
            for a in range(2):
                r = -0.5 * (Dg.T @ (w * n[:, a]) + Dn.T @ (w * g[:, a])) + Vb.T @ (w * bq * g[:, a])
                out.append(r)
            return np.concatenate(out)
        return self._get("bN", build)

    def pressure_rhs(self):
        def build():
            g, n = self.dirichlet_data(), self.bD.points.normals
            return self.pbD.V().T @ (self.bD.points.w * np.einsum("qc,qc->q", g, n))
        return self._get("bq", build)

    def dirichlet_inflow_terms(self):
        """``1/2 max(0, n.g) v.u`` matrix and ``-1/2 min(0, n.g) v.g`` vector."""
        def build():
            t = self.bD
            g, n, w = self.dirichlet_data(), t.points.normals, t.points.w
            ng = np.einsum("qc,qc->q", g, n)
            Mplus = self.dirichlet_velocity_mass(0.5 * np.maximum(0.0, ng))
            Vb = t.V()
            rhs = np.concatenate([Vb.T @ (w * -0.5 * np.minimum(0.0, ng) * g[:, a]) for a in range(2)])
            return Mplus, rhs
        return self._get("inflow", build)

    # -- convection
    def velocity_at(self, coeffs, tab: Tabulation) -> np.ndarray:
        n = self.n_u
        return np.stack([tab.field(coeffs[:n]), tab.field(coeffs[n:2 * n])], axis=1)

    def convection(self, coeffs) -> sp.csr_matrix:
        """Skew part ``1/2 (v . (w . grad) u - u . (w . grad) v)``."""
        w = self.velocity_at(coeffs, self.vol)
        V, Dw = self.vol.V(), self.vol.Dvec(w)
        X = 0.5 * weighted(V, Dw, self.vol.points.w)
        return _blockdiag2((X - X.T).tocsr())

    def outflow(self, coeffs) -> sp.csr_matrix:
        """``1/2 max(0, n . w) v . u`` on the Neumann boundary."""
        t = self.bN
        if len(t.points) == 0:
            return sp.csr_matrix((2 * self.n_u, 2 * self.n_u))
        w = self.velocity_at(coeffs, t)
        nw = np.einsum("qc,qc->q", w, t.points.normals)
        return _blockdiag2(weighted(t.V(), t.V(), t.points.w * 0.5 * np.maximum(0.0, nw)))


def _mixed_system(disc: MixedDiscretization, Avu, bv, problem, **meta) -> AssembledSystem:
    Avp = disc.pressure_coupling()
    Aqu = Avp.T.tocsr()
    A = sp.bmat([[Avu, Avp], [Aqu, None]], format="csr")
    b = np.concatenate([bv, disc.pressure_rhs()])
    blocks = {"vu": Avu.tocsr(), "vp": Avp, "qu": Aqu}
    return AssembledSystem(A, b, disc.layout, disc.beta(), _meta(disc.geometry, problem, **meta), blocks)


def assemble_stokes(disc: MixedDiscretization) -> AssembledSystem:
    return _mixed_system(disc, disc.viscous(), disc.nitsche_rhs(), "stokes")


def oseen_velocity_block(disc: MixedDiscretization, coeffs, nu: float):
    """``A_vu`` and ``b_v`` of the Oseen form for convective field ``coeffs``."""
    coeffs = np.zeros(2 * disc.n_u) if coeffs is None else np.asarray(coeffs, float)
    Min, rin = disc.dirichlet_inflow_terms()
    Avu = disc.convection(coeffs) + Min + disc.outflow(coeffs) + 2.0 * nu * disc.viscous()
    bv = rin + 2.0 * nu * disc.nitsche_rhs()
    return Avu.tocsr(), bv


def assemble_oseen(disc: MixedDiscretization, coeffs, nu: float = 1e-2) -> AssembledSystem:
    Avu, bv = oseen_velocity_block(disc, coeffs, nu)
    return _mixed_system(disc, Avu, bv, "navier-stokes", nu=nu)


def assemble_mass(disc: MixedDiscretization) -> sp.csr_matrix:
    return disc.velocity_mass()


def theta_step(M, Avu, Avp, Aqu, bv, bq, xu, cfg: ThetaSchemeConfig):
    """Block system of one theta-scheme step; unknowns ``(u^{n+1}, p^theta)``."""
    n = M.shape[0]
    if Avu.shape != (n, n) or Avp.shape[0] != n or Aqu.shape[1] != n or len(xu) != n:
        raise ValueError("dimension mismatch in theta step")
    if len(bv) != n or len(bq) != Avp.shape[1]:
        raise ValueError("dimension mismatch in theta step right-hand side")
    th, dt = cfg.theta, cfg.dt
    K = sp.bmat([[M + th * dt * Avu, dt * Avp], [dt * Aqu, None]], format="csr")
    rhs = np.concatenate([M @ xu - (1 - th) * dt * (Avu @ xu) + dt * np.asarray(bv), dt * np.asarray(bq)])
    return K, rhs
