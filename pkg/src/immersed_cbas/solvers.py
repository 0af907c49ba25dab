"""Krylov solvers, spectral estimates, Picard iteration and time stepping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cbas import build_mixed
from .forms import MixedDiscretization, ThetaSchemeConfig, assemble_oseen, assemble_stokes, oseen_velocity_block, theta_step

log = logging.getLogger(__name__)


class NotSPDError(ArithmeticError):
    pass


class PicardError(RuntimeError):
    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


@dataclass(frozen=True)
class KrylovConfig:
    tol: float = 1e-10
    maxiter: int = 5000
    restart: int | None = None

    def __post_init__(self):
        if not 0 < self.tol < 1:
            raise ValueError("tolerance must lie in (0, 1)")
        if self.maxiter < 1:
            raise ValueError("need at least one iteration")
        if self.restart is not None and self.restart < 1:
            raise ValueError("restart length must be positive")


@dataclass
class SolveReport:
    iterations: int
    history: list[float]
    converged: bool
    # |S (b - A x)| / |S b| recomputed from the returned iterate
    true_residual: float | None = None

    def iterations_to(self, level: float) -> int | None:
        """First iteration whose relative residual is at or below ``level``."""
        for k, r in enumerate(self.history):
            if r <= level:
                return k
        return None


def _as_operator(M):
    if M is None:
        return lambda x: x
    if callable(M) and not hasattr(M, "shape"):
        return M
    if hasattr(M, "apply"):
        return M.apply
    return lambda x: M @ x


def cg(A, b, S=None, cfg: KrylovConfig = KrylovConfig(), x0=None):
    """Preconditioned CG; the history holds ``|S r| / |S b|``."""
    prec = _as_operator(S)
    b = np.asarray(b, float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, float)
    r = b - A @ x
    z = prec(r)
    ref = np.linalg.norm(prec(b))
    if ref == 0:
        return np.zeros_like(b), SolveReport(0, [0.0], True)
    hist = [np.linalg.norm(z) / ref]
    if hist[0] <= cfg.tol:
        return x, SolveReport(0, hist, True)
    p = z.copy()
    rz = r @ z
    for k in range(1, cfg.maxiter + 1):
        Ap = A @ p
        curv = p @ Ap
        if curv <= 0 or rz <= 0:
            raise NotSPDError(f"non-positive curvature at iteration {k}")
        alpha = rz / curv
        x += alpha * p
        r -= alpha * Ap
        z = prec(r)
        hist.append(np.linalg.norm(z) / ref)
        if hist[-1] <= cfg.tol:
            return x, SolveReport(k, hist, True)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, SolveReport(cfg.maxiter, hist, False)


def gmres(A, b, S=None, cfg: KrylovConfig = KrylovConfig(), x0=None):
    """Left-preconditioned GMRES with CGS2 Arnoldi.

    Minimizes ``|S (b - A x)|`` over the Krylov space; the history holds that
    norm relative to ``|S b|`` and is non-increasing within a cycle.
    """
    prec = _as_operator(S)
    b = np.asarray(b, float)
    n = len(b)
    x = np.zeros(n) if x0 is None else np.array(x0, float)
    ref = np.linalg.norm(prec(b))
    if ref == 0:
        return np.zeros(n), SolveReport(0, [0.0], True)
    m = min(cfg.restart or cfg.maxiter, cfg.maxiter, n)
    hist = []
    total = 0
    while True:
        r = prec(b - A @ x)
        beta = np.linalg.norm(r)
        rel = beta / ref
        if not hist:
            hist.append(rel)
        if rel <= cfg.tol:
            return x, SolveReport(total, hist, True, rel)
        if total >= cfg.maxiter:
            return x, SolveReport(total, hist, False, rel)
        mm = min(m, cfg.maxiter - total)
        Q = np.zeros((mm + 1, n))
        H = np.zeros((mm + 1, mm))
        cs, sn = np.zeros(mm), np.zeros(mm)
        g = np.zeros(mm + 1)
        g[0] = beta
        Q[0] = r / beta
        j_done = 0
        for j in range(mm):
            w = prec(A @ Q[j])
            h = Q[: j + 1] @ w
            w = w - Q[: j + 1].T @ h
            h2 = Q[: j + 1] @ w
            w = w - Q[: j + 1].T @ h2
            h = h + h2
            hn = np.linalg.norm(w)
            H[: j + 1, j] = h
            H[j + 1, j] = hn
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            d = np.hypot(H[j, j], H[j + 1, j])
            cs[j], sn[j] = (1.0, 0.0) if d == 0 else (H[j, j] / d, H[j + 1, j] / d)
            H[j, j] = d
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            total += 1
            j_done = j + 1
            rel = abs(g[j + 1]) / ref
            hist.append(min(rel, hist[-1]))
            breakdown = hn <= 1e-14 * max(np.linalg.norm(h), 1e-300)
            if rel <= cfg.tol or breakdown:
                break
            Q[j + 1] = w / hn
        y = la.solve_triangular(H[:j_done, :j_done], g[:j_done])
        x = x + Q[:j_done].T @ y
        # the Arnoldi residual decides convergence; with a badly scaled S the
        # recomputed residual stalls at roundoff level and restarts cannot help
        true_rel = np.linalg.norm(prec(b - A @ x)) / ref
        if rel <= cfg.tol or true_rel <= cfg.tol:
            return x, SolveReport(total, hist, True, true_rel)
        if total >= cfg.maxiter:
            return x, SolveReport(total, hist, False, true_rel)


# --------------------------------------------------------------------------
# spectral estimates


@dataclass
class SpectralReport:
    lam_max: float
    lam_min: float
    metric: float
    kind: str
    iterations_max: int
    iterations_min: int
    tol: float
    converged: bool


def _dominant_magnitude(op: Callable, n: int, tol: float, maxiter: int, block: int, rng):
    """Largest eigenvalue magnitude by block power iteration with Rayleigh-Ritz."""
    block = max(1, min(block, n))
    X, _ = np.linalg.qr(rng.standard_normal((n, block)))
    prev = None
    for k in range(1, maxiter + 1):
        Z = np.column_stack([op(X[:, i]) for i in range(block)])
        H = X.T @ Z
        est = float(np.max(np.abs(la.eigvals(H))))
        if not np.all(np.isfinite(Z)):
            raise FloatingPointError("non-finite operator action")
        if prev is not None and abs(est - prev) <= tol * abs(est):
            return est, k, True
        prev = est
        X, _ = np.linalg.qr(Z)
    return prev, maxiter, False


def power_extremes(
    apply_op: Callable,
    apply_inverse: Callable | None,
    n: int,
    symmetric: bool,
    tol: float = 1e-6,
    maxiter: int = 20000,
    block: int = 4,
    seed: int = 0,
) -> SpectralReport:
    """``|lambda|max`` by power iteration and ``|lambda|min`` by inverse iteration."""
    rng = np.random.default_rng(seed)
    lmax, kmax, cmax = _dominant_magnitude(apply_op, n, tol, maxiter, block, rng)
    kind = "kappa2" if symmetric else "rho"
    if apply_inverse is None:
        return SpectralReport(lmax, float("nan"), float("nan"), kind, kmax, 0, tol, False)
    try:
        inv, kmin, cmin = _dominant_magnitude(apply_inverse, n, tol, maxiter, block, rng)
    except (FloatingPointError, np.linalg.LinAlgError, RuntimeError):
        return SpectralReport(lmax, 0.0, float("inf"), kind, kmax, 0, tol, False)
    lmin = 1.0 / inv if inv > 0 else 0.0
    metric = lmax / lmin if lmin > 0 else float("inf")
    return SpectralReport(lmax, lmin, metric, kind, kmax, kmin, tol, cmax and cmin)


def _factorize(M):
    lu = spla.splu(sp.csc_matrix(M))
    if not np.all(np.isfinite(lu.U.diagonal())) or np.any(lu.U.diagonal() == 0):
        raise np.linalg.LinAlgError("singular factorization")
    return lu


def spectral_metrics(A, S=None, symmetric: bool = False, **kw) -> SpectralReport:
    """Extreme eigenvalue magnitudes of ``A`` or of ``S A``.

    The inverse action ``A^{-1} S^{-1}`` uses sparse LU factorizations of
    ``A`` and of the assembled ``S``. With ``S`` present both are first
    balanced by ``D = |diag S|``: ``(D^{-1/2} S D^{-1/2})(D^{1/2} A D^{1/2})``
    is similar to ``S A``, and the balanced factors avoid the roundoff that
    otherwise swamps inverse iteration when sliver entries of ``S`` reach
    1e20.
    """
    A = sp.csr_matrix(A)
    n = A.shape[0]
    Smat = None if S is None else (S.S if hasattr(S, "S") else sp.csr_matrix(S))
    if Smat is not None:
        d = np.abs(Smat.diagonal())
        d[~(d > 0) | ~np.isfinite(d)] = 1.0
        root = sp.diags(np.sqrt(d))
        iroot = sp.diags(1.0 / np.sqrt(d))
        A = (root @ A @ root).tocsr()
        Smat = (iroot @ Smat @ iroot).tocsr()
    if Smat is None:
        op = lambda x: A @ x
    else:
        op = lambda x: Smat @ (A @ x)
    try:
        luA = _factorize(A)
        if Smat is None:
            inv = luA.solve
        else:
            luS = _factorize(Smat)
            inv = lambda x: luA.solve(luS.solve(x))
    except (RuntimeError, np.linalg.LinAlgError):
        inv = None
        rep = power_extremes(op, None, n, symmetric, **kw)
        rep.metric, rep.lam_min = float("inf"), 0.0
        return rep
    return power_extremes(op, inv, n, symmetric, **kw)


# --------------------------------------------------------------------------
# Navier-Stokes drivers


@dataclass
class PicardReport:
    u: np.ndarray
    p: np.ndarray
    iterations: int
    increments: list[float]
    converged: bool
    system: object = field(default=None, repr=False)
    preconditioner: object = field(default=None, repr=False)
    solves: list = field(default_factory=list, repr=False)


def relative_increment(disc: MixedDiscretization, u_new, u_old, p_new, p_old) -> float:
    """Combined H1 (velocity) / L2 (pressure) relative change."""
    H, Mp = disc.velocity_h1(), disc.pressure_mass()
    du, su, dp, sp_ = u_new - u_old, u_new + u_old, p_new - p_old, p_new + p_old
    num = du @ (H @ du) + dp @ (Mp @ dp)
    den = su @ (H @ su) + sp_ @ (Mp @ sp_)
    if den <= 0:
        return 0.0
    return float(np.sqrt(max(num, 0.0) / den))


LINEAR_SOLVERS = ("gmres", "direct")


def _mixed_solve(system_blocks, b, vel_spec, pre_spec, krylov, rescale, linear_solver="gmres", x0=None):
    Avu, Avp, Aqu, A = system_blocks
    if linear_solver == "direct":
        # the preconditioner is only built on demand for the final system
        b = np.asarray(b, float)
        lu = spla.splu(sp.csc_matrix(A))
        x = lu.solve(b)
        # iterative refinement: sliver dofs leave the raw LU solve a few digits short
        for _ in range(3):
            x = x + lu.solve(b - A @ x)
        rel = np.linalg.norm(b - A @ x) / max(np.linalg.norm(b), 1e-300)
        return x, SolveReport(1, [1.0, rel], True), None
    if linear_solver != "gmres":
        raise ValueError(f"unknown linear solver {linear_solver!r}")
    P = build_mixed(Avu, Avp, Aqu, vel_spec, pre_spec, rescale)
    x, rep = gmres(A, b, P, krylov, x0=x0)
    return x, rep, P


def solve_stokes(disc: MixedDiscretization, vel_spec, pre_spec, krylov=KrylovConfig(), rescale=False, linear_solver="gmres"):
    s = assemble_stokes(disc)
    blocks = (s.blocks["vu"], s.blocks["vp"], s.blocks["qu"], s.A)
    x, rep, P = _mixed_solve(blocks, s.b, vel_spec, pre_spec, krylov, rescale, linear_solver)
    return x, rep, s, P


def picard(
    disc: MixedDiscretization,
    vel_spec,
    pre_spec,
    nu: float = 1e-2,
    tol: float = 1e-6,
    maxiter: int = 100,
    krylov: KrylovConfig = KrylovConfig(tol=1e-12),
    rescale: bool = False,
    initial=None,
    linear_solver: str = "gmres",
) -> PicardReport:
    """Oseen fixed-point iteration starting from the Stokes solution.

    Inner systems are solved with CbAS-preconditioned GMRES warm-started
    from the previous iterate, or with a sparse direct solve.
    """
    nu2 = 2 * disc.n_u
    if initial is None:
        x0, rep, _, _ = solve_stokes(disc, vel_spec, pre_spec, krylov, rescale, linear_solver)
        if not rep.converged:
            log.warning("Stokes initial solve did not converge")
    else:
        x0 = np.asarray(initial, float)
    u, p = x0[:nu2], x0[nu2:]
    incs, solves, grow = [], [], 0
    s = P = None
    for k in range(1, maxiter + 1):
        s = assemble_oseen(disc, u, nu)
        blocks = (s.blocks["vu"], s.blocks["vp"], s.blocks["qu"], s.A)
        x, rep, P = _mixed_solve(blocks, s.b, vel_spec, pre_spec, krylov, rescale, linear_solver, np.concatenate([u, p]))
        solves.append(rep)
        if not rep.converged:
            log.warning("inner GMRES did not converge at Picard iteration %d", k)
        un, pn = x[:nu2], x[nu2:]
        inc = relative_increment(disc, un, u, pn, p)
        grow = grow + 1 if incs and inc > incs[-1] else 0
        incs.append(inc)
        u, p = un, pn
        if inc <= tol:
            if P is None:
                b = s.blocks
                P = build_mixed(b["vu"], b["vp"], b["qu"], vel_spec, pre_spec, rescale)
            return PicardReport(u, p, k, incs, True, s, P, solves)
        if grow >= 5:
            log.warning("Picard increments grew for 5 consecutive iterations")
            return PicardReport(u, p, k, incs, False, s, P, solves)
    return PicardReport(u, p, maxiter, incs, False, s, P, solves)


@dataclass
class StepRecord:
    step: int
    time: float
    u: np.ndarray
    p: np.ndarray
    picard_iterations: int
    spectral: SpectralReport | None


def transient_drive(
    disc: MixedDiscretization,
    vel_spec,
    pre_spec,
    initial: np.ndarray,
    cfg: ThetaSchemeConfig = ThetaSchemeConfig(),
    nu: float = 1e-2,
    tol: float = 1e-6,
    max_picard: int = 50,
    krylov: KrylovConfig = KrylovConfig(tol=1e-12),
    spectral: bool = True,
    spectral_tol: float = 1e-6,
    rescale: bool = False,
    callback: Callable | None = None,
    linear_solver: str = "gmres",
) -> list[StepRecord]:
    """Theta-scheme time stepping with a Picard loop per step.

    The preconditioned eigenvalue ratio of the step matrix is recorded at the
    final Picard iteration of every step.
    """
    nu2 = 2 * disc.n_u
    M = disc.velocity_mass()
    Avp = disc.pressure_coupling()
    Aqu = Avp.T.tocsr()
    bq = disc.pressure_rhs()
    un = np.asarray(initial, float)[:nu2].copy()
    pn = np.asarray(initial, float)[nu2:].copy()
    th, dt = cfg.theta, cfg.dt
    out = []
    for step in range(1, cfg.steps + 1):
        uk, pk = un.copy(), pn.copy()
        done = False
        for k in range(1, max_picard + 1):
            w = th * uk + (1 - th) * un
            Avu, bv = oseen_velocity_block(disc, w, nu)
            K, rhs = theta_step(M, Avu, Avp, Aqu, bv, bq, un, cfg)
            Kvu = (M + th * dt * Avu).tocsr()
            x, rep, P = _mixed_solve(
                (Kvu, dt * Avp, dt * Aqu, K), rhs, vel_spec, pre_spec, krylov, rescale, linear_solver,
                np.concatenate([uk, pk]),
            )
            if not rep.converged:
                log.warning("inner GMRES did not converge at step %d, Picard %d", step, k)
            inc = relative_increment(disc, x[:nu2], uk, x[nu2:], pk)
            uk, pk = x[:nu2], x[nu2:]
            if inc <= tol:
                done = True
                break
        if not done:
            raise PicardError(f"Picard iteration failed at time step {step}", step)
        spec = None
        if spectral:
            if P is None:
                P = build_mixed(Kvu, dt * Avp, dt * Aqu, vel_spec, pre_spec, rescale)
            spec = spectral_metrics(K, P, symmetric=False, tol=spectral_tol)
        un, pn = uk, pk
        rec = StepRecord(step, step * dt, un.copy(), pn.copy(), k, spec)
        out.append(rec)
        if callback is not None:
            callback(rec)
    return out
