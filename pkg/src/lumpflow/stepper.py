"""Time stepping for the coupled saturation / wetting-pressure system.

Two schemes share the data types here:

* ``semi_implicit``: upwind mobilities frozen at the previous level and the
  capillary pressure linearised, giving one sparse linear solve per step;
* ``implicit``: the fully nonlinear upwind scheme solved by damped Newton,
  with a frozen-mobility fixed-point fallback.

Unknowns are ordered ``[S_0..S_{M-1}, P_0..P_{M-1}]`` and equations
``[wetting rows, nonwetting rows]``.  In no-flux mode the last wetting row is
replaced by the mean-pressure constraint ``sum_i m_i P_w^i = 0``; that row is
implied by the others (sum of all rows) once the sources are balanced.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DataError, InvalidArgument, SolverError, StepError
from .fem import NodalField, grad_norm, integrate, nodal_values, project_patch_average
from .quadrature import gauss_interval
from .upwind import (
    NONWETTING,
    WETTING,
    edge_residual,
    flux_divergence,
    energy_diagnostic,
    total_flux,
    upwind_selection,
)

log = logging.getLogger(__name__)

NO_FLUX = "no_flux"
DIRICHLET = "dirichlet"
WELLS = "wells"
MANUFACTURED = "manufactured"
SEMI_IMPLICIT = "semi_implicit"
IMPLICIT = "implicit"
PROJECTED = "projected"
POINTWISE = "pointwise"


@dataclass(frozen=True, eq=False)
class TimeState:
    n: int
    t: float
    S: NodalField
    P_w: NodalField
    P_o: NodalField

    @classmethod
    def from_arrays(cls, geom, n, t, S, P_w, P_o):
        return cls(int(n), float(t), NodalField(S, geom), NodalField(P_w, geom), NodalField(P_o, geom))


@dataclass(frozen=True)
class SourceModel:
    """Right-hand sides, boundary treatment and porosity of a problem.

    Space-time functions take ``(t, x, y)``; ``porosity`` takes ``(x, y)`` or is a
    constant and is sampled at element centroids.

    ``sampling`` selects how manufactured sources become nodal data:
    ``"projected"`` averages over the step and the node patch, ``"pointwise"``
    takes ``f(t_n, x_i)`` at the end of the step.  Wells are always projected.
    """

    mode: str = WELLS
    q_bar: Optional[Callable] = None
    q_low: Optional[Callable] = None
    s_in: Optional[Callable] = None
    f1: Optional[Callable] = None
    f2: Optional[Callable] = None
    bc: str = NO_FLUX
    S_trace: Optional[Callable] = None
    Pw_trace: Optional[Callable] = None
    porosity: object = 1.0
    quad_degree: int = 4
    sampling: str = PROJECTED

    def __post_init__(self):
        if self.sampling not in (PROJECTED, POINTWISE):
            raise InvalidArgument(f"unknown source sampling {self.sampling!r}")
        if self.mode == WELLS and self.sampling != PROJECTED:
            raise InvalidArgument("well sources must be projected to keep injection and production balanced")
        if self.mode not in (WELLS, MANUFACTURED):
            raise InvalidArgument(f"unknown source mode {self.mode!r}")
        if self.bc not in (NO_FLUX, DIRICHLET):
            raise InvalidArgument(f"unknown boundary condition {self.bc!r}")
        if self.mode == WELLS and (self.q_bar is None or self.q_low is None or self.s_in is None):
            raise InvalidArgument("wells mode needs q_bar, q_low and s_in")
        if self.mode == MANUFACTURED and (self.f1 is None or self.f2 is None):
            raise InvalidArgument("manufactured mode needs f1 and f2")
        if self.bc == DIRICHLET and (self.S_trace is None or self.Pw_trace is None):
            raise InvalidArgument("dirichlet mode needs S_trace and Pw_trace")


@dataclass(frozen=True)
class SolverConfig:
    tau: float
    T: float
    scheme: str = SEMI_IMPLICIT
    newton_tol: float = 1e-10
    newton_max_iters: int = 50
    damping: float = 0.5
    min_step: float = 2.0**-20
    linear_solver: str = "direct_sparse"
    linear_tol: float = 1e-12
    strict_acute: bool = True
    constraint: bool = True
    picard_max_iters: int = 200

    def __post_init__(self):
        if not (self.tau > 0) or not math.isfinite(self.tau):
            raise InvalidArgument(f"tau must be positive, got {self.tau}")
        if not (self.T >= self.tau):
            raise InvalidArgument(f"T must be at least tau, got T={self.T}, tau={self.tau}")
        if self.scheme not in (SEMI_IMPLICIT, IMPLICIT):
            raise InvalidArgument(f"unknown scheme {self.scheme!r}")
        if self.linear_solver not in ("direct_sparse", "iterative"):
            raise InvalidArgument(f"unknown linear solver {self.linear_solver!r}")
        if not (0 < self.damping < 1):
            raise InvalidArgument("damping must lie in (0, 1)")

    @property
    def n_steps(self):
        N = int(round(self.T / self.tau))
        if abs(N * self.tau - self.T) > 1e-9 * self.T:
            raise InvalidArgument(f"T={self.T} is not a whole number of steps tau={self.tau}")
        return N


@dataclass(frozen=True, eq=False)
class DiscreteSources:
    """Nodal source data of one step. Wells: ``q_bar, q_low, s_in``; manufactured: ``f1, f2``."""

    mode: str
    q_bar: np.ndarray = None
    q_low: np.ndarray = None
    s_in: np.ndarray = None
    f1: np.ndarray = None
    f2: np.ndarray = None


# ---------------------------------------------------------------------------
# sources and data


def porosity_masses(geom, porosity):
    """``m~_i(phi)`` with ``phi`` sampled at element centroids."""
    if callable(porosity):
        X = geom.mesh.nodes[geom.mesh.elements].mean(axis=1)
        phi = np.broadcast_to(np.asarray(porosity(*X.T), dtype=float), (geom.mesh.n_elements,))
    else:
        phi = np.full(geom.mesh.n_elements, float(porosity))
    if np.any(phi <= 0):
        raise DataError("porosity must be positive")
    return geom.weighted_masses(phi)


def _space_time_average(geom, f, t0, t1, degree, npoints=3, with_integral=False):
    """``rho_tau(r_h(f))`` over ``]t0, t1]``; optionally also the time-averaged accurate ``int f``."""
    ts, ws = gauss_interval(t0, t1, npoints)
    patch = np.zeros(geom.n_nodes)
    exact = 0.0
    for tk, wk in zip(ts, ws):
        g = lambda *x, tk=tk: f(tk, *x)  # noqa: E731
        patch += wk * project_patch_average(geom, g, degree).values
        if with_integral:
            exact += wk * integrate(geom, g)
    return patch / (t1 - t0), exact / (t1 - t0)


def build_discrete_sources(src, geom, tau, n):
    """Nodal sources of step ``n`` (interval ``](n-1) tau, n tau]``)."""
    t0, t1 = (n - 1) * tau, n * tau
    deg = src.quad_degree
    if src.mode == MANUFACTURED and src.sampling == POINTWISE:
        X = geom.mesh.nodes.T
        f1 = np.broadcast_to(np.asarray(src.f1(t1, *X), dtype=float), (geom.n_nodes,)).copy()
        f2 = np.broadcast_to(np.asarray(src.f2(t1, *X), dtype=float), (geom.n_nodes,)).copy()
        return DiscreteSources(MANUFACTURED, f1=f1, f2=f2)
    if src.mode == MANUFACTURED:
        f1, _ = _space_time_average(geom, src.f1, t0, t1, deg)
        f2, _ = _space_time_average(geom, src.f2, t0, t1, deg)
        return DiscreteSources(MANUFACTURED, f1=f1, f2=f2)
    area = geom.total_measure
    wells = []
    for q in (src.q_bar, src.q_low):
        rq, exact = _space_time_average(geom, q, t0, t1, deg, with_integral=True)
        # shift so that (q_h, 1)_h reproduces the accurate integral of q
        qh = rq - (np.dot(geom.masses, rq) - exact) / area
        if np.any(qh < -1e-12):
            raise DataError(f"well rate negative after correction (min {qh.min():.3e})")
        wells.append(qh)
    s_in, _ = _space_time_average(geom, src.s_in, t0, t1, deg)
    if np.any(s_in < -1e-12) or np.any(s_in > 1 + 1e-12):
        raise DataError("input saturation outside [0, 1]")
    return DiscreteSources(WELLS, q_bar=wells[0], q_low=wells[1], s_in=np.clip(s_in, 0.0, 1.0))


def initial_saturation(geom, s0, degree=4):
    """``r_h(s0)``: patch averages of the initial saturation."""
    return project_patch_average(geom, s0, degree).values


def _dirichlet_values(src, geom, t):
    X = geom.mesh.nodes
    b = geom.mesh.boundary_nodes
    S = np.broadcast_to(np.asarray(src.S_trace(t, *X[b].T), dtype=float), b.shape)
    P = np.broadcast_to(np.asarray(src.Pw_trace(t, *X[b].T), dtype=float), b.shape)
    return b, S, P


# ---------------------------------------------------------------------------
# linear algebra


def _solve(A, b, cfg):
    A = A.tocsc()
    if cfg.linear_solver == "direct_sparse":
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("error", spla.MatrixRankWarning)
            try:
                x = spla.spsolve(A, b)
            except (spla.MatrixRankWarning, RuntimeError) as exc:
                raise SolverError(f"sparse direct solve failed: {exc}") from exc
    else:
        try:
            ilu = spla.spilu(A, drop_tol=1e-6, fill_factor=20)
        except RuntimeError as exc:
            raise SolverError(f"incomplete factorisation failed: {exc}") from exc
        pre = spla.LinearOperator(A.shape, ilu.solve)
        x, info = spla.gmres(A, b, M=pre, rtol=cfg.linear_tol, atol=0.0, restart=200, maxiter=50)
        if info != 0:
            raise SolverError(f"gmres did not converge (info={info})")
    if not np.all(np.isfinite(x)):
        raise SolverError("linear solve produced non-finite values")
    return x


# ---------------------------------------------------------------------------
# semi-implicit scheme


def _edge_operator(geom, w):
    """Sparse ``L`` with ``(L v)_i = sum_j c_ij w_ij (v_i - v_j)``."""
    i, j = geom.edges[:, 0], geom.edges[:, 1]
    cw = geom.c * w
    M = geom.n_nodes
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([i, j, j, i])
    data = np.concatenate([cw, cw, -cw, -cw])
    return sp.csr_matrix((data, (rows, cols)), shape=(M, M))


def _frozen_mobilities(geom, state_n, model):
    s = state_n.S.values
    pw = state_n.P_w.values
    po = pw + model.pc(s)
    sw = s[upwind_selection(geom, s, pw, WETTING)]
    so = s[upwind_selection(geom, s, po, NONWETTING)]
    return model.eta_w(sw), model.eta_o(so)


def _semi_implicit_rhs_sources(geom, model, sources, s_old):
    m = geom.masses
    if sources.mode == MANUFACTURED:
        return m * sources.f1, m * sources.f2
    qb, ql, sin = sources.q_bar, sources.q_low, sources.s_in
    return (
        m * (model.f_w(sin) * qb - model.f_w(s_old) * ql),
        m * (model.f_o(sin) * qb - model.f_o(s_old) * ql),
    )


def _constraint_mode(src, cfg):
    if src.bc == DIRICHLET:
        return False
    if not cfg.constraint:
        raise SolverError(
            "singular system: constant wetting pressures span the nullspace "
            "(no Dirichlet nodes and the mean-pressure constraint is disabled)"
        )
    return True


def assemble_semi_implicit(state_n, model, geom, src, tau, cfg=None, sources=None):
    """Linear system ``A x = b`` for ``x = [S^{n+1}, P_w^{n+1}]``."""
    cfg = cfg or SolverConfig(tau=tau, T=tau)
    n1 = state_n.n + 1
    if sources is None:
        sources = build_discrete_sources(src, geom, tau, n1)
    M = geom.n_nodes
    s = state_n.S.values
    mt = porosity_masses(geom, src.porosity) / tau
    ew, eo = _frozen_mobilities(geom, state_n, model)
    Lw = _edge_operator(geom, ew)
    Lo = _edge_operator(geom, eo)
    b_slope = model.pc_prime(s)
    a_off = model.pc(s) - b_slope * s
    D = sp.diags(mt)
    A = sp.bmat([[D, Lw], [-D + Lo @ sp.diags(b_slope), Lo]], format="csr")
    g1, g2 = _semi_implicit_rhs_sources(geom, model, sources, s)
    rhs = np.concatenate([mt * s + g1, -mt * s + g2 - Lo @ a_off])
    if _constraint_mode(src, cfg):
        A = _replace_rows(A, [M - 1], sp.csr_matrix(
            (geom.masses, (np.zeros(M, dtype=int), M + np.arange(M))), shape=(1, 2 * M)))
        rhs[M - 1] = 0.0
    else:
        b, Sb, Pb = _dirichlet_values(src, geom, n1 * tau)
        A = _identity_rows(A, np.concatenate([b, M + b]))
        rhs[b] = Sb
        rhs[M + b] = Pb
    return A, rhs


def _replace_rows(A, rows, R):
    """``A`` with ``rows`` replaced by the rows of ``R``."""
    n = A.shape[0]
    keep = np.ones(n)
    keep[rows] = 0.0
    rows = np.asarray(rows)
    P = sp.csr_matrix((np.ones(len(rows)), (rows, np.arange(len(rows)))), shape=(n, len(rows)))
    return (sp.diags(keep) @ A + P @ R).tocsr()


def _identity_rows(A, rows):
    n = A.shape[0]
    rows = np.asarray(rows)
    I = sp.csr_matrix((np.ones(len(rows)), (np.arange(len(rows)), rows)), shape=(len(rows), n))
    return _replace_rows(A, rows, I)


def residual_semi_implicit(x, state_n, model, geom, src, tau, sources=None, cfg=None):
    """Residual of the semi-implicit equations at ``x``, evaluated edge by edge (no matrix)."""
    cfg = cfg or SolverConfig(tau=tau, T=tau)
    n1 = state_n.n + 1
    if sources is None:
        sources = build_discrete_sources(src, geom, tau, n1)
    M = geom.n_nodes
    S, P = x[:M], x[M:]
    s = state_n.S.values
    mt = porosity_masses(geom, src.porosity) / tau
    ew, eo = _frozen_mobilities(geom, state_n, model)
    pc_lin = model.pc(s) + model.pc_prime(s) * (S - s)
    g1, g2 = _semi_implicit_rhs_sources(geom, model, sources, s)
    r1 = mt * (S - s) - edge_residual(geom, ew, P) - g1
    r2 = -mt * (S - s) - edge_residual(geom, eo, P + pc_lin) - g2
    if _constraint_mode(src, cfg):
        r1[M - 1] = np.dot(geom.masses, P)
    else:
        b, Sb, Pb = _dirichlet_values(src, geom, n1 * tau)
        r1[b] = S[b] - Sb
        r2[b] = P[b] - Pb
    return np.concatenate([r1, r2])


def step_semi_implicit(state_n, model, geom, src, cfg):
    tau = cfg.tau
    M = geom.n_nodes
    sources = build_discrete_sources(src, geom, tau, state_n.n + 1)
    A, rhs = assemble_semi_implicit(state_n, model, geom, src, tau, cfg, sources)
    try:
        x = _solve(A, rhs, cfg)
    except SolverError as exc:
        raise StepError(f"semi-implicit solve failed: {exc}; matrix size {A.shape[0]}", state_n.n + 1) from exc
    S, P = x[:M], x[M:]
    if src.bc == NO_FLUX:
        P = P - np.dot(geom.masses, P) / geom.masses.sum()
    s = state_n.S.values
    pc_lin = model.pc(s) + model.pc_prime(s) * (S - s)
    n1 = state_n.n + 1
    return TimeState.from_arrays(geom, n1, n1 * tau, S, P, P + pc_lin), 0, sources


# ---------------------------------------------------------------------------
# fully implicit scheme


@dataclass
class _Frozen:
    """Upwind choices (and optionally mobilities) held fixed during a fixed-point sweep."""

    up_w: np.ndarray
    up_o: np.ndarray
    eta_w: np.ndarray = None
    eta_o: np.ndarray = None


def _implicit_parts(x, state_n, model, geom, src, tau, sources, frozen=None):
    M = geom.n_nodes
    S, P = x[:M], x[M:]
    Po = P + model.pc(S)
    if frozen is None:
        up_w = upwind_selection(geom, S, P, WETTING)
        up_o = upwind_selection(geom, S, Po, NONWETTING)
    else:
        up_w, up_o = frozen.up_w, frozen.up_o
    return S, P, Po, up_w, up_o


def residual_implicit(guess, state_n, model, geom, src, tau, sources=None, _frozen=None):
    """Residual of the nonlinear scheme.

    ``guess`` is a :class:`TimeState` or a stacked vector ``[S, P_w]``.
    """
    x = _as_vector(guess, geom)
    if sources is None:
        sources = build_discrete_sources(src, geom, tau, state_n.n + 1)
    M = geom.n_nodes
    S, P, Po, up_w, up_o = _implicit_parts(x, state_n, model, geom, src, tau, sources, _frozen)
    if _frozen is not None and _frozen.eta_w is not None:
        ew, eo = _frozen.eta_w, _frozen.eta_o
    else:
        ew, eo = model.eta_w(S[up_w]), model.eta_o(S[up_o])
    mt = porosity_masses(geom, src.porosity) / tau
    dS = S - state_n.S.values
    g1, g2 = _implicit_sources(geom, model, sources, S)
    r1 = mt * dS - edge_residual(geom, ew, P) - g1
    r2 = -mt * dS - edge_residual(geom, eo, Po) - g2
    _close_rows(r1, r2, S, P, geom, src, state_n, tau)
    return np.concatenate([r1, r2])


def _implicit_sources(geom, model, sources, S):
    m = geom.masses
    if sources.mode == MANUFACTURED:
        return m * sources.f1, m * sources.f2
    qb, ql, sin = sources.q_bar, sources.q_low, sources.s_in
    return (
        m * (model.f_w(sin) * qb - model.f_w(S) * ql),
        m * (model.f_o(sin) * qb - model.f_o(S) * ql),
    )


def _close_rows(r1, r2, S, P, geom, src, state_n, tau):
    M = geom.n_nodes
    if src.bc == NO_FLUX:
        r1[M - 1] = np.dot(geom.masses, P)
    else:
        b, Sb, Pb = _dirichlet_values(src, geom, (state_n.n + 1) * tau)
        r1[b] = S[b] - Sb
        r2[b] = P[b] - Pb


def jacobian_implicit(guess, state_n, model, geom, src, tau, sources=None, _frozen=None):
    """Analytic Jacobian of :func:`residual_implicit` on the active upwind branch."""
    x = _as_vector(guess, geom)
    if sources is None:
        sources = build_discrete_sources(src, geom, tau, state_n.n + 1)
    M = geom.n_nodes
    S, P, Po, up_w, up_o = _implicit_parts(x, state_n, model, geom, src, tau, sources, _frozen)
    fixed_mob = _frozen is not None and _frozen.eta_w is not None
    if fixed_mob:
        ew, eo = _frozen.eta_w, _frozen.eta_o
        dew = deo = np.zeros(geom.n_edges)
    else:
        ew, eo = model.eta_w(S[up_w]), model.eta_o(S[up_o])
        dew, deo = model.eta_w_prime(S[up_w]), model.eta_o_prime(S[up_o])
    i, j = geom.edges[:, 0], geom.edges[:, 1]
    c = geom.c
    dpc = model.pc_prime(S)
    mt = porosity_masses(geom, src.porosity) / tau

    rows, cols, vals = [], [], []

    def add(r, k, v):
        rows.append(r)
        cols.append(k)
        vals.append(v)

    # mass terms and outflow sources (diagonal in S)
    diag1 = mt.copy()
    diag2 = -mt.copy()
    if sources.mode == WELLS:
        diag1 += geom.masses * model.f_w_prime(S) * sources.q_low
        diag2 += geom.masses * model.f_o_prime(S) * sources.q_low
    nodes = np.arange(M)
    add(nodes, nodes, diag1)
    add(M + nodes, nodes, diag2)

    # wetting flux g_e = c eta_w (P_j - P_i): row i gets -g_e, row j gets +g_e
    dPw = P[j] - P[i]
    cw = c * ew
    for sign, r in ((-1.0, i), (1.0, j)):
        add(r, M + j, sign * cw)
        add(r, M + i, -sign * cw)
        add(r, up_w, sign * c * dew * dPw)
    # nonwetting flux with P_o = P_w + pc(S)
    dPo = Po[j] - Po[i]
    co = c * eo
    for sign, r in ((-1.0, i), (1.0, j)):
        add(M + r, M + j, sign * co)
        add(M + r, M + i, -sign * co)
        add(M + r, j, sign * co * dpc[j])
        add(M + r, i, -sign * co * dpc[i])
        add(M + r, up_o, sign * c * deo * dPo)

    J = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(2 * M, 2 * M)
    )
    if src.bc == NO_FLUX:
        return _replace_rows(J, [M - 1], sp.csr_matrix(
            (geom.masses, (np.zeros(M, dtype=int), M + np.arange(M))), shape=(1, 2 * M)))
    b = geom.mesh.boundary_nodes
    return _identity_rows(J, np.concatenate([b, M + b]))


def _as_vector(guess, geom):
    if isinstance(guess, TimeState):
        return np.concatenate([guess.S.values, guess.P_w.values])
    x = np.asarray(guess, dtype=float)
    if x.shape != (2 * geom.n_nodes,):
        raise InvalidArgument(f"expected a vector of length {2 * geom.n_nodes}")
    return x


def _newton(x, F, Jf, cfg, label, project=None):
    """Damped Newton with backtracking on the Euclidean residual norm.

    ``project`` maps trial points back onto the admissible set before they are tried.
    """
    r = F(x)
    rn = np.linalg.norm(r)
    for it in range(1, cfg.newton_max_iters + 1):
        if np.max(np.abs(r)) <= cfg.newton_tol:
            return x, it - 1, True
        try:
            dx = _solve(Jf(x), -r, cfg)
        except SolverError as exc:
            log.debug("%s: linear solve failed at iteration %d: %s", label, it, exc)
            return x, it, False
        lam = 1.0
        while True:
            xt = x + lam * dx
            if project is not None:
                xt = project(xt)
            rt = F(xt)
            rtn = np.linalg.norm(rt)
            if np.isfinite(rtn) and rtn <= (1.0 - 1e-4 * lam) * rn:
                break
            lam *= cfg.damping
            if lam < cfg.min_step:
                log.debug("%s: line search stalled at iteration %d (|r|=%.3e)", label, it, rn)
                return x, it, False
        x, r, rn = xt, rt, rtn
    return x, cfg.newton_max_iters, bool(np.max(np.abs(r)) <= cfg.newton_tol)


def _polish(x, F, Jf, cfg, extra=2):
    """A couple of extra full Newton steps, kept only while they reduce the residual."""
    r = F(x)
    for _ in range(extra):
        try:
            xt = x + _solve(Jf(x), -r, cfg)
        except SolverError:
            break
        rt = F(xt)
        if not np.linalg.norm(rt) < np.linalg.norm(r):
            break
        x, r = xt, rt
    return x


def _box(M):
    """Projection of ``[S, P_w]`` onto ``0 <= S <= 1``; every solution of the scheme lies there."""
    def project(x):
        x = x.copy()
        np.clip(x[:M], 0.0, 1.0, out=x[:M])
        return x
    return project


def step_implicit(state_n, model, geom, src, cfg):
    tau = cfg.tau
    n1 = state_n.n + 1
    M = geom.n_nodes
    sources = build_discrete_sources(src, geom, tau, n1)
    x0 = np.concatenate([state_n.S.values, state_n.P_w.values])
    if src.bc == DIRICHLET:
        b, Sb, Pb = _dirichlet_values(src, geom, n1 * tau)
        x0[b], x0[M + b] = Sb, Pb

    F = lambda z: residual_implicit(z, state_n, model, geom, src, tau, sources)  # noqa: E731
    Jf = lambda z: jacobian_implicit(z, state_n, model, geom, src, tau, sources)  # noqa: E731
    x, iters, ok = _newton(x0, F, Jf, cfg, f"step {n1} newton")
    if not ok:
        # overshoots below S = 0 or above 1 hit the kinks of the constant extension
        log.info("step %d: newton stalled, retrying with saturations projected onto [0, 1]", n1)
        x, more, ok = _newton(x0, F, Jf, cfg, f"step {n1} projected newton", _box(M))
        iters += more
    if not ok:
        log.info("step %d: newton stalled, switching to fixed-point iteration", n1)
        x, more, ok = _picard(x, state_n, model, geom, src, cfg, sources, F)
        iters += more
    if not ok:
        raise StepError(
            f"nonlinear solve did not converge (|r|_inf={np.max(np.abs(F(x))):.3e}); try a smaller tau",
            n1,
        )
    x = _polish(x, F, Jf, cfg)
    S, P = x[:M], x[M:]
    return TimeState.from_arrays(geom, n1, n1 * tau, S, P, P + model.pc(S)), iters, sources


def _picard(x, state_n, model, geom, src, cfg, sources, F):
    """Fixed point: freeze upwinding and mobilities, solve the smooth remainder, re-upwind."""
    tau = cfg.tau
    M = geom.n_nodes
    iters = 0
    for _ in range(cfg.picard_max_iters):
        S, P = x[:M], x[M:]
        up_w = upwind_selection(geom, S, P, WETTING)
        up_o = upwind_selection(geom, S, P + model.pc(S), NONWETTING)
        fr = _Frozen(up_w, up_o, model.eta_w(S[up_w]), model.eta_o(S[up_o]))
        Ff = lambda z: residual_implicit(z, state_n, model, geom, src, tau, sources, fr)  # noqa: E731
        Jff = lambda z: jacobian_implicit(z, state_n, model, geom, src, tau, sources, fr)  # noqa: E731
        x_new, k, _ = _newton(x, Ff, Jff, cfg, "fixed-point inner")
        iters += max(k, 1)
        step = np.max(np.abs(x_new - x))
        x = x_new
        if np.max(np.abs(F(x))) <= cfg.newton_tol:
            return x, iters, True
        if step == 0.0:
            break
    return x, iters, False


def redundant_row_residual(state, state_n, model, geom, src, tau, sources=None):
    """The wetting equation of the last node, which the system omits in no-flux mode."""
    if sources is None:
        sources = build_discrete_sources(src, geom, tau, state_n.n + 1)
    M = geom.n_nodes
    S, P = state.S.values, state.P_w.values
    up_w = upwind_selection(geom, S, P, WETTING)
    ew = model.eta_w(S[up_w])
    mt = porosity_masses(geom, src.porosity) / tau
    g1, _ = _implicit_sources(geom, model, sources, S)
    r1 = mt * (S - state_n.S.values) - edge_residual(geom, ew, P) - g1
    return float(r1[M - 1])


def mass_balance_defect(state, state_n, model, geom, src, tau, sources=None):
    """``sum m~_i (S^n - S^{n-1}) - tau sum m_i (f_w(s_in) q_bar - f_w(S) q_low)``."""
    if sources is None:
        sources = build_discrete_sources(src, geom, tau, state_n.n + 1)
    mt = porosity_masses(geom, src.porosity)
    S = state.S.values
    g1, _ = _implicit_sources(geom, model, sources, S)
    return float(np.dot(mt, S - state_n.S.values) - tau * g1.sum())


def flux_imbalance(state, model, geom, sources, src):
    """``max_i |sum_j c_ij F^ij - m_i (total source)|`` over the equation nodes."""
    div = flux_divergence(geom, total_flux(geom, state, model))
    m = geom.masses
    if sources.mode == MANUFACTURED:
        rhs = m * (sources.f1 + sources.f2)
    else:
        rhs = m * (sources.q_bar - sources.q_low)
    gap = np.abs(div - rhs)
    if src.bc == DIRICHLET:
        gap = gap[~geom.mesh.boundary_mask]
    return float(gap.max()) if gap.size else 0.0


def auxiliary_pressures(state, model, geom):
    """Diagnostic global pressures ``P_w + p_wg(S)`` and ``P_o - p_og(S)`` and their gradient norms."""
    S = state.S.values
    Uw = state.P_w.values + model.aux("p_wg", S)
    Uo = state.P_o.values - model.aux("p_og", S)
    return {
        "U_w": NodalField(Uw, geom),
        "U_o": NodalField(Uo, geom),
        "grad_U_w": grad_norm(geom, Uw),
        "grad_U_o": grad_norm(geom, Uo),
    }


# ---------------------------------------------------------------------------
# driver

LOG_COLUMNS = ("step", "t", "min_S", "max_S", "mean_Pw", "energy_acc", "flux_imbalance", "newton_iters")


@dataclass
class RunLog:
    rows: list = field(default_factory=list)

    def append(self, row):
        self.rows.append(tuple(row))

    def column(self, name):
        k = LOG_COLUMNS.index(name)
        return np.array([r[k] for r in self.rows])

    def to_csv(self, header_lines=()):
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([r[0], *(_fmt(v) for v in r[1:-1]), r[-1]])
        return buf.getvalue()


def _fmt(v):
    return "%.17g" % v


def _log_row(state, geom, energy_acc, imbalance, iters):
    S, P = state.S.values, state.P_w.values
    return (
        state.n,
        state.t,
        float(S.min()),
        float(S.max()),
        float(np.dot(geom.masses, P) / geom.total_measure),
        energy_acc,
        imbalance,
        iters,
    )


def run(initial, model, geom, src, cfg, sinks=()):
    """Advance ``initial`` to ``cfg.T``; every sink is called as ``sink(state, row)``."""
    step = step_implicit if cfg.scheme == IMPLICIT else step_semi_implicit
    logbook = RunLog()
    state = initial
    energy_acc = 0.0
    row = _log_row(state, geom, energy_acc, 0.0, 0)
    logbook.append(row)
    for sink in sinks:
        sink(state, row)
    for _ in range(cfg.n_steps):
        try:
            state, iters, sources = step(state, model, geom, src, cfg)
        except StepError:
            raise
        except (SolverError, DataError) as exc:
            raise StepError(str(exc), state.n + 1) from exc
        energy_acc += cfg.tau * energy_diagnostic(geom, state, model)
        row = _log_row(state, geom, energy_acc, flux_imbalance(state, model, geom, sources, src), iters)
        logbook.append(row)
        for sink in sinks:
            sink(state, row)
    return state, logbook
