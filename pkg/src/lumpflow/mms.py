"""Manufactured solutions, L2 errors and the mesh-refinement study."""

import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .constitutive import validation_model, validation_porosity
from .errors import DataError
from .fem import interpolate_nodal, l2_norm, nodal_values
from .mesh import build_geometry, generate_structured_unit_square
from .stepper import DIRICHLET, MANUFACTURED, POINTWISE, SEMI_IMPLICIT, SolverConfig, SourceModel, TimeState, run

DEFAULT_LEVELS = (5, 10, 20, 40, 80)

# published errors of the refinement table (h -> (P_w, S)); the S entry at
# h = 0.05 is printed as 1.14E-4, read here as 1.14E-3
REFERENCE_ERRORS = {
    0.2: (8.50e-3, 4.21e-3),
    0.1: (4.15e-3, 2.30e-3),
    0.05: (2.08e-3, 1.14e-3),
    0.025: (1.04e-3, 5.57e-4),
    0.0125: (5.23e-4, 2.75e-4),
}


@dataclass(frozen=True)
class ExactSolution:
    """Analytic ``P_w`` and ``S`` with the derivatives needed for source terms.

    Every callable takes ``(t, x, y)``.  ``*_xx`` etc. are second derivatives.
    """

    P: callable
    P_x: callable
    P_y: callable
    P_xx: callable
    P_yy: callable
    S: callable
    S_t: callable
    S_x: callable
    S_y: callable
    S_xx: callable
    S_yy: callable
    name: str = "custom"

    def check_range(self, T=1.0, samples=41):
        """Sample ``S`` on ``[0,1]^2 x [0,T]``; raise if it leaves ``(0, 1)``."""
        g = np.linspace(0.0, 1.0, samples)
        t, x, y = np.meshgrid(np.linspace(0.0, T, samples), g, g, indexing="ij")
        s = np.broadcast_to(self.S(t, x, y), t.shape)
        if s.min() <= 0.0 or s.max() >= 1.0:
            raise DataError(f"exact saturation leaves (0, 1): [{s.min():.4g}, {s.max():.4g}]")
        return float(s.min()), float(s.max())


def validation_solution():
    """``P_w = 2 + x^2 y - y^2 + x^2 sin(t+y)``, ``S = 0.2 (2 + 2xy + cos(t+x))``."""
    return ExactSolution(
        P=lambda t, x, y: 2 + x**2 * y - y**2 + x**2 * np.sin(t + y),
        P_x=lambda t, x, y: 2 * x * y + 2 * x * np.sin(t + y),
        P_y=lambda t, x, y: x**2 - 2 * y + x**2 * np.cos(t + y),
        P_xx=lambda t, x, y: 2 * y + 2 * np.sin(t + y),
        P_yy=lambda t, x, y: -2 - x**2 * np.sin(t + y),
        S=lambda t, x, y: 0.2 * (2 + 2 * x * y + np.cos(t + x)),
        S_t=lambda t, x, y: -0.2 * np.sin(t + x) + 0 * y,
        S_x=lambda t, x, y: 0.2 * (2 * y - np.sin(t + x)),
        S_y=lambda t, x, y: 0.4 * x + 0 * t,
        S_xx=lambda t, x, y: -0.2 * np.cos(t + x) + 0 * y,
        S_yy=lambda t, x, y: 0 * (t + x + y),
        name="validation",
    )


def constant_solution(p=1.0, s=0.5):
    zero = lambda t, x, y: 0 * (t + x + y)  # noqa: E731
    return ExactSolution(
        P=lambda t, x, y: p + 0 * (t + x + y),
        P_x=zero, P_y=zero, P_xx=zero, P_yy=zero,
        S=lambda t, x, y: s + 0 * (t + x + y),
        S_t=zero, S_x=zero, S_y=zero, S_xx=zero, S_yy=zero,
        name="constant",
    )


def _porosity_function(phi):
    if callable(phi):
        return phi
    c = float(phi)
    return lambda x, y: c + 0 * x


def manufactured_sources(model, phi, exact):
    """Return ``(f1, f2)``, callables of ``(t, x, y)``, for the strong two-phase equations.

    ``f1 = d_t(phi S) - div(eta_w(S) grad P_w)`` and
    ``f2 = -d_t(phi S) - div(eta_o(S) grad(P_w + p_c(S)))``.
    Porosity is time independent, so only ``phi S_t`` enters.
    """
    phi_fn = _porosity_function(phi)
    e = exact

    def _s(t, x, y):
        s = np.asarray(e.S(t, x, y), dtype=float)
        if np.any(s < 0.0) or np.any(s > 1.0):
            raise DataError("exact saturation outside [0, 1]")
        return s

    def f1(t, x, y):
        s = _s(t, x, y)
        sx, sy = e.S_x(t, x, y), e.S_y(t, x, y)
        px, py = e.P_x(t, x, y), e.P_y(t, x, y)
        lap_p = e.P_xx(t, x, y) + e.P_yy(t, x, y)
        div = model.eta_w_prime(s) * (sx * px + sy * py) + model.eta_w(s) * lap_p
        return phi_fn(x, y) * e.S_t(t, x, y) - div

    def f2(t, x, y):
        s = _s(t, x, y)
        sx, sy = e.S_x(t, x, y), e.S_y(t, x, y)
        d1, d2 = model.pc_prime(s), model.pc_second(s)
        pox = e.P_x(t, x, y) + d1 * sx
        poy = e.P_y(t, x, y) + d1 * sy
        lap_s = e.S_xx(t, x, y) + e.S_yy(t, x, y)
        lap_po = e.P_xx(t, x, y) + e.P_yy(t, x, y) + d2 * (sx * sx + sy * sy) + d1 * lap_s
        div = model.eta_o_prime(s) * (sx * pox + sy * poy) + model.eta_o(s) * lap_po
        return -phi_fn(x, y) * e.S_t(t, x, y) - div

    return f1, f2


def l2_error(geom, field, exact_at_T):
    """P1 L2 norm of ``field - I_h(exact)``; ``exact_at_T`` takes ``(x, y)``."""
    diff = nodal_values(geom, field) - interpolate_nodal(geom, exact_at_T).values
    return l2_norm(geom, diff)


def rate(e_coarse, e_fine, h_coarse, h_fine):
    return math.log(e_coarse / e_fine) / math.log(h_coarse / h_fine)


@dataclass
class ConvergenceTable:
    rows: list = field(default_factory=list)  # (h, n_df, err_pw, rate_pw, err_s, rate_s)
    seconds: float = 0.0

    def add(self, h, n_df, err_pw, err_s):
        if self.rows:
            h0, _, e0p, _, e0s, _ = self.rows[-1]
            rp, rs = rate(e0p, err_pw, h0, h), rate(e0s, err_s, h0, h)
        else:
            rp = rs = None
        self.rows.append((h, n_df, err_pw, rp, err_s, rs))

    def column(self, name):
        k = ("h", "n_df", "err_pw", "rate_pw", "err_s", "rate_s").index(name)
        return [r[k] for r in self.rows]

    def to_csv(self, header_lines=()):
        out = io.StringIO()
        for line in header_lines:
            out.write(f"# {line}\n")
        out.write("h,n_df,err_pw,rate_pw,err_s,rate_s\n")
        for h, n, ep, rp, es, rs in self.rows:
            cells = ["%.17g" % h, str(n), "%.17g" % ep, "" if rp is None else "%.17g" % rp,
                     "%.17g" % es, "" if rs is None else "%.17g" % rs]
            out.write(",".join(cells) + "\n")
        return out.getvalue()

    def to_text(self):
        lines = [
            f"{'h':>9} {'n_df':>7} | {'err P_w':>10} {'rate':>6} | {'err S':>10} {'rate':>6}",
            "-" * 58,
        ]
        for h, n, ep, rp, es, rs in self.rows:
            rps = "-" if rp is None else f"{rp:.2f}"
            rss = "-" if rs is None else f"{rs:.2f}"
            lines.append(f"{h:>9.5g} {n:>7d} | {ep:>10.2E} {rps:>6} | {es:>10.2E} {rss:>6}")
        return "\n".join(lines) + "\n"


def mms_problem(model=None, exact=None, porosity=validation_porosity, sampling=POINTWISE):
    """Source model with manufactured sources and Dirichlet traces from ``exact``.

    Sources are sampled at the nodes at the end of each step by default, as in
    the validation scheme's ``m_i f^{n+1,i}``; ``sampling="projected"`` uses
    step and patch averages instead.
    """
    model = model or validation_model()
    exact = exact or validation_solution()
    f1, f2 = manufactured_sources(model, porosity, exact)
    src = SourceModel(
        mode=MANUFACTURED, f1=f1, f2=f2, bc=DIRICHLET,
        S_trace=exact.S, Pw_trace=exact.P, porosity=porosity, sampling=sampling,
    )
    return model, exact, src


def exact_state(geom, model, exact, t, n=0):
    S = interpolate_nodal(geom, lambda x, y: exact.S(t, x, y)).values
    P = interpolate_nodal(geom, lambda x, y: exact.P(t, x, y)).values
    return TimeState.from_arrays(geom, n, t, S, P, P + model.pc(S))


def run_level(n, model, exact, src, scheme=SEMI_IMPLICIT, T=1.0, tau=None):
    """One refinement level: structured mesh with ``n`` cells per side, ``tau = h`` by default."""
    geom = build_geometry(generate_structured_unit_square(n))
    h = 1.0 / n
    cfg = SolverConfig(tau=tau or h, T=T, scheme=scheme)
    state0 = exact_state(geom, model, exact, 0.0)
    final, logbook = run(state0, model, geom, src, cfg)
    err_p = l2_error(geom, final.P_w, lambda x, y: exact.P(final.t, x, y))
    err_s = l2_error(geom, final.S, lambda x, y: exact.S(final.t, x, y))
    return geom, final, err_p, err_s


def convergence_study(levels=DEFAULT_LEVELS, scheme=SEMI_IMPLICIT, T=1.0, model=None, exact=None,
                      porosity=validation_porosity, sampling=POINTWISE):
    """Errors at ``T`` and observed rates for structured meshes with ``n`` cells per side."""
    levels = list(levels)
    if sorted(levels) != levels:
        raise ValueError("levels must be given from coarse to fine")
    model, exact, src = mms_problem(model, exact, porosity, sampling)
    exact.check_range(T)
    table = ConvergenceTable()
    start = time.perf_counter()
    for n in levels:
        geom, _, ep, es = run_level(n, model, exact, src, scheme, T)
        table.add(1.0 / n, geom.n_nodes, ep, es)
    table.seconds = time.perf_counter() - start
    return table
