"""Mobilities, fractional flows, capillary pressure and their integral transforms.

All constitutive functions are extended by constants outside ``[0, 1]``; their
derivatives are taken as zero there.
"""

import numpy as np
from scipy import integrate, special
from scipy.interpolate import CubicHermiteSpline

from .errors import InvalidArgument, ModelError, QuadratureError

BASIC = ("eta_w", "eta_o", "f_w", "f_o", "pc", "pc_prime")
AUXILIARY = ("g", "p_wg", "p_og", "g_c", "G")

TABLE_SIZE = 4096
QUAD_TOL = 1e-10
TABLE_TOL = 1e-8


def _inside(s):
    s = np.asarray(s, dtype=float)
    return s, (s >= 0.0) & (s <= 1.0)


class FluidModel:
    """Constitutive description of the two fluids.

    ``eta_w``, ``eta_o``, ``pc`` and ``pc_prime`` are vectorized callables on
    ``[0, 1]``. Missing mobility derivatives are approximated by central
    differences; ``pc_second`` is only needed for manufactured sources.
    ``breakpoints`` lists saturations where the functions are not smooth; they
    are inserted into the auxiliary lookup grid.
    """

    def __init__(
        self,
        eta_w,
        eta_o,
        pc,
        pc_prime,
        *,
        eta_w_prime=None,
        eta_o_prime=None,
        pc_second=None,
        eta_star=None,
        breakpoints=(),
        name="custom",
        params=None,
        table_size=TABLE_SIZE,
    ):
        self._eta_w = eta_w
        self._eta_o = eta_o
        self._pc = pc
        self._pc_prime = pc_prime
        self._eta_w_prime = eta_w_prime or _central_difference(eta_w)
        self._eta_o_prime = eta_o_prime or _central_difference(eta_o)
        self._pc_second = pc_second
        self.breakpoints = tuple(sorted(float(b) for b in breakpoints if 0.0 < b < 1.0))
        self.name = name
        self.params = dict(params or {})

        probe = np.linspace(0.0, 1.0, 1001)
        total = self._eta_w(probe) + self._eta_o(probe)
        if not np.all(np.isfinite(total)):
            raise ModelError("mobilities are not finite on [0, 1]")
        lowest = float(total.min())
        if eta_star is None:
            eta_star = lowest
        if eta_star <= 0.0 or lowest < eta_star * (1 - 1e-12):
            raise ModelError(
                f"eta_w + eta_o must stay above a positive bound; minimum on [0, 1] is {lowest:g}"
            )
        self.eta_star = float(eta_star)
        if np.any(np.diff(self._eta_w(probe)) < -1e-14) or np.any(np.diff(self._eta_o(probe)) > 1e-14):
            raise ModelError("eta_w must be nondecreasing and eta_o nonincreasing")
        if np.any(np.diff(self._pc(probe)) >= 0.0):
            raise ModelError("capillary pressure must be strictly decreasing on [0, 1]")
        self._tables = _AuxTables(self, table_size)

    # basic functions -------------------------------------------------------

    def eta_w(self, s):
        return self._eta_w(np.clip(s, 0.0, 1.0))

    def eta_o(self, s):
        return self._eta_o(np.clip(s, 0.0, 1.0))

    def f_w(self, s):
        ew, eo = self.eta_w(s), self.eta_o(s)
        return ew / (ew + eo)

    def f_o(self, s):
        ew, eo = self.eta_w(s), self.eta_o(s)
        return eo / (ew + eo)

    def pc(self, s):
        return self._pc(np.clip(s, 0.0, 1.0))

    def pc_prime(self, s):
        s, inside = _inside(s)
        return np.where(inside, self._pc_prime(np.clip(s, 0.0, 1.0)), 0.0)

    def eta_w_prime(self, s):
        s, inside = _inside(s)
        return np.where(inside, self._eta_w_prime(np.clip(s, 0.0, 1.0)), 0.0)

    def eta_o_prime(self, s):
        s, inside = _inside(s)
        return np.where(inside, self._eta_o_prime(np.clip(s, 0.0, 1.0)), 0.0)

    def f_w_prime(self, s):
        ew, eo = self.eta_w(s), self.eta_o(s)
        return (eo * self.eta_w_prime(s) - ew * self.eta_o_prime(s)) / (ew + eo) ** 2

    def f_o_prime(self, s):
        return -self.f_w_prime(s)

    def pc_second(self, s):
        if self._pc_second is None:
            raise ModelError(f"model {self.name!r} provides no second derivative of pc")
        s, inside = _inside(s)
        return np.where(inside, self._pc_second(np.clip(s, 0.0, 1.0)), 0.0)

    def eval(self, which, s):
        if which not in BASIC:
            raise InvalidArgument(f"unknown function {which!r}; expected one of {BASIC}")
        return getattr(self, which)(s)

    # auxiliary functions ---------------------------------------------------

    def integrand(self, which, s):
        """Derivative of the auxiliary function ``which`` (``g_c`` included, as ``-pc``)."""
        if which == "g":
            ew, eo = self.eta_w(s), self.eta_o(s)
            return -ew * eo / (ew + eo) * self.pc_prime(s)
        if which == "p_wg":
            return self.f_o(s) * self.pc_prime(s)
        if which == "p_og":
            return self.f_w(s) * self.pc_prime(s)
        if which == "g_c":
            return -self.pc(s)
        if which == "G":
            return self.f_w(s) - self.f_o(s)
        raise InvalidArgument(f"unknown auxiliary function {which!r}; expected one of {AUXILIARY}")

    def aux(self, which, s, exact=False):
        """Evaluate an auxiliary function from the lookup table (or by direct quadrature)."""
        if which not in AUXILIARY:
            raise InvalidArgument(f"unknown auxiliary function {which!r}; expected one of {AUXILIARY}")
        s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
        if exact:
            return np.vectorize(lambda x: self._integral(which, x))(s)
        return self._tables(which, s)

    def _integral(self, which, x):
        """Adaptive quadrature of the defining integral, split at breakpoints."""
        lo, hi, sign = (x, 1.0, -1.0) if which == "g_c" else (0.0, x, 1.0)
        if hi <= lo:
            return 0.0
        split = (*self.breakpoints, 1e-6, 1e-3, 0.5, 1 - 1e-3, 1 - 1e-6)
        cuts = sorted({lo, hi, *(b for b in split if lo < b < hi)})
        return sign * sum(_quad_piece(self, which, a, b) for a, b in zip(cuts[:-1], cuts[1:]))

    def __repr__(self):
        return f"FluidModel({self.name!r}, eta_star={self.eta_star:.4g})"


def _central_difference(fun, step=1e-7):
    def deriv(s):
        s = np.asarray(s, dtype=float)
        lo = np.clip(s - step, 0.0, 1.0)
        hi = np.clip(s + step, 0.0, 1.0)
        return (fun(hi) - fun(lo)) / (hi - lo)

    return deriv


class _AuxTables:
    """Cumulative integrals on a dense grid, interpolated by slope-limited Hermite cubics."""

    def __init__(self, model, size):
        # geometric grading near the ends resolves integrable endpoint singularities
        # (near s = 1 the float resolution of 1 - s limits the useful grading)
        graded = np.concatenate([np.geomspace(1e-10, 0.1, 1024), 1.0 - np.geomspace(1e-6, 0.1, 512)])
        grid = np.union1d(np.linspace(0.0, 1.0, size), model.breakpoints)
        grid = np.union1d(grid, graded)
        self.grid = grid
        a, b = grid[:-1], grid[1:]
        x, w = np.polynomial.legendre.leggauss(10)
        half = 0.5 * (b - a)
        nodes = (a + b)[:, None] * 0.5 + half[:, None] * x[None, :]
        special_iv = {0, len(a) - 1}
        for bp in model.breakpoints:
            k = int(np.searchsorted(grid, bp))
            special_iv.update({k - 1, k})
        self._model = model
        self._splines = {}
        self._exact_zones = {}
        for which in AUXILIARY:
            with np.errstate(divide="ignore", invalid="ignore"):
                f = model.integrand(which, nodes)
                piece = half * (f @ w)
            for k in special_iv:
                if 0 <= k < len(a):
                    piece[k] = _quad_piece(model, which, a[k], b[k])
            if not np.all(np.isfinite(piece)):
                raise QuadratureError(f"non-finite integrand for {which} on model {model.name!r}")
            if which == "g_c":
                # integrand is -pc; accumulate from the right so g_c(1) = 0
                values = np.concatenate([-np.cumsum(piece[::-1])[::-1], [0.0]])
            else:
                values = np.concatenate([[0.0], np.cumsum(piece)])
            with np.errstate(divide="ignore", invalid="ignore"):
                slopes = np.asarray(model.integrand(which, grid), dtype=float)
            # intervals touching an infinite slope are evaluated by quadrature instead
            singular = ~np.isfinite(slopes)
            self._exact_zones[which] = [
                (grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]) for k in np.nonzero(singular)[0]
            ]
            # G is not monotone; the other four are
            self._splines[which] = _limited_hermite(
                grid, values, slopes, piece / (b - a), limit=which != "G"
            )
        self._self_check(model)

    def __call__(self, which, s):
        out = self._splines[which](s)
        zones = self._exact_zones[which]
        if zones:
            s = np.asarray(s, dtype=float)
            mask = np.zeros(s.shape, dtype=bool)
            for lo, hi in zones:
                mask |= (s >= lo) & (s <= hi)
            if mask.any():
                out = np.array(out, dtype=float)
                out[mask] = [self._model._integral(which, x) for x in s[mask]]
        return out

    def _self_check(self, model):
        probe = np.array([0.0, 0.013, 0.05, 0.137, 0.5, 0.731, 0.999, 1.0])
        for which in AUXILIARY:
            exact = np.array([model._integral(which, x) for x in probe])
            approx = self(which, probe)
            err = np.max(np.abs(exact - approx))
            if err > TABLE_TOL:
                raise QuadratureError(
                    f"lookup table for {which} deviates from quadrature by {err:.2e} on {model.name!r}"
                )


def _finite_integrand(model, which):
    """Integrand that steps off an endpoint where an integrable singularity evaluates to inf."""

    def f(t):
        v = float(model.integrand(which, t))
        if not np.isfinite(v):
            v = float(model.integrand(which, np.nextafter(t, 0.5)))
        return v

    return f


def _quad_piece(model, which, a, b):
    f = _finite_integrand(model, which)
    if b == 1.0:
        # integrate in u = 1 - s so the singular end sits at u = 0
        f, a, b = (lambda u, f=f: f(1.0 - u)), 0.0, 1.0 - a
    value, err, *rest = integrate.quad(
        f, a, b, epsabs=QUAD_TOL * 1e-2, epsrel=1e-10,
        limit=200, full_output=1,
    )
    if len(rest) > 1 and err > TABLE_TOL:
        raise QuadratureError(f"quadrature of {which} on [{a:g}, {b:g}] failed: {rest[1]}")
    return value


def _limited_hermite(x, y, slopes, secants, limit=True):
    """Hermite cubic through ``(x, y)`` with the given slopes.

    With ``limit`` the slopes are clipped (Fritsch-Carlson) wherever the data
    are locally monotone, so monotone data give a monotone interpolant.
    """
    left = np.concatenate([secants[:1], secants])
    right = np.concatenate([secants, secants[-1:]])
    d = np.where(np.isfinite(slopes), slopes, 0.5 * (left + right))
    if not limit:
        return CubicHermiteSpline(x, y, d, extrapolate=False)
    monotone = np.sign(left) * np.sign(right) > 0
    bound = 3.0 * np.minimum(np.abs(left), np.abs(right))
    sgn = np.sign(left)
    limited = sgn * np.clip(sgn * d, 0.0, bound)
    d = np.where(monotone, limited, d)
    return CubicHermiteSpline(x, y, d, extrapolate=False)


def evaluate(model, which, s):
    return model.eval(which, s)


def eval_aux(model, which, s, exact=False):
    return model.aux(which, s, exact=exact)


def brooks_corey_pc(A=50.0, s_switch=0.05):
    """Brooks-Corey capillary pressure ``A s^{-1/2}`` continued linearly (C1) below ``s_switch``."""
    p_switch = A * s_switch**-0.5
    slope = -0.5 * A * s_switch**-1.5

    def pc(s):
        s = np.asarray(s, dtype=float)
        safe = np.maximum(s, s_switch)
        return np.where(s > s_switch, A * safe**-0.5, p_switch + slope * (s - s_switch))

    def pc_prime(s):
        s = np.asarray(s, dtype=float)
        safe = np.maximum(s, s_switch)
        return np.where(s > s_switch, -0.5 * A * safe**-1.5, slope)

    def pc_second(s):
        s = np.asarray(s, dtype=float)
        safe = np.maximum(s, s_switch)
        return np.where(s > s_switch, 0.75 * A * safe**-2.5, 0.0)

    return pc, pc_prime, pc_second


def validation_model(A=50.0, s_switch=0.05):
    """Quadratic mobilities ``4 s^2``, ``0.4 (1-s)^2`` with Brooks-Corey capillary pressure."""
    pc, pc_prime, pc_second = brooks_corey_pc(A, s_switch)
    return FluidModel(
        eta_w=lambda s: 4.0 * np.asarray(s, dtype=float) ** 2,
        eta_o=lambda s: 0.4 * (1.0 - np.asarray(s, dtype=float)) ** 2,
        pc=pc,
        pc_prime=pc_prime,
        eta_w_prime=lambda s: 8.0 * np.asarray(s, dtype=float),
        eta_o_prime=lambda s: -0.8 * (1.0 - np.asarray(s, dtype=float)),
        pc_second=pc_second,
        breakpoints=(s_switch,),
        name="validation",
        params={"A": A, "s_switch": s_switch},
    )


def validation_porosity(x, y):
    return 0.2 * (1.0 + x * y)


def make_power_law_model(
    theta_w,
    theta_o,
    alpha_w,
    alpha_o,
    beta_3,
    beta_4,
    alpha_3,
    *,
    k_w=None,
    k_o=None,
    c=1.0,
    offset=0.0,
):
    """Power-law mobilities ``k_w s^theta_w``, ``k_o (1-s)^theta_o`` and
    ``pc'(s) = -c s^(beta_3-1) (1-s)^(beta_4-1)`` with ``pc(1) = offset``.

    The coefficients must satisfy ``alpha <= k theta <= 1/alpha`` and
    ``alpha_3 <= c <= 1/alpha_3``; by default ``k = 1/theta``.
    """
    problems = []
    for name, val in (("theta_w", theta_w), ("theta_o", theta_o)):
        if not val >= 1.0:
            problems.append(f"{name} must be >= 1 (got {val})")
    for name, val in (("alpha_w", alpha_w), ("alpha_o", alpha_o), ("alpha_3", alpha_3)):
        if not 0.0 < val <= 1.0:
            problems.append(f"{name} must lie in (0, 1] (got {val})")
    for name, val in (("beta_3", beta_3), ("beta_4", beta_4)):
        if not val > 0.0:
            problems.append(f"{name} must be > 0 (got {val})")
    if problems:
        raise InvalidArgument("; ".join(problems))
    k_w = 1.0 / theta_w if k_w is None else float(k_w)
    k_o = 1.0 / theta_o if k_o is None else float(k_o)
    for name, kt, al in (("k_w*theta_w", k_w * theta_w, alpha_w), ("k_o*theta_o", k_o * theta_o, alpha_o)):
        if not al * (1 - 1e-12) <= kt <= (1.0 / al) * (1 + 1e-12):
            problems.append(f"{name} = {kt:g} violates the bracket [{al:g}, {1 / al:g}]")
    if not alpha_3 * (1 - 1e-12) <= c <= (1.0 / alpha_3) * (1 + 1e-12):
        problems.append(f"c = {c:g} violates the bracket [{alpha_3:g}, {1 / alpha_3:g}]")
    if problems:
        raise InvalidArgument("; ".join(problems))

    b3, b4 = float(beta_3), float(beta_4)
    scale = c * special.beta(b3, b4)

    def pc(s):
        s = np.asarray(s, dtype=float)
        return offset + scale * (1.0 - special.betainc(b3, b4, s))

    def pc_prime(s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore"):
            return -c * s ** (b3 - 1.0) * (1.0 - s) ** (b4 - 1.0)

    def pc_second(s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return -c * (
                (b3 - 1.0) * s ** (b3 - 2.0) * (1.0 - s) ** (b4 - 1.0)
                - (b4 - 1.0) * s ** (b3 - 1.0) * (1.0 - s) ** (b4 - 2.0)
            )

    tw, to = float(theta_w), float(theta_o)
    return FluidModel(
        eta_w=lambda s: k_w * np.asarray(s, dtype=float) ** tw,
        eta_o=lambda s: k_o * (1.0 - np.asarray(s, dtype=float)) ** to,
        pc=pc,
        pc_prime=pc_prime,
        eta_w_prime=lambda s: k_w * tw * np.asarray(s, dtype=float) ** (tw - 1.0),
        eta_o_prime=lambda s: -k_o * to * (1.0 - np.asarray(s, dtype=float)) ** (to - 1.0),
        pc_second=pc_second,
        name="power_law",
        params=dict(
            theta_w=theta_w, theta_o=theta_o, alpha_w=alpha_w, alpha_o=alpha_o,
            beta_3=beta_3, beta_4=beta_4, alpha_3=alpha_3, k_w=k_w, k_o=k_o, c=c, offset=offset,
        ),
    )
