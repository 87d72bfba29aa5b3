"""Problem builders shared by the stepper and acceptance tests."""

import numpy as np

from lumpflow.fem import integrate
from lumpflow.stepper import NO_FLUX, WELLS, SourceModel, TimeState


def bump(cx, cy, width):
    return lambda t, x, y: np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * width**2))


def random_wells(geom, rng, rate=None, porosity=0.2, floor=0.05, s_in=None):
    """Injection and production bumps at random spots, scaled to the same total rate.

    The small ``floor`` keeps the well rates nonnegative after the discrete
    balance correction on coarse meshes.
    """
    rate = rate if rate is not None else rng.uniform(0.5, 5.0)
    b1 = bump(*rng.uniform(0.1, 0.9, 2), rng.uniform(0.1, 0.3))
    b2 = bump(*rng.uniform(0.1, 0.9, 2), rng.uniform(0.1, 0.3))
    qb = lambda t, x, y: floor + b1(t, x, y)  # noqa: E731
    ql = lambda t, x, y: floor + b2(t, x, y)  # noqa: E731
    ib = integrate(geom, lambda x, y: qb(0.0, x, y))
    il = integrate(geom, lambda x, y: ql(0.0, x, y))
    s_in = rng.uniform(0.0, 1.0) if s_in is None else s_in
    return SourceModel(
        mode=WELLS,
        q_bar=lambda t, x, y: rate / ib * qb(t, x, y),
        q_low=lambda t, x, y: rate / il * ql(t, x, y),
        s_in=lambda t, x, y: s_in + 0 * x,
        bc=NO_FLUX,
        porosity=porosity,
    )


def corner_wells(rate=36.0, s_in=1.0, porosity=0.2):
    return SourceModel(
        mode=WELLS,
        q_bar=lambda t, x, y: rate * x**2 * y**2,
        q_low=lambda t, x, y: rate * (1 - x) ** 2 * (1 - y) ** 2,
        s_in=lambda t, x, y: s_in + 0 * x,
        bc=NO_FLUX,
        porosity=porosity,
    )


def resting_state(geom, model, S):
    """Zero-mean wetting pressure with the given saturation."""
    S = np.broadcast_to(np.asarray(S, dtype=float), (geom.n_nodes,)).copy()
    P = np.zeros(geom.n_nodes)
    return TimeState.from_arrays(geom, 0, 0.0, S, P, P + model.pc(S))


def fd_jacobian(F, x, h=1e-7):
    """Dense central-difference Jacobian."""
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h * max(1.0, abs(x[k]))
        cols.append((F(x + e) - F(x - e)) / (2 * e[k]))
    return np.column_stack(cols)


# acceptance verdicts, printed in the terminal summary by conftest
VERDICTS = {}


def verdict(criterion, ok, detail):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    VERDICTS[criterion] = line
    print(line)
    return ok
