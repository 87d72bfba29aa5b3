"""Phase-potential upwinding and the upwinded edge form.

Edge quantities are stored once per mesh edge ``(i, j)`` with ``i < j``; the
value for the reversed pair follows from the symmetry kind.
"""

import numpy as np

from .errors import InvalidArgument
from .fem import NodalField, nodal_values

WETTING = "wetting"
NONWETTING = "nonwetting"


class EdgeValues:
    """Per-edge values with ``value(j, i) = value(i, j)`` (symmetric) or ``-value(i, j)`` (antisymmetric)."""

    def __init__(self, geom, values, kind="symmetric"):
        if kind not in ("symmetric", "antisymmetric"):
            raise InvalidArgument(f"unknown edge value kind {kind!r}")
        values = np.asarray(values, dtype=float)
        if values.shape != (geom.n_edges,):
            raise InvalidArgument(f"expected {geom.n_edges} edge values, got shape {values.shape}")
        self.geom = geom
        self.values = values
        self.kind = kind

    @classmethod
    def from_directed(cls, geom, forward, backward, kind="symmetric", rtol=0.0):
        """Build from values on ``(i, j)`` and ``(j, i)``, checking the symmetry kind."""
        forward = np.asarray(forward, dtype=float)
        backward = np.asarray(backward, dtype=float)
        expected = forward if kind == "symmetric" else -forward
        if np.any(np.abs(backward - expected) > rtol * np.abs(forward)):
            raise InvalidArgument(f"edge values are not {kind}")
        return cls(geom, forward, kind)

    @classmethod
    def from_matrix(cls, geom, W, kind="symmetric"):
        """Read edge values out of a dense or sparse ``(M, M)`` matrix."""
        i, j = geom.edges[:, 0], geom.edges[:, 1]
        if hasattr(W, "tocsr"):
            W = W.tocsr()
            fwd = np.asarray(W[i, j]).ravel()
            bwd = np.asarray(W[j, i]).ravel()
        else:
            W = np.asarray(W, dtype=float)
            fwd, bwd = W[i, j], W[j, i]
        return cls.from_directed(geom, fwd, bwd, kind)

    def __call__(self, i, j):
        k = self.geom.edge_index(i, j)
        v = self.values[k]
        if self.kind == "antisymmetric" and i > j:
            return -v
        return v

    def directed(self):
        """Values on ``(i, j)`` and ``(j, i)`` for every stored edge."""
        back = self.values if self.kind == "symmetric" else -self.values
        return self.values, back


def upwind_selection(geom, S, P, phase):
    """Index of the node whose saturation is used on each edge."""
    s = nodal_values(geom, S)
    p = nodal_values(geom, P)
    i, j = geom.edges[:, 0], geom.edges[:, 1]
    pi, pj = p[i], p[j]
    if phase == WETTING:
        tie = np.where(s[i] >= s[j], i, j)
    elif phase == NONWETTING:
        tie = np.where(s[i] <= s[j], i, j)
    else:
        raise InvalidArgument(f"phase must be {WETTING!r} or {NONWETTING!r}, got {phase!r}")
    # exact comparison: no tolerance band around ties
    return np.where(pi > pj, i, np.where(pi < pj, j, tie))


def upwind_saturations(geom, S, P, phase):
    """Upwind saturation on every edge from phase pressure ``P``.

    The node with the larger pressure wins; on an exact tie the larger
    (wetting) or smaller (nonwetting) saturation is taken.
    """
    s = nodal_values(geom, S)
    return EdgeValues(geom, s[upwind_selection(geom, S, P, phase)])


def _check_symmetric(W):
    if not isinstance(W, EdgeValues):
        raise InvalidArgument("edge weights must be EdgeValues")
    if W.kind != "symmetric":
        raise InvalidArgument("the upwind form needs symmetric edge weights")


def edge_residual(geom, w, v):
    """Node sums ``sum_j c_ij w_ij (v_j - v_i)`` for per-edge weights ``w``."""
    i, j = geom.edges[:, 0], geom.edges[:, 1]
    flux = geom.c * w * (v[j] - v[i])
    M = geom.n_nodes
    return np.bincount(i, weights=flux, minlength=M) - np.bincount(j, weights=flux, minlength=M)


def apply_upwind_form(geom, W, V):
    """Per-node sums ``sum_j c_ij W_ij (V_j - V_i)``."""
    _check_symmetric(W)
    return NodalField(edge_residual(geom, W.values, nodal_values(geom, V)), geom)


def form_value(geom, W, V, U):
    """``sum_ij U_i c_ij W_ij (V_j - V_i)`` over all ordered pairs."""
    r = apply_upwind_form(geom, W, V).values
    return float(np.dot(nodal_values(geom, U), r))


def phase_mobilities(geom, S, P_w, P_o, model):
    """Upwinded edge mobilities ``eta_w(S_w^ij)`` and ``eta_o(S_o^ij)``."""
    s = nodal_values(geom, S)
    sw = s[upwind_selection(geom, s, P_w, WETTING)]
    so = s[upwind_selection(geom, s, P_o, NONWETTING)]
    return model.eta_w(sw), model.eta_o(so)


def total_flux(geom, state, model):
    """Antisymmetric upwinded total flux ``F^ij`` of a time level."""
    pw = nodal_values(geom, state.P_w)
    po = nodal_values(geom, state.P_o)
    ew, eo = phase_mobilities(geom, state.S, pw, po, model)
    i, j = geom.edges[:, 0], geom.edges[:, 1]
    F = -ew * (pw[j] - pw[i]) - eo * (po[j] - po[i])
    return EdgeValues(geom, F, kind="antisymmetric")


def flux_divergence(geom, F):
    """``sum_j c_ij F^ij`` at every node for an antisymmetric edge field."""
    if F.kind != "antisymmetric":
        raise InvalidArgument("flux divergence expects an antisymmetric edge field")
    i, j = geom.edges[:, 0], geom.edges[:, 1]
    cf = geom.c * F.values
    M = geom.n_nodes
    return np.bincount(i, weights=cf, minlength=M) - np.bincount(j, weights=cf, minlength=M)


def energy_diagnostic(geom, state, model):
    """``sum_ij c_ij [eta_w(S_w^ij) (P_w^i - P_w^j)^2 + eta_o(S_o^ij) (P_o^i - P_o^j)^2]`` (ordered pairs)."""
    pw = nodal_values(geom, state.P_w)
    po = nodal_values(geom, state.P_o)
    ew, eo = phase_mobilities(geom, state.S, pw, po, model)
    i, j = geom.edges[:, 0], geom.edges[:, 1]
    per_edge = geom.c * (ew * (pw[i] - pw[j]) ** 2 + eo * (po[i] - po[j]) ** 2)
    return float(2.0 * per_edge.sum())
