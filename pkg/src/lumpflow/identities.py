"""Discrete identities of the coupling coefficients, checked on random acute meshes.

Each check compares two independently computed sides: element-gradient
integrals on one side, edge sums over ``c_ij`` on the other.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from .fem import edge_weights_from_elements, interpolate_nodal, stiffness_pairing
from .mesh import build_geometry, generate_structured_unit_square, generate_tensor_mesh

TOL = 1e-12


@dataclass(frozen=True)
class IdentityResult:
    name: str
    lhs: float
    rhs: float
    error: float
    tol: float = TOL

    @property
    def ok(self):
        return self.error <= self.tol

    def to_json(self, **extra):
        d = {k: (float(v) if k != "name" else v) for k, v in asdict(self).items()}
        d["ok"] = bool(self.ok)
        d.update(extra)
        return json.dumps(d, sort_keys=True)


def _rel(lhs, rhs, scale=0.0):
    """Relative gap, normalised by ``scale`` when the sides are small through cancellation."""
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), scale, np.finfo(float).tiny)


def random_acute_mesh(rng, n=None):
    """Random tensor-grid triangulation of ``[0,1]^2``: jittered grid lines, random diagonals."""
    if n is None:
        n = int(rng.integers(2, 11))
    def lines():
        inner = np.sort(rng.uniform(0.0, 1.0, n - 1))
        t = np.concatenate([[0.0], inner, [1.0]])
        if np.any(np.diff(t) < 1e-3):  # keep cells from collapsing
            t = np.linspace(0.0, 1.0, n + 1)
        return t
    return generate_tensor_mesh(lines(), lines(), rng.random((n, n)) < 0.5)


def _pair_sums(geom, U, V, w_edge):
    """``sum_i U^i sum_j w_ij (V^j - V^i)`` by looping over the patch of every node."""
    total = 0.0
    for e, (i, j) in enumerate(geom.edges):
        total += U[i] * w_edge[e] * (V[j] - V[i]) + U[j] * w_edge[e] * (V[i] - V[j])
    return total


def check_identities(geom, rng):
    """Evaluate every identity for random fields on ``geom``."""
    M = geom.n_nodes
    U = rng.normal(size=M)
    V = rng.normal(size=M)
    W = rng.uniform(0.0, 2.0, size=geom.n_edges)  # symmetric: stored once per edge
    w_el = rng.uniform(0.5, 2.0, size=geom.mesh.n_elements)
    ones = np.ones(M)
    i, j = geom.edges[:, 0], geom.edges[:, 1]
    dU, dV = U[j] - U[i], V[j] - V[i]
    c = geom.c
    out = []

    a = stiffness_pairing(geom, U, V)
    b = -_pair_sums(geom, U, V, c)
    # ordered-pair double sum counts each edge twice
    half = 0.5 * 2.0 * np.sum(c * dU * dV)
    scale = np.sum(c * np.abs(dU * dV))
    out.append(IdentityResult("grad_pairing_vs_edge_form", a, b, _rel(a, b, scale)))
    out.append(IdentityResult("edge_form_vs_symmetric_sum", b, half, _rel(b, half, scale)))

    g2 = stiffness_pairing(geom, U, U)
    sq = 0.5 * 2.0 * np.sum(c * dU**2)
    out.append(IdentityResult("grad_norm_squared", g2, sq, _rel(g2, sq)))

    # ordered-pair sum through the assembled symmetric matrix c_ij W^ij
    CW = sp.coo_matrix((np.r_[c * W, c * W], (np.r_[i, j], np.r_[j, i])), shape=(M, M)).tocsr()
    s0 = float(np.sum(CW @ V) - np.dot(np.asarray(CW.sum(axis=1)).ravel(), V))
    scale0 = 2.0 * np.sum(c * W) * np.max(np.abs(V))
    out.append(IdentityResult("antisymmetric_sum_zero", s0, 0.0, abs(s0) / scale0))

    q1 = _pair_sums(geom, ones, V, c * W)
    out.append(IdentityResult("form_with_unit_test_function", q1, 0.0, abs(q1) / scale0))

    q2 = _pair_sums(geom, V, V, c * W)
    q2_ref = -0.5 * 2.0 * np.sum(c * W * dV**2)
    out.append(IdentityResult("form_on_diagonal", q2, q2_ref, _rel(q2, q2_ref)))

    ck = np.bincount(geom.element_edges.ravel(), weights=geom.c_K.ravel(), minlength=geom.n_edges)
    err = float(np.max(np.abs(ck - c)) / np.max(c))
    out.append(IdentityResult("element_split_of_coefficients", float(ck.sum()), float(c.sum()), err))

    aw = stiffness_pairing(geom, U, V, w_el)
    scale_w = np.sum(edge_weights_from_elements(geom, w_el) * np.abs(dU * dV))
    bw = -_pair_sums(geom, U, V, edge_weights_from_elements(geom, w_el))
    out.append(IdentityResult("weighted_grad_pairing", aw, bw, _rel(aw, bw, scale_w)))
    return out


def run_suite(seed=0, count=20):
    """Identity checks on ``count`` random meshes; returns ``[(mesh_index, n_nodes, result), ...]``."""
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(count):
        geom = build_geometry(random_acute_mesh(rng))
        for res in check_identities(geom, rng):
            rows.append((k, geom.n_nodes, res))
    return rows


# -- consistency of the edge form -------------------------------------------

# int_{[0,1]^2} (1 + x y) |grad sin(pi x) sin(pi y)|^2 = 5 pi^2 / 8
CONSISTENCY_EXACT = 5.0 * math.pi**2 / 8.0


def consistency_gap(n):
    """``|int w grad u . grad v + sum_ij U^i c_ij W^ij (V^j - V^i)|`` with midpoint ``W``.

    ``u = v = sin(pi x) sin(pi y)`` and ``w = 1 + x y`` on the structured mesh.
    """
    geom = build_geometry(generate_structured_unit_square(n))
    U = interpolate_nodal(geom, lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y)).values
    mid = 0.5 * (geom.mesh.nodes[geom.edges[:, 0]] + geom.mesh.nodes[geom.edges[:, 1]])
    W = 1.0 + mid[:, 0] * mid[:, 1]
    i, j = geom.edges[:, 0], geom.edges[:, 1]
    form = -np.sum(geom.c * W * (U[j] - U[i]) ** 2)
    return abs(CONSISTENCY_EXACT + form)
