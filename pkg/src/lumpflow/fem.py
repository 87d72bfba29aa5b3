"""P1 nodal fields, lumped inner products and the projection operators.

Functions accept either plain arrays or :class:`NodalField` /
:class:`ElementField` instances; wrapped fields are checked against the
geometry they are used with.
"""

import weakref
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgument
from .quadrature import gauss_interval, simplex_rule


@dataclass(frozen=True, eq=False)
class NodalField:
    """A P1 function given by its values at the mesh nodes."""

    values: np.ndarray
    geom: object

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.geom.n_nodes,):
            raise InvalidArgument(f"expected {self.geom.n_nodes} nodal values, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    def _other(self, other):
        if isinstance(other, NodalField):
            if other.geom is not self.geom:
                raise InvalidArgument("fields live on different meshes")
            return other.values
        return other

    def __add__(self, other):
        return NodalField(self.values + self._other(other), self.geom)

    def __sub__(self, other):
        return NodalField(self.values - self._other(other), self.geom)

    def __mul__(self, other):
        return NodalField(self.values * self._other(other), self.geom)

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return NodalField(-self.values, self.geom)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True, eq=False)
class ElementField:
    """A piecewise-constant function, one value per element."""

    values: np.ndarray
    geom: object

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.geom.mesh.n_elements,):
            raise InvalidArgument(
                f"expected {self.geom.mesh.n_elements} element values, got shape {v.shape}"
            )
        object.__setattr__(self, "values", v)


def nodal_values(geom, U):
    if isinstance(U, NodalField):
        if U.geom is not geom:
            raise InvalidArgument("field belongs to a different mesh")
        return U.values
    U = np.asarray(U, dtype=float)
    if U.ndim == 0:
        return np.full(geom.n_nodes, float(U))
    if U.shape != (geom.n_nodes,):
        raise InvalidArgument(f"expected {geom.n_nodes} nodal values, got shape {U.shape}")
    return U


def element_values(geom, w):
    if isinstance(w, ElementField):
        if w.geom is not geom:
            raise InvalidArgument("field belongs to a different mesh")
        return w.values
    w = np.asarray(w, dtype=float)
    if w.ndim == 0:
        return np.full(geom.mesh.n_elements, float(w))
    if w.shape != (geom.mesh.n_elements,):
        raise InvalidArgument(f"expected {geom.mesh.n_elements} element values, got shape {w.shape}")
    return w


def inner_h(geom, U, V, weight=None):
    """Lumped (trapezoidal) inner product, optionally with porosity weights ``m~_i``."""
    u = nodal_values(geom, U)
    v = nodal_values(geom, V)
    m = geom.masses if weight is None else geom.weighted_masses(element_values(geom, weight))
    return float(np.dot(m * u, v))


def norm_h(geom, U, weight=None):
    return float(np.sqrt(inner_h(geom, U, U, weight)))


def consistent_mass_matrix(geom):
    """Exact P1 mass matrix (used for L2 errors and as a test oracle)."""
    d = geom.dim
    el = geom.mesh.elements
    local = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    data = geom.volumes[:, None, None] * local[None]
    rows = np.repeat(el, d + 1, axis=1).ravel()
    cols = np.tile(el, (1, d + 1)).ravel()
    M = geom.n_nodes
    return sp.csr_matrix((data.ravel(), (rows, cols)), shape=(M, M))


def l2_norm(geom, U):
    """Exact L2 norm of the P1 function with nodal values ``U``."""
    u = nodal_values(geom, U)
    return float(np.sqrt(max(u @ (consistent_mass_matrix(geom) @ u), 0.0)))


_POINT_CACHE = weakref.WeakKeyDictionary()


def quadrature_points(geom, degree=2):
    """Physical quadrature points ``(E, q, d)`` and absolute weights ``(E, q)`` (cached per geometry)."""
    per_geom = _POINT_CACHE.setdefault(geom, {})
    if degree not in per_geom:
        bary, w = simplex_rule(geom.dim, degree)
        X = geom.mesh.nodes[geom.mesh.elements]
        pts = np.matmul(bary[None], X)
        wts = geom.volumes[:, None] * w[None, :]
        pts.setflags(write=False)
        wts.setflags(write=False)
        per_geom[degree] = (pts, wts)
    return per_geom[degree]


def _evaluate(f, pts):
    vals = f(*np.moveaxis(pts, -1, 0))
    return np.broadcast_to(np.asarray(vals, dtype=float), pts.shape[:-1])


def integrate(geom, f, degree=8):
    """``int_Omega f`` with a per-element rule exact for polynomials of ``degree``."""
    pts, wts = quadrature_points(geom, degree)
    return float(np.sum(_evaluate(f, pts) * wts))


def interpolate_nodal(geom, f):
    """Lagrange interpolant: ``f`` evaluated at the nodes. ``f`` takes coordinates as separate arrays."""
    vals = _evaluate(f, geom.mesh.nodes)
    return NodalField(np.array(vals), geom)


def project_elementwise(geom, f, degree=2):
    """Element averages ``(1/|K|) int_K f``."""
    pts, wts = quadrature_points(geom, degree)
    avg = np.sum(_evaluate(f, pts) * wts, axis=1) / geom.volumes
    return ElementField(avg, geom)


def project_patch_average(geom, f, degree=2):
    """Patch averages ``(1/|patch_i|) int_{patch_i} f`` at every node."""
    pts, wts = quadrature_points(geom, degree)
    elem_int = np.sum(_evaluate(f, pts) * wts, axis=1)
    d = geom.dim
    node_int = np.bincount(
        geom.mesh.elements.ravel(), weights=np.repeat(elem_int, d + 1), minlength=geom.n_nodes
    )
    return NodalField(node_int / geom.patch_measures, geom)


def project_time(f, tau, n, npoints=3):
    """Average of ``f`` over the step ``]t_{n-1}, t_n]`` with ``t_k = k tau``."""
    t, w = gauss_interval((n - 1) * tau, n * tau, npoints)
    return float(np.dot(w, [f(tk) for tk in t]) / tau)


def stiffness_pairing(geom, U, V, weight=None):
    """``int_Omega w grad(U).grad(V)`` from the constant element gradients."""
    u = nodal_values(geom, U)
    v = nodal_values(geom, V)
    el = geom.mesh.elements
    gu = np.einsum("ea,eak->ek", u[el], geom.grads)
    gv = np.einsum("ea,eak->ek", v[el], geom.grads)
    w = 1.0 if weight is None else element_values(geom, weight)
    return float(np.sum(w * geom.volumes * np.einsum("ek,ek->e", gu, gv)))


def stiffness_matrix(geom, weight=None):
    """Signed stiffness matrix ``d_ij = int w grad(phi_i).grad(phi_j)``."""
    d = geom.dim
    el = geom.mesh.elements
    w = np.ones(geom.mesh.n_elements) if weight is None else element_values(geom, weight)
    data = w[:, None, None] * geom.local_stiffness
    rows = np.repeat(el, d + 1, axis=1).ravel()
    cols = np.tile(el, (1, d + 1)).ravel()
    M = geom.n_nodes
    return sp.csr_matrix((data.ravel(), (rows, cols)), shape=(M, M))


def edge_weights_from_elements(geom, weight):
    """``sum_{K in patch_i cap patch_j} c_ij,K w_K`` per edge."""
    w = element_values(geom, weight)
    return np.bincount(
        geom.element_edges.ravel(),
        weights=(geom.c_K * w[:, None]).ravel(),
        minlength=geom.n_edges,
    )


def grad_norm(geom, U):
    """``||grad U||_{L2}`` from edge differences, ``sqrt(sum_edges c_ij (U_j - U_i)^2)``."""
    u = nodal_values(geom, U)
    du = u[geom.edges[:, 1]] - u[geom.edges[:, 0]]
    return float(np.sqrt(np.sum(geom.c * du * du)))
