"""Conforming simplicial meshes and the coefficients the scheme needs from them.

Node and element indices are 0-based everywhere, including the text format::

    dim 2
    nodes <M>
    <x> <y>
    elements <E>
    <i> <j> <k>
    boundary <B>
    <i>
"""

import math
import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import AcutenessError, InvalidArgument, MeshParseError

ANGLE_TOL = 1e-12


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _simplex_measures(nodes, elements):
    dim = nodes.shape[1]
    x0 = nodes[elements[:, 0]]
    edges = nodes[elements[:, 1:]] - x0[:, None, :]
    return np.abs(np.linalg.det(edges)) / math.factorial(dim)


def _faces(elements):
    """Sorted face tuples of every element, shape ``(E, d+1, d)``; face ``a`` is opposite vertex ``a``."""
    nv = elements.shape[1]
    idx = np.array([[b for b in range(nv) if b != a] for a in range(nv)])
    return np.sort(elements[:, idx], axis=2)


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    """Conforming triangulation (``dim=2``) or tetrahedralization (``dim=3``).

    ``spacing`` is the lattice spacing for generated structured meshes and
    ``None`` otherwise.
    """

    nodes: np.ndarray
    elements: np.ndarray
    boundary_nodes: np.ndarray
    spacing: float | None = None
    dim: int = field(init=False)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        elements = np.asarray(self.elements, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] not in (2, 3):
            raise InvalidArgument("nodes must be an (M, 2) or (M, 3) array")
        dim = nodes.shape[1]
        if elements.ndim != 2 or elements.shape[1] != dim + 1:
            raise InvalidArgument(f"elements must be an (E, {dim + 1}) array")
        bnd = np.unique(np.asarray(self.boundary_nodes, dtype=np.int64))
        object.__setattr__(self, "nodes", _readonly(nodes))
        object.__setattr__(self, "elements", _readonly(elements))
        object.__setattr__(self, "boundary_nodes", _readonly(bnd))
        object.__setattr__(self, "dim", dim)

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    @property
    def boundary_mask(self):
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = True
        return mask

    def measures(self):
        return _simplex_measures(self.nodes, self.elements)

    def topological_boundary(self):
        """Nodes on faces that belong to exactly one element."""
        faces = _faces(self.elements).reshape(-1, self.dim)
        uniq, counts = np.unique(faces, axis=0, return_counts=True)
        return np.unique(uniq[counts == 1])


def validate_mesh(mesh):
    """Raise :class:`MeshParseError` unless ``mesh`` is a valid conforming mesh."""
    M = mesh.n_nodes
    el = mesh.elements
    if el.size and (el.min() < 0 or el.max() >= M):
        bad = int(np.nonzero((el < 0) | (el >= M))[0][0])
        raise MeshParseError(f"element {bad}: index out of range")
    if np.any(np.sort(el, axis=1)[:, 1:] == np.sort(el, axis=1)[:, :-1]):
        raise MeshParseError("element with repeated node index")
    vol = mesh.measures()
    scale = np.ptp(mesh.nodes, axis=0).max() if M else 1.0
    tiny = 1e-14 * scale**mesh.dim
    if np.any(vol <= tiny):
        bad = int(np.nonzero(vol <= tiny)[0][0])
        raise MeshParseError(f"element {bad}: zero-measure element")
    _check_conformity(mesh)
    bnd = mesh.topological_boundary()
    if not np.array_equal(bnd, mesh.boundary_nodes):
        raise MeshParseError("boundary node set does not match the mesh boundary")


def _check_conformity(mesh):
    el_sorted = np.sort(mesh.elements, axis=1)
    _, first, counts = np.unique(el_sorted, axis=0, return_index=True, return_counts=True)
    if np.any(counts > 1):
        dup = int(np.sort(first[counts > 1])[0])
        raise MeshParseError(f"element {dup}: non-conforming (duplicate element)")
    faces = _faces(mesh.elements).reshape(-1, mesh.dim)
    uniq, counts = np.unique(faces, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise MeshParseError("non-conforming: a face is shared by more than two elements")
    # hanging nodes: a mesh node strictly inside a face seen by only one element
    open_faces = uniq[counts == 1]
    if mesh.dim == 2 and len(open_faces):
        tree = cKDTree(mesh.nodes)
        a = mesh.nodes[open_faces[:, 0]]
        b = mesh.nodes[open_faces[:, 1]]
        mid = 0.5 * (a + b)
        half = 0.5 * np.linalg.norm(b - a, axis=1)
        for f, cand in enumerate(tree.query_ball_point(mid, half * (1 - 1e-9))):
            for k in cand:
                if k in open_faces[f]:
                    continue
                d = b[f] - a[f]
                r = mesh.nodes[k] - a[f]
                if abs(d[0] * r[1] - d[1] * r[0]) <= 1e-12 * np.dot(d, d):
                    raise MeshParseError(f"non-conforming: hanging node {k}")


def generate_structured_unit_square(n):
    """Uniform triangulation of ``[0, 1]^2`` with ``n`` cells per side.

    Every cell is cut by the diagonal from its lower-left to its upper-right
    corner, so all triangles are right isosceles and the angle condition holds
    with equality.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidArgument(f"n must be a positive integer, got {n!r}")
    t = np.linspace(0.0, 1.0, int(n) + 1)
    return generate_tensor_mesh(t, t, spacing=1.0 / int(n))


def generate_tensor_mesh(xs, ys, flip=None, spacing=None):
    """Triangulate the rectangle grid ``xs x ys`` (both strictly increasing).

    Each cell is split along one diagonal: lower-left to upper-right, or the
    other one where ``flip[row, col]`` is true.  All triangles are right
    triangles, so the mesh always satisfies the angle condition.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.ndim != 1 or ys.ndim != 1 or len(xs) < 2 or len(ys) < 2:
        raise InvalidArgument("need at least two grid lines in each direction")
    if np.any(np.diff(xs) <= 0) or np.any(np.diff(ys) <= 0):
        raise InvalidArgument("grid lines must be strictly increasing")
    nx, ny = len(xs) - 1, len(ys) - 1
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    j, i = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    p00 = (j * (nx + 1) + i).ravel()
    p10 = p00 + 1
    p01 = p00 + nx + 1
    p11 = p01 + 1
    lower = np.column_stack([p00, p10, p11])
    upper = np.column_stack([p00, p11, p01])
    if flip is not None:
        f = np.asarray(flip, dtype=bool).reshape(ny, nx).ravel()
        lower[f] = np.column_stack([p00, p10, p01])[f]
        upper[f] = np.column_stack([p10, p11, p01])[f]
    elements = np.empty((2 * nx * ny, 3), dtype=np.int64)
    elements[0::2] = lower
    elements[1::2] = upper
    col = np.arange(len(nodes)) % (nx + 1)
    row = np.arange(len(nodes)) // (nx + 1)
    on_bnd = (col == 0) | (col == nx) | (row == 0) | (row == ny)
    return SimplicialMesh(nodes, elements, np.nonzero(on_bnd)[0], spacing=spacing)


def load_mesh(text):
    """Parse mesh text; every failure is a :class:`MeshParseError` with a line number."""
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0].strip()
        if content:
            lines.append((lineno, content.split()))
    pos = 0

    def header(keyword):
        nonlocal pos
        if pos >= len(lines):
            raise MeshParseError(f"expected '{keyword} <count>' but reached end of file")
        lineno, tok = lines[pos]
        if len(tok) != 2 or tok[0] != keyword:
            raise MeshParseError(f"malformed header, expected '{keyword} <count>'", lineno)
        try:
            value = int(tok[1])
        except ValueError:
            raise MeshParseError(f"malformed header, '{tok[1]}' is not an integer", lineno) from None
        if value < 0:
            raise MeshParseError("malformed header, negative count", lineno)
        pos += 1
        return value

    def rows(count, width, conv, what):
        nonlocal pos
        out, where = [], []
        for _ in range(count):
            if pos >= len(lines):
                raise MeshParseError(f"file ends before all {count} {what} were read")
            lineno, tok = lines[pos]
            if len(tok) != width:
                raise MeshParseError(f"expected {width} values per {what[:-1]} line, got {len(tok)}", lineno)
            try:
                out.append([conv(t) for t in tok])
            except ValueError:
                raise MeshParseError(f"cannot parse {what[:-1]} line {' '.join(tok)!r}", lineno) from None
            where.append(lineno)
            pos += 1
        return out, where

    dim = header("dim")
    if dim not in (2, 3):
        raise MeshParseError(f"unsupported dimension {dim}", lines[pos - 1][0])
    M = header("nodes")
    nodes, _ = rows(M, dim, float, "nodes")
    E = header("elements")
    elements, el_lines = rows(E, dim + 1, int, "elements")
    if pos < len(lines):
        B = header("boundary")
        bnd, bnd_lines = rows(B, 1, int, "boundary entries")
        bnd = [b[0] for b in bnd]
    else:
        raise MeshParseError("missing 'boundary' section (required for loaded meshes)")
    if pos < len(lines):
        raise MeshParseError("unexpected trailing content", lines[pos][0])

    for k, (row, lineno) in enumerate(zip(elements, el_lines)):
        for idx in row:
            if not 0 <= idx < M:
                raise MeshParseError(f"element {k}: index out of range ({idx} not in [0, {M}))", lineno)
    for b, lineno in zip(bnd, bnd_lines):
        if not 0 <= b < M:
            raise MeshParseError(f"boundary node index out of range ({b})", lineno)

    nodes = np.asarray(nodes, dtype=float).reshape(M, dim)
    elements = np.asarray(elements, dtype=np.int64).reshape(E, dim + 1)
    if E:
        vol = _simplex_measures(nodes, elements)
        scale = np.ptp(nodes, axis=0).max() if M else 1.0
        bad = np.nonzero(vol <= 1e-14 * scale**dim)[0]
        if len(bad):
            raise MeshParseError(f"element {bad[0]}: zero-area element", el_lines[bad[0]])
        srt = np.sort(elements, axis=1)
        _, inverse = np.unique(srt, axis=0, return_inverse=True)
        seen = {}
        for k, key in enumerate(inverse.ravel()):
            if key in seen:
                raise MeshParseError(
                    f"non-conforming: element {k} duplicates element {seen[key]}", el_lines[k]
                )
            seen[key] = k
    mesh = SimplicialMesh(nodes, elements, bnd)
    validate_mesh(mesh)
    return mesh


def dump_mesh(mesh):
    """Inverse of :func:`load_mesh` (coordinates printed with 17 significant digits)."""
    out = [f"dim {mesh.dim}", f"nodes {mesh.n_nodes}"]
    out += [" ".join(f"{c:.17g}" for c in x) for x in mesh.nodes]
    out.append(f"elements {mesh.n_elements}")
    out += [" ".join(str(int(i)) for i in e) for e in mesh.elements]
    out.append(f"boundary {len(mesh.boundary_nodes)}")
    out += [str(int(b)) for b in mesh.boundary_nodes]
    return "\n".join(out) + "\n"


def _gradients(mesh):
    """Constant gradients of the barycentric coordinates, shape ``(E, d+1, d)``."""
    x0 = mesh.nodes[mesh.elements[:, 0]]
    edge_mat = np.transpose(mesh.nodes[mesh.elements[:, 1:]] - x0[:, None, :], (0, 2, 1))
    inv = np.linalg.inv(edge_mat)
    grads = np.empty((mesh.n_elements, mesh.dim + 1, mesh.dim))
    grads[:, 1:, :] = inv
    grads[:, 0, :] = -inv.sum(axis=1)
    return grads


@dataclass(frozen=True)
class AcutenessReport:
    ok: bool
    worst_angle: float
    offenders: list


def check_acuteness(mesh, tol=ANGLE_TOL):
    """Check that ``int_K grad(phi_i).grad(phi_j) <= 0`` for all ``i != j`` in every element.

    The sign test is applied relative to the largest local stiffness entry of
    the element. ``worst_angle`` is the largest angle between two faces of an
    element (the triangle angle in 2D, the dihedral angle in 3D).
    """
    grads = _gradients(mesh)
    gram = np.einsum("eak,ebk->eab", grads, grads)
    norms = np.sqrt(np.einsum("eaa->ea", gram))
    cosines = gram / (norms[:, :, None] * norms[:, None, :])
    nv = mesh.dim + 1
    off = ~np.eye(nv, dtype=bool)
    angles = np.arccos(np.clip(-cosines[:, off], -1.0, 1.0))
    scale = np.abs(gram).max(axis=(1, 2))
    violation = (gram[:, off] > tol * scale[:, None]).any(axis=1)
    offenders = [int(k) for k in np.nonzero(violation)[0]]
    worst = float(angles.max()) if angles.size else 0.0
    return AcutenessReport(ok=not offenders, worst_angle=worst, offenders=offenders)


def face_normal_coefficients(mesh):
    """Per-element ``|int_K grad(phi_a).grad(phi_b)|`` from face measures and unit normals.

    Returns an ``(E, d+1, d+1)`` array. This route never inverts the element
    Jacobian and serves as an independent check of :func:`build_geometry`.
    """
    d = mesh.dim
    X = mesh.nodes[mesh.elements]  # (E, d+1, d)
    E = mesh.n_elements
    face_meas = np.empty((E, d + 1))
    normals = np.empty((E, d + 1, d))
    heights = np.empty((E, d + 1))
    for a in range(d + 1):
        others = [b for b in range(d + 1) if b != a]
        P = X[:, others, :]
        if d == 2:
            t = P[:, 1] - P[:, 0]
            meas = np.linalg.norm(t, axis=1)
            nrm = np.column_stack([t[:, 1], -t[:, 0]]) / meas[:, None]
        else:
            cr = np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0])
            meas = 0.5 * np.linalg.norm(cr, axis=1)
            nrm = cr / (2.0 * meas[:, None])
        # orient away from the opposite vertex
        s = np.einsum("ek,ek->e", nrm, X[:, a] - P[:, 0])
        nrm = np.where((s > 0)[:, None], -nrm, nrm)
        face_meas[:, a] = meas
        normals[:, a] = nrm
        heights[:, a] = np.abs(s)
    vol = face_meas[:, 0] * heights[:, 0] / d
    dots = np.abs(np.einsum("eak,ebk->eab", normals, normals))
    return face_meas[:, :, None] * face_meas[:, None, :] * dots / (d * d * vol[:, None, None])


@dataclass(frozen=True, eq=False)
class MeshGeometry:
    """Everything the scheme derives from the mesh.

    Edge-indexed arrays refer to ``edges`` (pairs ``i < j``). ``pair_local``
    lists the local vertex pairs of an element and ``element_edges[K, p]`` is
    the global edge of local pair ``p`` of element ``K``.
    """

    mesh: SimplicialMesh
    volumes: np.ndarray
    grads: np.ndarray
    local_stiffness: np.ndarray
    edges: np.ndarray
    c: np.ndarray
    pair_local: np.ndarray
    element_edges: np.ndarray
    c_K: np.ndarray
    masses: np.ndarray
    edge_lengths: np.ndarray
    h: float
    acuteness: AcutenessReport

    @property
    def dim(self):
        return self.mesh.dim

    @property
    def n_nodes(self):
        return self.mesh.n_nodes

    @property
    def n_edges(self):
        return self.edges.shape[0]

    @property
    def total_measure(self):
        return float(self.volumes.sum())

    @property
    def patch_measures(self):
        return (self.dim + 1) * self.masses

    def c_matrix(self):
        """Symmetric sparse matrix of the coupling coefficients ``c_ij`` (zero diagonal)."""
        M = self.n_nodes
        i, j = self.edges[:, 0], self.edges[:, 1]
        return sp.csr_matrix(
            (np.concatenate([self.c, self.c]), (np.concatenate([i, j]), np.concatenate([j, i]))),
            shape=(M, M),
        )

    def weighted_masses(self, weight):
        """``m~_i(phi) = (1/(d+1)) sum_{K in patch(i)} phi_K |K|`` for an element field ``phi``."""
        w = np.asarray(weight, dtype=float)
        contrib = np.repeat(w * self.volumes / (self.dim + 1), self.dim + 1)
        return np.bincount(self.mesh.elements.ravel(), weights=contrib, minlength=self.n_nodes)

    def neighbors(self, i):
        """Nodes sharing an edge with node ``i``, in increasing order."""
        e = self.edges
        nb = np.concatenate([e[e[:, 0] == i, 1], e[e[:, 1] == i, 0]])
        return np.sort(nb)

    def patch(self, i):
        """Elements containing node ``i``."""
        return np.nonzero((self.mesh.elements == i).any(axis=1))[0]

    def edge_index(self, i, j):
        a, b = (i, j) if i < j else (j, i)
        k = np.searchsorted(self._edge_keys, a * self.n_nodes + b)
        if k >= self.n_edges or self._edge_keys[k] != a * self.n_nodes + b:
            raise KeyError((i, j))
        return int(k)

    @property
    def _edge_keys(self):
        return self.edges[:, 0] * self.n_nodes + self.edges[:, 1]


def build_geometry(mesh, strict=True):
    """Compute coupling coefficients, lumped masses and adjacency.

    With ``strict=True`` a mesh failing :func:`check_acuteness` is rejected;
    otherwise a warning is issued and the (then possibly inconsistent)
    coefficients are returned anyway.
    """
    report = check_acuteness(mesh)
    if not report.ok:
        if strict:
            raise AcutenessError(report)
        warnings.warn(
            f"mesh violates the angle condition in {len(report.offenders)} element(s)",
            stacklevel=2,
        )
    d = mesh.dim
    M = mesh.n_nodes
    vol = mesh.measures()
    grads = _gradients(mesh)
    local = vol[:, None, None] * np.einsum("eak,ebk->eab", grads, grads)

    pair_local = np.array(list(combinations(range(d + 1), 2)), dtype=np.int64)
    gi = mesh.elements[:, pair_local[:, 0]]
    gj = mesh.elements[:, pair_local[:, 1]]
    lo, hi = np.minimum(gi, gj), np.maximum(gi, gj)
    keys = (lo * M + hi).ravel()
    uniq, inverse = np.unique(keys, return_inverse=True)
    edges = np.column_stack([uniq // M, uniq % M])
    element_edges = inverse.reshape(gi.shape)
    c_K = np.abs(local[:, pair_local[:, 0], pair_local[:, 1]])
    c = np.bincount(element_edges.ravel(), weights=c_K.ravel(), minlength=len(uniq))

    check = face_normal_coefficients(mesh)[:, pair_local[:, 0], pair_local[:, 1]]
    scale = np.maximum(np.abs(local).max(axis=(1, 2)), np.finfo(float).tiny)
    if np.any(np.abs(check - c_K) > 1e-12 * scale[:, None]):
        raise AssertionError("gradient and face-normal coupling coefficients disagree")

    masses = np.bincount(mesh.elements.ravel(), weights=np.repeat(vol / (d + 1), d + 1), minlength=M)
    edge_lengths = np.linalg.norm(mesh.nodes[edges[:, 1]] - mesh.nodes[edges[:, 0]], axis=1)
    X = mesh.nodes[mesh.elements]
    diam = np.zeros(mesh.n_elements)
    for a, b in pair_local:
        diam = np.maximum(diam, np.linalg.norm(X[:, a] - X[:, b], axis=1))
    return MeshGeometry(
        mesh=mesh,
        volumes=_readonly(vol),
        grads=_readonly(grads),
        local_stiffness=_readonly(local),
        edges=_readonly(edges),
        c=_readonly(c),
        pair_local=_readonly(pair_local),
        element_edges=_readonly(element_edges),
        c_K=_readonly(c_K),
        masses=_readonly(masses),
        edge_lengths=_readonly(edge_lengths),
        h=float(diam.max()),
        acuteness=report,
    )
