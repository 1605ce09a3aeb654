"""Finite-element meshes, SPDE precision matrices and GMRF densities.

Piecewise-linear basis functions on interval or triangle meshes give sparse
mass (C) and stiffness (G) matrices. With the mass matrix lumped to a
diagonal, the Matern-type precision

    Q = tau^2 (kappa^4 C + 2 cos(pi omega) kappa^2 G + G C^{-1} G)

stays sparse (two-hop mesh neighborhood); omega absent means cos factor 1,
i.e. the standard non-oscillating operator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .exceptions import DegenerateMesh, DimensionMismatch
from .sparse import SparseSymmetric, cholesky, quad_form


@dataclass(frozen=True)
class Mesh1D:
    """Interval mesh given by strictly increasing knots."""

    knots: np.ndarray

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", knots)
        if knots.ndim != 1 or knots.size < 2:
            raise DegenerateMesh("need at least two 1D knots")
        if not np.all(np.diff(knots) > 0):
            raise DegenerateMesh("knots must be strictly increasing")

    @property
    def dim(self):
        return self.knots.size


class TriMesh:
    """Triangulated 2D mesh; triangle orientation is normalized on input."""

    def __init__(self, nodes, triangles):
        nodes = np.asarray(nodes, dtype=float).reshape(-1, 2)
        triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if triangles.min(initial=0) < 0 or triangles.max(initial=-1) >= len(nodes):
            raise DegenerateMesh("triangle references a node that does not exist")
        p0 = nodes[triangles[:, 0]]
        p1 = nodes[triangles[:, 1]]
        p2 = nodes[triangles[:, 2]]
        signed = 0.5 * (
            (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
            - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
        )
        scale = max(np.abs(nodes).max(), 1.0)
        if np.any(np.abs(signed) <= 1e-14 * scale**2):
            raise DegenerateMesh("zero-area triangle")
        flip = signed < 0
        triangles = triangles.copy()
        triangles[flip, 1], triangles[flip, 2] = (
            triangles[flip, 2],
            triangles[flip, 1],
        )
        self.nodes = nodes
        self.triangles = triangles
        self.areas = np.abs(signed)
        self._trifinder = None

    @property
    def dim(self):
        return len(self.nodes)

    def trifinder(self):
        if self._trifinder is None:
            from matplotlib.tri import Triangulation

            tri = Triangulation(
                self.nodes[:, 0], self.nodes[:, 1], self.triangles
            )
            self._trifinder = tri.get_trifinder()
        return self._trifinder


def regular_grid_mesh(x, y):
    """Regular-grid triangulation: two triangles per cell.

    ``x`` and ``y`` are strictly increasing axis coordinates.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    nx, ny = x.size, y.size
    if nx < 2 or ny < 2:
        raise DegenerateMesh("grid needs at least 2 coordinates per axis")
    xx, yy = np.meshgrid(x, y, indexing="ij")
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    def node(i, j):
        return i * ny + j

    tris = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a, b = node(i, j), node(i + 1, j)
            c, d = node(i + 1, j + 1), node(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    return TriMesh(nodes, np.array(tris))


def write_mesh(mesh, path):
    """Text mesh format: header, coordinates, then triangles for 2D meshes."""
    with open(path, "w") as fh:
        if isinstance(mesh, Mesh1D):
            fh.write(f"nodes {mesh.dim} dim 1\n")
            for v in mesh.knots:
                fh.write(f"{float(v)!r}\n")
        else:
            fh.write(f"nodes {mesh.dim} dim 2\n")
            for vx, vy in mesh.nodes:
                fh.write(f"{float(vx)!r} {float(vy)!r}\n")
            fh.write(f"triangles {len(mesh.triangles)}\n")
            for a, b, c in mesh.triangles:
                fh.write(f"{a} {b} {c}\n")


def read_mesh(path):
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 4 or head[0] != "nodes" or head[2] != "dim":
            raise ValueError("mesh file must start with 'nodes <l> dim <d>'")
        n, d = int(head[1]), int(head[3])
        if d == 1:
            knots = np.array([float(fh.readline()) for _ in range(n)])
            return Mesh1D(knots)
        if d != 2:
            raise ValueError(f"unsupported mesh dimension {d}")
        nodes = np.array(
            [[float(v) for v in fh.readline().split()] for _ in range(n)]
        )
        tri_head = fh.readline().split()
        if len(tri_head) != 2 or tri_head[0] != "triangles":
            raise ValueError("expected 'triangles <m>' after 2D nodes")
        m = int(tri_head[1])
        tris = np.array(
            [[int(v) for v in fh.readline().split()] for _ in range(m)]
        )
        return TriMesh(nodes, tris)


@dataclass
class FemMatrices:
    """Assembled mass (full and lumped) and stiffness matrices."""

    c: SparseSymmetric
    c_lumped: np.ndarray
    g: SparseSymmetric
    dim: int
    _builder: "PrecisionBuilder | None" = field(default=None, repr=False)


def _triplets_to_sym(dim, rows, cols, vals):
    m = sp.coo_matrix((vals, (rows, cols)), shape=(dim, dim)).tocsr()
    m.sum_duplicates()
    return SparseSymmetric.from_scipy(m)


def assemble_1d(mesh):
    """Mass and stiffness matrices for tent functions on an interval mesh."""
    knots = mesh.knots
    n = mesh.dim
    h = np.diff(knots)
    e = np.arange(n - 1)
    rows = np.concatenate([e, e + 1, e + 1, e])
    cols = np.concatenate([e, e + 1, e, e + 1])
    c_vals = np.concatenate([h / 3, h / 3, h / 6, h / 6])
    g_vals = np.concatenate([1 / h, 1 / h, -1 / h, -1 / h])
    c = _triplets_to_sym(n, rows, cols, c_vals)
    g = _triplets_to_sym(n, rows, cols, g_vals)
    c_lumped = np.asarray(c.to_scipy().sum(axis=1)).ravel()
    return FemMatrices(c=c, c_lumped=c_lumped, g=g, dim=n)


def assemble_2d(mesh):
    """Linear-triangle element matrices accumulated over a TriMesh."""
    tris = mesh.triangles
    pts = mesh.nodes
    areas = mesh.areas
    # edge vectors opposite each vertex, (ntri, 3, 2)
    p = pts[tris]
    edges = np.stack(
        [p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1
    )
    rows, cols, c_vals, g_vals = [], [], [], []
    for i in range(3):
        for j in range(3):
            rows.append(tris[:, i])
            cols.append(tris[:, j])
            c_vals.append(areas / 12.0 * (2.0 if i == j else 1.0) * np.ones_like(areas))
            g_vals.append(np.einsum("td,td->t", edges[:, i], edges[:, j]) / (4.0 * areas))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    c = _triplets_to_sym(mesh.dim, rows, cols, np.concatenate(c_vals))
    g = _triplets_to_sym(mesh.dim, rows, cols, np.concatenate(g_vals))
    c_lumped = np.asarray(c.to_scipy().sum(axis=1)).ravel()
    return FemMatrices(c=c, c_lumped=c_lumped, g=g, dim=mesh.dim)


@dataclass(frozen=True)
class PrecisionSpec:
    """Precision-operator parameters: overall precision tau, inverse range
    kappa, and optional oscillation omega in (0, 1)."""

    tau: float
    kappa: float
    omega: float | None = None

    def __post_init__(self):
        if not (self.tau > 0 and self.kappa > 0):
            raise ValueError("tau and kappa must be positive")
        if self.omega is not None and not (0.0 < self.omega < 1.0):
            raise ValueError("omega must lie in (0, 1)")


class PrecisionBuilder:
    """Precomputed sparsity pattern and per-term values of the precision.

    Building Q for new (tau, kappa, omega) is then a vectorized combination
    of cached arrays, which the nested optimizer exercises heavily.
    """

    def __init__(self, fem):
        gs = fem.g.to_scipy()
        two_hop = (gs @ sp.diags(1.0 / fem.c_lumped) @ gs).tocsr()
        parts = []
        for m in (sp.diags(fem.c_lumped), gs, two_hop):
            coo = sp.tril(sp.csr_matrix(m)).tocoo()
            parts.append(coo)
        dim = fem.dim
        keys = np.unique(np.concatenate([p.row * dim + p.col for p in parts]))
        self._rows = keys // dim
        self._cols = keys % dim
        self._dim = dim
        aligned = []
        for p in parts:
            v = np.zeros(keys.size)
            np.add.at(v, np.searchsorted(keys, p.row * dim + p.col), p.data)
            aligned.append(v)
        self._c_vals, self._g_vals, self._tw_vals = aligned
        self._pattern = SparseSymmetric(dim, self._rows, self._cols, np.zeros(keys.size))

    def build(self, spec):
        cos_term = 1.0 if spec.omega is None else np.cos(np.pi * spec.omega)
        vals = spec.tau**2 * (
            spec.kappa**4 * self._c_vals
            + 2.0 * cos_term * spec.kappa**2 * self._g_vals
            + self._tw_vals
        )
        return self._pattern.with_values(vals)


def build_precision(fem, spec):
    """SPDE precision matrix on an assembled mesh (lumped mass throughout)."""
    if fem._builder is None:
        fem._builder = PrecisionBuilder(fem)
    return fem._builder.build(spec)


def cached_cholesky(q):
    """Cholesky factor cached on the matrix object (patterns are immutable)."""
    factor = getattr(q, "_chol_cache", None)
    if factor is None:
        factor = cholesky(q)
        q._chol_cache = factor
    return factor


def gmrf_logdensity(x, mu, q):
    """Log-density of a zero-fill-in GMRF with precision q at x, mean mu."""
    x = np.asarray(x, dtype=float)
    mu = np.broadcast_to(np.asarray(mu, dtype=float), x.shape)
    if x.shape != (q.dim,):
        raise DimensionMismatch(f"x has shape {x.shape}, precision dim is {q.dim}")
    factor = cached_cholesky(q)
    dev = x - mu
    return (
        -0.5 * q.dim * np.log(2.0 * np.pi)
        + 0.5 * factor.log_determinant
        - 0.5 * quad_form(q, dev)
    )


@dataclass
class Projection:
    """Barycentric / linear-interpolation weights of locations onto a mesh.

    Rows of ``matrix`` are convex weights for in-domain locations and all
    zero for out-of-domain ones (the field contributes 0 there), flagged in
    ``in_domain``.
    """

    matrix: sp.csr_matrix
    in_domain: np.ndarray

    @property
    def n_locations(self):
        return self.matrix.shape[0]


def project(mesh, locations):
    """Project locations onto basis-function weights of a mesh."""
    if isinstance(mesh, Mesh1D):
        return _project_1d(mesh, locations)
    return _project_2d(mesh, locations)


def _project_1d(mesh, locations):
    x = np.asarray(locations, dtype=float).ravel()
    knots = mesh.knots
    n = knots.size
    inside = (x >= knots[0]) & (x <= knots[-1])
    idx = np.clip(np.searchsorted(knots, x, side="right") - 1, 0, n - 2)
    left = knots[idx]
    h = knots[idx + 1] - left
    w_right = np.clip((x - left) / h, 0.0, 1.0)
    rows = np.repeat(np.arange(x.size), 2)
    cols = np.column_stack([idx, idx + 1]).ravel()
    vals = np.column_stack([1.0 - w_right, w_right]).ravel()
    keep = np.repeat(inside, 2) & (vals != 0.0)
    mat = sp.csr_matrix(
        (vals[keep], (rows[keep], cols[keep])), shape=(x.size, n)
    )
    return Projection(matrix=mat, in_domain=inside)


def _project_2d(mesh, locations):
    pts = np.asarray(locations, dtype=float).reshape(-1, 2)
    tri_idx = np.asarray(mesh.trifinder()(pts[:, 0], pts[:, 1]))
    inside = tri_idx >= 0
    rows, cols, vals = [], [], []
    safe = np.where(inside, tri_idx, 0)
    tri_nodes = mesh.triangles[safe]
    p0 = mesh.nodes[tri_nodes[:, 0]]
    p1 = mesh.nodes[tri_nodes[:, 1]]
    p2 = mesh.nodes[tri_nodes[:, 2]]
    det = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p2[:, 0] - p0[:, 0]) * (
        p1[:, 1] - p0[:, 1]
    )
    l1 = (
        (pts[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
        - (p2[:, 0] - p0[:, 0]) * (pts[:, 1] - p0[:, 1])
    ) / det
    l2 = (
        (p1[:, 0] - p0[:, 0]) * (pts[:, 1] - p0[:, 1])
        - (pts[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
    ) / det
    bary = np.column_stack([1.0 - l1 - l2, l1, l2])
    bary = np.clip(bary, 0.0, 1.0)
    bary /= bary.sum(axis=1, keepdims=True)
    for corner in range(3):
        rows.append(np.arange(pts.shape[0]))
        cols.append(tri_nodes[:, corner])
        vals.append(np.where(inside, bary[:, corner], 0.0))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    keep = vals != 0.0
    mat = sp.csr_matrix(
        (vals[keep], (rows[keep], cols[keep])), shape=(pts.shape[0], mesh.dim)
    )
    return Projection(matrix=mat, in_domain=inside)


def oscillating_covariance(v, w, kappa, omega):
    """Closed-form covariance of the 1D oscillating SPDE field.

    Combines exponential decay with a sinusoidal factor; used as an
    independent verification oracle for the precision construction.
    """
    d = np.abs(np.asarray(v, dtype=float) - np.asarray(w, dtype=float))
    half = np.pi * omega / 2.0
    return (
        1.0
        / (2.0 * np.sin(np.pi * omega) * kappa**3)
        * np.exp(-kappa * np.cos(half) * d)
        * np.sin(half + kappa * np.sin(half) * d)
    )
