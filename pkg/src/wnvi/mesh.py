"""Structured triangular meshes of the unit square and P1 basis evaluation.

Every mesh is a regular n x n node grid on [0,1]^2 where each square cell
is split into two triangles along its anti-diagonal (the edge from the
lower-right to the upper-left cell corner).  Node ordering is row-major,
element ordering is cell-major with the lower triangle first.  Meshes are
immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class OutOfDomainError(ValueError):
    """Point lies outside the unit square."""


@dataclass(frozen=True)
class TriMesh:
    """Triangulation of [0,1]^2 with per-element P1 geometry.

    Attributes:
        n: nodes per side.
        nodes: (n^2, 2) node coordinates, row-major (index = j*n + i).
        elements: (n_elem, 3) node indices, counterclockwise.
        elem_grad: (n_elem, 3, 2) constant shape-function gradients.
        elem_area: (n_elem,) triangle areas.
    """

    n: int
    nodes: np.ndarray
    elements: np.ndarray
    elem_grad: np.ndarray
    elem_area: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def cell_size(self) -> float:
        return 1.0 / (self.n - 1)

    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)


@dataclass(frozen=True)
class ObservationGrid:
    """Noisy displacement observations on a regular point grid.

    points include the domain boundary; tau is the known noise precision.
    """

    points: np.ndarray
    values: np.ndarray
    tau: float

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"observation precision must be positive, got {self.tau}")
        if np.any(self.points < -1e-12) or np.any(self.points > 1 + 1e-12):
            raise OutOfDomainError("observation points must lie in the unit square")


def build_grid(n_nodes_per_side: int) -> TriMesh:
    """Build the structured triangulation with n nodes per side.

    Produces 2*(n-1)^2 triangles; deterministic ordering (row-major nodes,
    cell-major elements, lower triangle before upper).
    """
    n = int(n_nodes_per_side)
    if n < 2:
        raise ValueError(f"need at least 2 nodes per side, got {n}")
    coords = np.linspace(0.0, 1.0, n)
    xx, yy = np.meshgrid(coords, coords, indexing="xy")
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    nc = n - 1
    elements = np.empty((2 * nc * nc, 3), dtype=np.intp)
    for j in range(nc):
        for i in range(nc):
            p00 = j * n + i
            p10 = p00 + 1
            p01 = p00 + n
            p11 = p01 + 1
            cell = j * nc + i
            elements[2 * cell] = (p00, p10, p01)
            elements[2 * cell + 1] = (p10, p11, p01)

    elem_grad, elem_area = _p1_geometry(nodes, elements)
    return TriMesh(n=n, nodes=nodes, elements=elements,
                   elem_grad=elem_grad, elem_area=elem_area)


def _p1_geometry(nodes, elements):
    """Constant shape-function gradients and areas for P1 triangles."""
    v = nodes[elements]                      # (n_elem, 3, 2)
    x, y = v[:, :, 0], v[:, :, 1]
    # 2*signed area from the cross product of two edges
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - \
          (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    area = 0.5 * det
    if np.any(area <= 0):
        raise ValueError("degenerate or inverted element in triangulation")
    grad = np.empty((elements.shape[0], 3, 2))
    for k in range(3):
        k1, k2 = (k + 1) % 3, (k + 2) % 3
        grad[:, k, 0] = (y[:, k1] - y[:, k2]) / det
        grad[:, k, 1] = (x[:, k2] - x[:, k1]) / det
    return grad, area


def _barycentric(tri: np.ndarray, s) -> np.ndarray:
    """Barycentric coordinates of s in the triangle with vertex rows tri."""
    d1 = tri[1] - tri[0]
    d2 = tri[2] - tri[0]
    r = np.asarray(s, dtype=float) - tri[0]
    det = d1[0] * d2[1] - d2[0] * d1[1]
    l1 = (r[0] * d2[1] - d2[0] * r[1]) / det
    l2 = (d1[0] * r[1] - r[0] * d1[1]) / det
    return np.array([1.0 - l1 - l2, l1, l2])


# Acceptance slack for roundoff when testing point-in-triangle membership;
# small enough not to disturb the lowest-index tie-break on shared edges.
_BARY_TOL = 1e-12


def locate_element(mesh: TriMesh, s) -> int:
    """Index of the element containing s; shared-edge ties resolve to the
    lowest element index."""
    x, y = float(s[0]), float(s[1])
    if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
        raise OutOfDomainError(f"point {s} outside the unit square")
    nc = mesh.n - 1
    h = mesh.cell_size
    i0 = min(int(x / h), nc - 1)
    j0 = min(int(y / h), nc - 1)
    # Points on cell boundaries also belong to the preceding cell; test
    # candidate cells in increasing element-index order.
    cand = []
    for j in (j0 - 1, j0):
        for i in (i0 - 1, i0):
            if 0 <= i < nc and 0 <= j < nc:
                cand.append(j * nc + i)
    for cell in sorted(cand):
        for e in (2 * cell, 2 * cell + 1):
            lam = _barycentric(mesh.nodes[mesh.elements[e]], (x, y))
            if np.all(lam >= -_BARY_TOL):
                return e
    raise OutOfDomainError(f"no element found for point {s}")  # unreachable


def hat_function_eval(mesh: TriMesh, node: int, s) -> float:
    """Piecewise-linear nodal basis function of `node` evaluated at s."""
    if not (0 <= node < mesh.n_nodes):
        raise ValueError(f"node index {node} out of range")
    e = locate_element(mesh, s)
    conn = mesh.elements[e]
    for k in range(3):
        if conn[k] == node:
            lam = _barycentric(mesh.nodes[conn], s)
            return float(np.clip(lam[k], 0.0, 1.0))
    return 0.0


def locate_elements(mesh: TriMesh, points: np.ndarray) -> np.ndarray:
    """Vectorised interior locate for many points (same tie-break rule)."""
    return np.array([locate_element(mesh, p) for p in np.atleast_2d(points)],
                    dtype=np.intp)


def interpolate_p1(mesh: TriMesh, nodal_values: np.ndarray, points) -> np.ndarray:
    """Evaluate a P1 nodal field (scalar or vector per node) at points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.empty((pts.shape[0],) + np.asarray(nodal_values).shape[1:])
    for r, p in enumerate(pts):
        e = locate_element(mesh, p)
        conn = mesh.elements[e]
        lam = _barycentric(mesh.nodes[conn], p)
        out[r] = np.tensordot(lam, nodal_values[conn], axes=1)
    return out
