"""Ground-truth generation: FEM forward solves and noisy observations.

Plane-strain P1 elements on the structured mesh.  The linear path
assembles the classic stiffness system; the nonlinear path (isotropic
background with a transversely isotropic inclusion) runs Newton iterations
with a per-element consistent tangent obtained by reverse-mode
differentiation of the batched stress evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from . import autodiff as ad
from .constitutive import (
    IsoParams,
    TransIsoParams,
    linear_iso_stress_components,
    transiso_constants,
    transiso_stress_components,
)
from .mesh import ObservationGrid, TriMesh, interpolate_p1


class SolverError(RuntimeError):
    """Linear or nonlinear solve failed; message carries the residual."""


class SingularSystemError(SolverError):
    """Not enough Dirichlet constraints to remove rigid-body modes."""


class NonConvergenceError(SolverError):
    """Newton iteration exhausted its budget."""


# ---------------------------------------------------------------------------
# boundary conditions


@dataclass
class BoundaryConditions:
    """Dirichlet entries (node, component, value) and Neumann edge tractions.

    dirichlet_edges names the fully fixed square edges, used by the smooth
    displacement mask of the inference path.
    """

    dirichlet: list
    neumann: list
    dirichlet_edges: tuple = ()

    def __post_init__(self):
        seen = set()
        for node, comp, _ in self.dirichlet:
            if (node, comp) in seen:
                raise ValueError(f"duplicate Dirichlet entry ({node}, {comp})")
            seen.add((node, comp))


def edge_node_indices(mesh: TriMesh, edge: str) -> np.ndarray:
    n = mesh.n
    return {"bottom": np.arange(n),
            "top": np.arange(n) + n * (n - 1),
            "left": np.arange(n) * n,
            "right": np.arange(n) * n + n - 1}[edge]


def boundary_edge_pairs(mesh: TriMesh, edge: str) -> list:
    nodes = edge_node_indices(mesh, edge)
    return [(int(nodes[k]), int(nodes[k + 1])) for k in range(len(nodes) - 1)]


def make_bc(mesh: TriMesh, fixed_edges=("bottom",), traction_edge="top",
            traction=(0.0, -0.1)) -> BoundaryConditions:
    """Fully fix the named edges (u = 0) and load one edge with a constant
    traction."""
    dirichlet = []
    seen = set()
    for e in fixed_edges:
        for node in edge_node_indices(mesh, e):
            for comp in (0, 1):
                if (int(node), comp) not in seen:
                    dirichlet.append((int(node), comp, 0.0))
                    seen.add((int(node), comp))
    tr = np.asarray(traction, dtype=float)
    neumann = [(pair, tr) for pair in boundary_edge_pairs(mesh, traction_edge)]
    return BoundaryConditions(dirichlet=dirichlet, neumann=neumann,
                              dirichlet_edges=tuple(fixed_edges))


def traction_scale(bc: BoundaryConditions) -> float:
    if not bc.neumann:
        return 1.0
    return max(float(np.max(np.abs(t))) for _, t in bc.neumann) or 1.0


# ---------------------------------------------------------------------------
# material map / ground truth


@dataclass
class MaterialMap:
    """Per-element law assignment: isotropic background, optional
    transversely isotropic circular inclusion (centroid membership)."""

    background: IsoParams
    inclusion: TransIsoParams | None
    center: tuple
    radius: float
    in_inclusion: np.ndarray   # bool per element

    @property
    def has_inclusion(self) -> bool:
        return self.inclusion is not None and bool(self.in_inclusion.any())


def make_material_map(mesh: TriMesh, background: IsoParams,
                      inclusion: TransIsoParams | None = None,
                      center=(0.5, 0.5), radius=0.2) -> MaterialMap:
    if radius <= 0:
        raise ValueError("inclusion radius must be positive")
    c = mesh.centroids()
    inside = np.hypot(c[:, 0] - center[0], c[:, 1] - center[1]) < radius
    if inclusion is None:
        inside = np.zeros(mesh.n_elements, dtype=bool)
    return MaterialMap(background, inclusion, tuple(center), radius, inside)


@dataclass
class GroundTruth:
    mesh: TriMesh
    u_nodes: np.ndarray          # (n_nodes, 2)
    material: MaterialMap
    bc: BoundaryConditions

    def element_grad_u(self) -> np.ndarray:
        return element_displacement_gradient(self.mesh, self.u_nodes)

    def element_stress(self) -> np.ndarray:
        """(n_elem, 3) true stress components (s11, s12, s22) per element."""
        g = self.element_grad_u()
        return _batched_stress(self.mesh, self.material, g)[0]


# ---------------------------------------------------------------------------
# linear assembly and solve


def _elasticity_matrix(E, nu):
    lam = E * nu / ((1 - 2 * nu) * (1 + nu))
    mu = E / (2 * (1 + nu))
    return np.array([[lam + 2 * mu, lam, 0.0],
                     [lam, lam + 2 * mu, 0.0],
                     [0.0, 0.0, mu]])


def _load_vector(mesh: TriMesh, bc: BoundaryConditions) -> np.ndarray:
    f = np.zeros(2 * mesh.n_nodes)
    for (n1, n2), tr in bc.neumann:
        length = np.linalg.norm(mesh.nodes[n2] - mesh.nodes[n1])
        for node in (n1, n2):
            f[2 * node:2 * node + 2] += 0.5 * length * np.asarray(tr)
    return f


@dataclass
class LinearSystem:
    """Assembled full system plus the Dirichlet partition."""

    K: sp.csr_matrix
    f: np.ndarray
    free: np.ndarray
    fixed: np.ndarray
    fixed_values: np.ndarray

    def reduced(self):
        """SPD reduced system (K_ff, rhs) after Dirichlet elimination."""
        K_ff = self.K[self.free][:, self.free]
        rhs = self.f[self.free] - self.K[self.free][:, self.fixed] @ self.fixed_values
        return K_ff.tocsr(), rhs


def assemble_linear_system(mesh: TriMesh, E_field, nu: float,
                           bc: BoundaryConditions) -> LinearSystem:
    """Assemble the plane-strain stiffness system with element-wise E."""
    E_field = np.broadcast_to(np.asarray(E_field, dtype=float),
                              (mesh.n_elements,))
    if len(bc.dirichlet) < 3:
        raise SingularSystemError(
            "at least 3 Dirichlet constraints needed to fix rigid-body modes")
    n_e = mesh.n_elements
    G = mesh.elem_grad                         # (n_e, 3, 2)
    B = np.zeros((n_e, 3, 6))
    for k in range(3):
        B[:, 0, 2 * k] = G[:, k, 0]
        B[:, 1, 2 * k + 1] = G[:, k, 1]
        B[:, 2, 2 * k] = G[:, k, 1]
        B[:, 2, 2 * k + 1] = G[:, k, 0]
    D0 = _elasticity_matrix(1.0, nu)           # linear in E
    Ke = np.einsum("eri,rs,esj->eij", B, D0, B)
    Ke *= (E_field * mesh.elem_area)[:, None, None]

    dofs = np.empty((n_e, 6), dtype=np.intp)
    dofs[:, 0::2] = 2 * mesh.elements
    dofs[:, 1::2] = 2 * mesh.elements + 1
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)),
                      shape=(2 * mesh.n_nodes,) * 2).tocsr()

    f = _load_vector(mesh, bc)
    fixed = np.array([2 * n + c for n, c, _ in bc.dirichlet], dtype=np.intp)
    fixed_values = np.array([v for _, _, v in bc.dirichlet])
    order = np.argsort(fixed)
    fixed, fixed_values = fixed[order], fixed_values[order]
    free = np.setdiff1d(np.arange(2 * mesh.n_nodes), fixed)
    return LinearSystem(K=K, f=f, free=free, fixed=fixed,
                        fixed_values=fixed_values)


def solve_linear(K: sp.spmatrix, f: np.ndarray) -> np.ndarray:
    """Direct sparse solve with a residual guard (rel < 1e-10)."""
    K = sp.csr_matrix(K)
    u = spsolve(K, f)
    if not np.all(np.isfinite(u)):
        raise SingularSystemError("singular stiffness system")
    scale = np.linalg.norm(f)
    res = np.linalg.norm(K @ u - f)
    if scale > 0 and res / scale >= 1e-10:
        raise SolverError(f"linear solve residual {res / scale:.3e} too large")
    return u


def solve_displacement(mesh: TriMesh, E_field, nu: float,
                       bc: BoundaryConditions) -> np.ndarray:
    """Assemble + reduce + solve; returns nodal displacements (n_nodes, 2)."""
    system = assemble_linear_system(mesh, E_field, nu, bc)
    K_ff, rhs = system.reduced()
    u = np.zeros(2 * mesh.n_nodes)
    u[system.fixed] = system.fixed_values
    u[system.free] = solve_linear(K_ff, rhs)
    return u.reshape(-1, 2)


# ---------------------------------------------------------------------------
# nonlinear solve


def element_displacement_gradient(mesh: TriMesh, u_nodes) -> np.ndarray:
    """Constant per-element displacement gradient, rows du_i/ds_j."""
    u = np.asarray(u_nodes, dtype=float).reshape(-1, 2)
    return np.einsum("eki,ekj->eij", u[mesh.elements], mesh.elem_grad)


def _batched_stress(mesh: TriMesh, mat: MaterialMap, grad_u,
                    with_tangent=False):
    """Per-element stress components and (optionally) the tangent
    d(sigma)/d(grad u), each law evaluated only on its own elements."""
    n_e = mesh.n_elements
    sig = np.zeros((n_e, 3))
    T = np.zeros((n_e, 3, 2, 2)) if with_tangent else None

    subsets = [(~mat.in_inclusion, "iso"), (mat.in_inclusion, "trans")]
    for mask, law in subsets:
        if not mask.any():
            continue
        g = grad_u[mask]
        tape = ad.Tape()
        leaves = [tape.leaf(g[:, i, j]) for i, j in
                  ((0, 0), (0, 1), (1, 0), (1, 1))]
        g11, g12, g21, g22 = leaves
        if law == "iso":
            e12 = ad.mul(ad.add(g12, g21), 0.5)
            comps = linear_iso_stress_components(
                g11, g22, e12, mat.background.E, mat.background.nu)
        else:
            c = transiso_constants(mat.inclusion)
            J = (1 + g[:, 0, 0]) * (1 + g[:, 1, 1]) - g[:, 0, 1] * g[:, 1, 0]
            if np.any(J <= 0):
                raise SolverError("inverted inclusion element (det F <= 0)")
            comps = transiso_stress_components(g11, g12, g21, g22, c,
                                               mat.inclusion.a)
        for ci, comp in enumerate(comps):   # (s11, s12, s22)
            sig[mask, ci] = comp.data
        if with_tangent:
            for ci, comp in enumerate(comps):
                grads = ad.backward(ad.tsum(comp))
                for li, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
                    T[mask, ci, i, j] = grads[leaves[li]]
    return sig, T


def internal_force(mesh: TriMesh, mat: MaterialMap, u_nodes) -> np.ndarray:
    """Nodal internal force vector for the current displacement state."""
    g = element_displacement_gradient(mesh, u_nodes)
    sig, _ = _batched_stress(mesh, mat, g)
    s = np.empty((mesh.n_elements, 2, 2))
    s[:, 0, 0], s[:, 0, 1], s[:, 1, 1] = sig[:, 0], sig[:, 1], sig[:, 2]
    s[:, 1, 0] = sig[:, 1]
    fe = np.einsum("e,ecj,ekj->ekc", mesh.elem_area, s, mesh.elem_grad)
    f = np.zeros(2 * mesh.n_nodes)
    np.add.at(f, 2 * mesh.elements, fe[:, :, 0])
    np.add.at(f, 2 * mesh.elements + 1, fe[:, :, 1])
    return f


def _tangent_matrix(mesh: TriMesh, mat: MaterialMap, u_nodes) -> sp.csr_matrix:
    g = element_displacement_gradient(mesh, u_nodes)
    _, T = _batched_stress(mesh, mat, g, with_tangent=True)
    # expand (s11, s12, s22) rows into the full symmetric 2x2x2x2 tangent
    Tf = np.empty((mesh.n_elements, 2, 2, 2, 2))
    Tf[:, 0, 0] = T[:, 0]
    Tf[:, 0, 1] = T[:, 1]
    Tf[:, 1, 0] = T[:, 1]
    Tf[:, 1, 1] = T[:, 2]
    G = mesh.elem_grad
    Ke = np.einsum("e,eaj,ecjdl,ebl->eacbd", mesh.elem_area, G, Tf, G)
    Ke = Ke.reshape(mesh.n_elements, 6, 6)
    dofs = np.empty((mesh.n_elements, 6), dtype=np.intp)
    dofs[:, 0::2] = 2 * mesh.elements
    dofs[:, 1::2] = 2 * mesh.elements + 1
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    return sp.coo_matrix((Ke.ravel(), (rows, cols)),
                         shape=(2 * mesh.n_nodes,) * 2).tocsr()


def solve_hyperelastic(mesh: TriMesh, mat: MaterialMap, bc: BoundaryConditions,
                       newton_tol: float = 1e-9, max_iters: int = 30,
                       return_history: bool = False):
    """Newton solve of the nonlinear equilibrium; initial guess is the
    linear background solve.  Converges on the inf-norm of the free
    residual below newton_tol * traction scale."""
    scale = traction_scale(bc)
    tol = newton_tol * scale
    u = solve_displacement(mesh, np.full(mesh.n_elements, mat.background.E),
                           mat.background.nu, bc).ravel()
    fixed = np.array([2 * n + c for n, c, _ in bc.dirichlet], dtype=np.intp)
    fixed_values = np.array([v for _, _, v in bc.dirichlet])
    free = np.setdiff1d(np.arange(2 * mesh.n_nodes), fixed)
    u[fixed] = fixed_values
    f_ext = _load_vector(mesh, bc)

    def residual(u_vec):
        return (f_ext - internal_force(mesh, mat, u_vec))[free]

    history = []
    r = residual(u)
    for _ in range(max_iters):
        rn = np.max(np.abs(r)) if r.size else 0.0
        history.append(rn)
        if rn < tol:
            break
        K = _tangent_matrix(mesh, mat, u)
        du = spsolve(K[free][:, free].tocsr(), r)
        if not np.all(np.isfinite(du)):
            raise SolverError("singular tangent in Newton iteration")
        step = 1.0
        for _ in range(25):
            u_try = u.copy()
            u_try[free] += step * du
            try:
                r_try = residual(u_try)
            except SolverError:
                step *= 0.5
                continue
            if np.max(np.abs(r_try)) < rn or rn < tol:
                break
            step *= 0.5
        else:
            raise NonConvergenceError(
                f"Newton line search stalled at residual {rn:.3e}")
        u, r = u_try, r_try
    else:
        raise NonConvergenceError(
            f"Newton did not reach {tol:.3e} in {max_iters} iterations "
            f"(last residual {np.max(np.abs(r)):.3e})")

    g = element_displacement_gradient(mesh, u)
    J = (1 + g[:, 0, 0]) * (1 + g[:, 1, 1]) - g[:, 0, 1] * g[:, 1, 0]
    if np.any(J <= 0):
        raise SolverError("inverted element at converged state")
    u_nodes = u.reshape(-1, 2)
    return (u_nodes, history) if return_history else u_nodes


def solve_ground_truth(mesh: TriMesh, mat: MaterialMap,
                       bc: BoundaryConditions) -> GroundTruth:
    if mat.has_inclusion:
        u = solve_hyperelastic(mesh, mat, bc)
    else:
        u = solve_displacement(mesh, np.full(mesh.n_elements, mat.background.E),
                               mat.background.nu, bc)
    return GroundTruth(mesh=mesh, u_nodes=u, material=mat, bc=bc)


# ---------------------------------------------------------------------------
# observations


def observation_points(obs_grid_n: int) -> np.ndarray:
    c = np.linspace(0.0, 1.0, obs_grid_n)
    xx, yy = np.meshgrid(c, c, indexing="xy")
    return np.column_stack([xx.ravel(), yy.ravel()])


def sample_observations(gt: GroundTruth, obs_grid_n: int, tau: float,
                        seed: int) -> ObservationGrid:
    """Noisy displacement observations on a regular grid incl. boundary."""
    if tau <= 0:
        raise ValueError("observation precision tau must be positive")
    pts = observation_points(obs_grid_n)
    u = interpolate_p1(gt.mesh, gt.u_nodes, pts)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(u.shape) / np.sqrt(tau)
    return ObservationGrid(points=pts, values=u + noise, tau=tau)


def default_tau(gt: GroundTruth, noise_percent: float) -> float:
    """Precision giving noise std = noise_percent% of max |u|."""
    umax = float(np.max(np.linalg.norm(gt.u_nodes, axis=1)))
    std = noise_percent / 100.0 * umax
    if std <= 0:
        raise ValueError("ground truth has zero displacement; cannot scale noise")
    return 1.0 / std ** 2
