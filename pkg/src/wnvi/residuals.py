"""Weak-form conservation residuals and collocation constitutive residuals.

A weight function is a vector-valued P1 field vanishing on the Dirichlet
boundary.  Because the stress field is element-wise constant and P1
gradients are element-wise constant, one-point quadrature makes the volume
integral exact; each weight function therefore reduces to one precomputed
sparse row G[w] against the stress coefficients plus a boundary traction
term b[w]:  r_w = G[w] . chi - b[w].

Constitutive residuals are evaluated at the element centroids (one
collocation point per element, no subsampling).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .constitutive import linear_iso_stress_components
from .fields import DisplacementNet, dirichlet_mask, eval_displacement, \
    eval_displacement_grad, eval_material, eval_stress, stress_components
from .forward import BoundaryConditions
from .mesh import TriMesh


@dataclass(frozen=True)
class WeightFunction:
    """Coefficients (n_nodes, 2) over the vector nodal P1 basis."""

    coeffs: np.ndarray


@dataclass(frozen=True)
class CollocationSet:
    """Fixed constitutive-residual locations: all element centroids."""

    points: np.ndarray
    element_index: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.points)


def collocation_set(mesh: TriMesh) -> CollocationSet:
    return CollocationSet(points=mesh.centroids(),
                          element_index=np.arange(mesh.n_elements))


# ---------------------------------------------------------------------------
# weight-function family


@dataclass
class WeightFunctionFamily:
    """Indexed family: admissible nodal hat functions first (2 per
    non-Dirichlet node), then seeded sparse +-1 combinations of 12 nodal
    functions when the configured size exceeds the nodal count."""

    mesh: TriMesh
    bc: BoundaryConditions
    G: sp.csr_matrix          # (N_e, 3*n_elem) residual rows
    b: np.ndarray             # (N_e,) boundary traction terms
    base_dofs: np.ndarray     # (n_base, 2) rows of (node, comp)
    combos: list              # [(indices into base, signs)] for extras

    @property
    def size(self) -> int:
        return self.G.shape[0]

    @property
    def n_base(self) -> int:
        return len(self.base_dofs)

    def weight_function(self, i: int) -> WeightFunction:
        c = np.zeros((self.mesh.n_nodes, 2))
        if i < self.n_base:
            node, comp = self.base_dofs[i]
            c[node, comp] = 1.0
        else:
            idx, signs = self.combos[i - self.n_base]
            for k, s in zip(idx, signs):
                node, comp = self.base_dofs[k]
                c[node, comp] += s
        return WeightFunction(coeffs=c)

    def rows(self, indices) -> tuple[np.ndarray, np.ndarray]:
        """Dense residual rows and boundary terms for a subsample."""
        return self.G[indices].toarray(), self.b[indices]

    def mc_rows(self, indices, n_points: int,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Residual rows with the volume integral replaced by its Monte
        Carlo estimate: per-column element areas become sampled-point
        fractions (shared across the subsample; boundary terms stay exact)."""
        pts = mc_integration_points(n_points, rng)
        hits = np.bincount(locate_cells(self.mesh, pts),
                           minlength=self.mesh.n_elements) / n_points
        scale = np.tile(hits / self.mesh.elem_area, 3)
        return self.G[indices].toarray() * scale[None, :], self.b[indices]


def _dirichlet_dofs(bc: BoundaryConditions) -> set:
    return {(int(n), int(c)) for n, c, _ in bc.dirichlet}


def _nodal_residual_rows(mesh: TriMesh, bc: BoundaryConditions):
    """Sparse G over all nodal dofs plus the boundary term vector."""
    n_e = mesh.n_elements
    rows, cols, vals = [], [], []
    for e in range(n_e):
        a = mesh.elem_area[e]
        for k in range(3):
            node = mesh.elements[e, k]
            g1, g2 = mesh.elem_grad[e, k]
            # w = hat*e_1: sigma_11 d1 + sigma_12 d2 ; w = hat*e_2: s12 d1 + s22 d2
            rows += [2 * node, 2 * node, 2 * node + 1, 2 * node + 1]
            cols += [e, n_e + e, n_e + e, 2 * n_e + e]
            vals += [a * g1, a * g2, a * g1, a * g2]
    G_all = sp.coo_matrix((vals, (rows, cols)),
                          shape=(2 * mesh.n_nodes, 3 * n_e)).tocsr()
    b_all = np.zeros(2 * mesh.n_nodes)
    for (n1, n2), tr in bc.neumann:
        length = np.linalg.norm(mesh.nodes[n2] - mesh.nodes[n1])
        for node in (n1, n2):
            b_all[2 * node] += 0.5 * length * tr[0]
            b_all[2 * node + 1] += 0.5 * length * tr[1]
    return G_all, b_all


def generate_weight_functions(mesh: TriMesh, bc: BoundaryConditions,
                              n_e: int | None = None,
                              seed: int = 0) -> WeightFunctionFamily:
    """Build the admissible family of the requested size."""
    fixed = _dirichlet_dofs(bc)
    base_dofs = np.array([(node, comp)
                          for node in range(mesh.n_nodes)
                          for comp in (0, 1)
                          if (node, comp) not in fixed], dtype=np.intp)
    G_all, b_all = _nodal_residual_rows(mesh, bc)
    base_rows = 2 * base_dofs[:, 0] + base_dofs[:, 1]
    G = G_all[base_rows]
    b = b_all[base_rows]

    n_base = len(base_dofs)
    if n_e is None:
        n_e = n_base
    if n_e < n_base:
        raise ValueError(f"family size {n_e} below the {n_base} nodal functions")
    combos = []
    if n_e > n_base:
        rng = np.random.default_rng(seed)
        extra_G, extra_b = [], []
        for _ in range(n_e - n_base):
            idx = rng.choice(n_base, size=min(12, n_base), replace=False)
            signs = rng.choice([-1.0, 1.0], size=len(idx))
            combos.append((idx, signs))
            row = signs @ G[idx]
            extra_G.append(sp.csr_matrix(row))
            extra_b.append(float(signs @ b[idx]))
        G = sp.vstack([G] + extra_G).tocsr()
        b = np.concatenate([b, extra_b])
    return WeightFunctionFamily(mesh=mesh, bc=bc, G=G, b=b,
                                base_dofs=base_dofs, combos=combos)


def subsample(family_size: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Eq.-19 subsample: uniform with replacement, degenerate K = N_e case
    returns every index once."""
    if K > family_size:
        raise ValueError(f"cannot subsample {K} of {family_size}")
    if K == family_size:
        return np.arange(family_size)
    return rng.integers(0, family_size, size=K)


# ---------------------------------------------------------------------------
# conservation residuals


def _weight_gradients(mesh: TriMesh, w: WeightFunction) -> np.ndarray:
    """Constant per-element gradient dw_i/ds_j of a P1 weight function."""
    return np.einsum("eki,ekj->eij", w.coeffs[mesh.elements], mesh.elem_grad)


def neumann_term(w: WeightFunction, mesh: TriMesh,
                 bc: BoundaryConditions) -> float:
    """Exact edge integral of the traction against a P1 weight function."""
    total = 0.0
    for (n1, n2), tr in bc.neumann:
        length = np.linalg.norm(mesh.nodes[n2] - mesh.nodes[n1])
        wm = 0.5 * (w.coeffs[n1] + w.coeffs[n2])
        total += length * float(np.dot(np.asarray(tr), wm))
    return total


def conservation_residual(chi: np.ndarray, w: WeightFunction, mesh: TriMesh,
                          bc: BoundaryConditions) -> float:
    """r_w = integral(sigma : grad w) - integral(f . w); exact quadrature."""
    s11, s12, s22 = stress_components(chi, mesh.n_elements)
    dw = _weight_gradients(mesh, w)
    vol = float(np.sum(mesh.elem_area * (
        s11 * dw[:, 0, 0] + s12 * (dw[:, 0, 1] + dw[:, 1, 0])
        + s22 * dw[:, 1, 1])))
    return vol - neumann_term(w, mesh, bc)


def locate_cells(mesh: TriMesh, pts: np.ndarray) -> np.ndarray:
    """Vectorised element lookup for points in [0,1]^2.  Agrees with
    locate_element except possibly on shared cell edges (measure zero)."""
    nc = mesh.n - 1
    i = np.minimum((pts[:, 0] * nc).astype(np.intp), nc - 1)
    j = np.minimum((pts[:, 1] * nc).astype(np.intp), nc - 1)
    xi = pts[:, 0] * nc - i
    eta = pts[:, 1] * nc - j
    return 2 * (j * nc + i) + ((xi + eta) > 1.0)


def stress_field_evaluator(chi: np.ndarray, mesh: TriMesh):
    """Vectorised point-wise stress callback for an indicator stress field."""
    s11, s12, s22 = stress_components(chi, mesh.n_elements)

    def evaluate(points: np.ndarray) -> np.ndarray:
        e = locate_cells(mesh, np.atleast_2d(points))
        out = np.empty((len(e), 2, 2))
        out[:, 0, 0] = s11[e]
        out[:, 0, 1] = out[:, 1, 0] = s12[e]
        out[:, 1, 1] = s22[e]
        return out

    return evaluate


def mc_integration_points(n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Jittered uniform sample of the unit square: one uniform point in each
    cell of a k x k stratification (k = floor(sqrt(n))), remainder plain
    uniform.  Every point is marginally uniform, so the equal-weight mean is
    unbiased and exact for constant integrands at any count."""
    k = int(np.sqrt(n_points))
    i, j = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    pts = (np.column_stack([i.ravel(), j.ravel()])
           + rng.uniform(0.0, 1.0, size=(k * k, 2))) / k
    rem = n_points - k * k
    if rem:
        pts = np.vstack([pts, rng.uniform(0.0, 1.0, size=(rem, 2))])
    return pts


def conservation_residual_mc(sigma_eval, w: WeightFunction, mesh: TriMesh,
                             bc: BoundaryConditions, n_points: int,
                             seed: int) -> float:
    """Monte Carlo estimate of the volume term (jittered uniform sampling,
    area weight 1); the boundary term stays exact."""
    if n_points < 1:
        raise ValueError("n_points must be at least 1")
    pts = mc_integration_points(n_points, np.random.default_rng(seed))
    sig = np.asarray(sigma_eval(pts))
    dw = _weight_gradients(mesh, w)[locate_cells(mesh, pts)]
    integrand = np.einsum("pij,pij->p", sig, dw)
    return float(integrand.mean()) - neumann_term(w, mesh, bc)


# ---------------------------------------------------------------------------
# constitutive residuals


def constitutive_residual(x: np.ndarray, z: np.ndarray, chi: np.ndarray,
                          s_tilde, mesh: TriMesh, net: DisplacementNet,
                          weights: dict, bc: BoundaryConditions,
                          nu: float = 0.3) -> np.ndarray:
    """Point-wise residual (3,) at s_tilde: sigma(chi) minus the linear
    isotropic law applied to the masked displacement gradient with
    E = exp(m(x, s_tilde))."""
    s_tilde = np.asarray(s_tilde, dtype=float)
    sig = eval_stress(chi, mesh, s_tilde)
    u_raw = eval_displacement(net, weights, z, s_tilde)
    g_raw = eval_displacement_grad(net, weights, z, s_tilde)
    d, dd = dirichlet_mask(s_tilde, bc.dirichlet_edges)
    grad_u = d[0] * g_raw + np.outer(u_raw, dd[0])
    E = np.exp(eval_material(x, mesh, s_tilde))
    e12 = 0.5 * (grad_u[0, 1] + grad_u[1, 0])
    t11, t12, t22 = linear_iso_stress_components(
        grad_u[0, 0], grad_u[1, 1], e12, E, nu)
    return np.array([sig[0, 0] - t11, sig[0, 1] - t12, sig[1, 1] - t22])


# ---------------------------------------------------------------------------
# taped (batched) residual assembly used by the ELBO


def taped_conservation_residuals(G_rows: np.ndarray, b_rows: np.ndarray,
                                 chi_T) -> ad.Tensor:
    """(K, L) residuals for a subsample; chi_T is a (d_chi, L) tensor."""
    return ad.sub(ad.matmul(G_rows, chi_T), b_rows[:, None])


def taped_constitutive_residuals(chi_T, x_T, e11, e22, e12, n_elements: int,
                                 nu: float = 0.3):
    """(N_c, L) residual components at all element centroids.

    chi_T: (3*N_c, L) stress coefficients (component-major), x_T: (N_c, L)
    ln-E coefficients, strains from the masked displacement gradient.
    """
    idx = np.arange(n_elements)
    s11 = ad.gather(chi_T, idx)
    s12 = ad.gather(chi_T, idx + n_elements)
    s22 = ad.gather(chi_T, idx + 2 * n_elements)
    E = ad.exp(x_T)
    t11, t12, t22 = linear_iso_stress_components(e11, e22, e12, E, nu)
    return ad.sub(s11, t11), ad.sub(s12, t12), ad.sub(s22, t22)
