"""Finite-dimensional field representations.

Material and stress fields are element-wise constant on the inversion mesh
(indicator basis, one coefficient per element, stress stored
component-major: all s11, then all s12, then all s22).  The displacement
field is a neural basis: a small MLP maps position s to a (2 x d_z) basis
that is contracted with the latent vector z.  The network forward pass
propagates spatial tangents layer by layer with taped primitive ops, so
grad u stays differentiable w.r.t. the network weights and z inside one
reverse-mode tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .mesh import TriMesh, locate_element

# ---------------------------------------------------------------------------
# element-indicator fields


def eval_material(x: np.ndarray, mesh: TriMesh, s) -> float:
    """ln-E value of the containing element (indicator basis)."""
    x = np.asarray(x)
    if x.shape[0] != mesh.n_elements:
        raise ValueError("coefficient count does not match element count")
    return float(x[locate_element(mesh, s)])


def eval_modulus(x: np.ndarray, mesh: TriMesh, s) -> float:
    """Young's modulus E = exp(ln E) at s."""
    return float(np.exp(eval_material(x, mesh, s)))


def stress_components(chi: np.ndarray, n_elements: int):
    """Split a component-major stress coefficient vector into (s11, s12, s22)."""
    chi = np.asarray(chi)
    if chi.shape[0] != 3 * n_elements:
        raise ValueError("stress coefficient count must be 3 x element count")
    return chi[:n_elements], chi[n_elements:2 * n_elements], chi[2 * n_elements:]


def eval_stress(chi: np.ndarray, mesh: TriMesh, s) -> np.ndarray:
    """Symmetric 2x2 stress tensor of the containing element."""
    s11, s12, s22 = stress_components(chi, mesh.n_elements)
    e = locate_element(mesh, s)
    return np.array([[s11[e], s12[e]], [s12[e], s22[e]]])


# ---------------------------------------------------------------------------
# neural displacement basis


class BasisEval(NamedTuple):
    """Basis rows and spatial tangents at a batch of points.

    Each entry has shape (P, d_z); b1/b2 are the basis rows of the two
    displacement components, d<j>b<c> is the derivative of b<c> w.r.t. s_j.
    Entries are autodiff tensors when the weights are taped, otherwise
    constant tensors.
    """

    b1: object
    b2: object
    d1b1: object
    d2b1: object
    d1b2: object
    d2b2: object


@dataclass
class DisplacementNet:
    """MLP basis: input s (2,), `depth` tanh layers of `width`, then one
    sigmoid head of d_z outputs per displacement component."""

    d_z: int
    width: int = 20
    depth: int = 4

    def init_weights(self, rng: np.random.Generator) -> dict:
        sizes = [2] + [self.width] * self.depth
        weights = {}
        for k in range(self.depth):
            fan_in = sizes[k]
            weights[f"u.w{k}"] = rng.normal(0, 1 / np.sqrt(fan_in),
                                            size=(sizes[k + 1], fan_in))
            weights[f"u.b{k}"] = np.zeros(sizes[k + 1])
        for c in (1, 2):
            weights[f"u.wo{c}"] = rng.normal(0, 1 / np.sqrt(self.width),
                                             size=(self.d_z, self.width))
            weights[f"u.bo{c}"] = np.zeros(self.d_z)
        return weights

    def basis(self, weights: dict, points: np.ndarray) -> BasisEval:
        """Forward pass with spatial tangent propagation.

        weights values may be numpy arrays (pure evaluation) or taped
        tensors (training); points is a constant (P, 2) array.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        h = ad.Tensor(pts)
        t1 = ad.Tensor(np.broadcast_to([1.0, 0.0], pts.shape).copy())
        t2 = ad.Tensor(np.broadcast_to([0.0, 1.0], pts.shape).copy())
        for k in range(self.depth):
            wT = ad.transpose(weights[f"u.w{k}"])
            b = weights[f"u.b{k}"]
            a = ad.add(ad.matmul(h, wT), b)
            h = ad.tanh(a)
            dact = ad.sub(1.0, ad.square(h))       # tanh'
            t1 = ad.mul(dact, ad.matmul(t1, wT))
            t2 = ad.mul(dact, ad.matmul(t2, wT))
        out = []
        for c in (1, 2):
            wT = ad.transpose(weights[f"u.wo{c}"])
            b = weights[f"u.bo{c}"]
            bc = ad.sigmoid(ad.add(ad.matmul(h, wT), b))
            dact = ad.mul(bc, ad.sub(1.0, bc))     # sigmoid'
            out.append((bc, ad.mul(dact, ad.matmul(t1, wT)),
                        ad.mul(dact, ad.matmul(t2, wT))))
        (b1, d1b1, d2b1), (b2, d1b2, d2b2) = out
        return BasisEval(b1, b2, d1b1, d2b1, d1b2, d2b2)


def eval_displacement(net: DisplacementNet, weights: dict, z: np.ndarray,
                      s) -> np.ndarray:
    """Raw (unmasked) displacement u(z, s) = basis(s) . z."""
    z = np.asarray(z, dtype=float)
    if z.shape != (net.d_z,):
        raise ValueError(f"latent vector must have length {net.d_z}")
    be = net.basis(weights, np.asarray(s, dtype=float))
    return np.array([float(be.b1.data[0] @ z), float(be.b2.data[0] @ z)])


def eval_displacement_grad(net: DisplacementNet, weights: dict, z: np.ndarray,
                           s) -> np.ndarray:
    """Raw displacement gradient, rows du_i/ds_j, via tangent propagation."""
    z = np.asarray(z, dtype=float)
    if z.shape != (net.d_z,):
        raise ValueError(f"latent vector must have length {net.d_z}")
    be = net.basis(weights, np.asarray(s, dtype=float))
    return np.array([[float(be.d1b1.data[0] @ z), float(be.d2b1.data[0] @ z)],
                     [float(be.d1b2.data[0] @ z), float(be.d2b2.data[0] @ z)]])


# ---------------------------------------------------------------------------
# Dirichlet mask

_EDGE_FACTORS = {
    "bottom": (lambda p: p[:, 1], (0.0, 1.0)),
    "top": (lambda p: 1.0 - p[:, 1], (0.0, -1.0)),
    "left": (lambda p: p[:, 0], (1.0, 0.0)),
    "right": (lambda p: 1.0 - p[:, 0], (-1.0, 0.0)),
}


def dirichlet_mask(points: np.ndarray, edges) -> tuple[np.ndarray, np.ndarray]:
    """Smooth factor d(s) vanishing on the given fixed edges and its
    gradient; d is the product of the per-edge distance coordinates."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = np.ones(pts.shape[0])
    factors = []
    for e in edges:
        if e not in _EDGE_FACTORS:
            raise ValueError(f"unknown edge name {e!r}")
        f, g = _EDGE_FACTORS[e]
        factors.append((f(pts), np.asarray(g)))
        d = d * factors[-1][0]
    grad = np.zeros_like(pts)
    for k, (fk, gk) in enumerate(factors):
        other = np.ones(pts.shape[0])
        for j, (fj, _) in enumerate(factors):
            if j != k:
                other = other * fj
        grad += other[:, None] * gk[None, :]
    return d, grad


def apply_dirichlet_mask(u_raw: np.ndarray, s, bc) -> np.ndarray:
    """Hard-constrain a raw displacement value: u = d(s) * u_raw."""
    edges = bc.dirichlet_edges if hasattr(bc, "dirichlet_edges") else bc
    d, _ = dirichlet_mask(np.asarray(s, dtype=float), edges)
    return float(d[0]) * np.asarray(u_raw, dtype=float)


# ---------------------------------------------------------------------------
# jump operator


@dataclass(frozen=True)
class JumpOperator:
    """Signed incidence of element pairs across interior edges: row k of B
    is +1 on element lo[k], -1 on element hi[k] (lo < hi)."""

    B: sp.csr_matrix
    lo: np.ndarray
    hi: np.ndarray

    @property
    def n_jumps(self) -> int:
        return len(self.lo)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[self.lo] - np.asarray(x)[self.hi]


def build_jump_operator(mesh: TriMesh) -> JumpOperator:
    """One row per interior mesh edge, pairing the two incident elements."""
    edge_elems: dict[tuple, list] = {}
    for e, conn in enumerate(mesh.elements):
        for k in range(3):
            key = tuple(sorted((conn[k], conn[(k + 1) % 3])))
            edge_elems.setdefault(key, []).append(e)
    pairs = sorted(tuple(sorted(v)) for v in edge_elems.values() if len(v) == 2)
    lo = np.array([p[0] for p in pairs], dtype=np.intp)
    hi = np.array([p[1] for p in pairs], dtype=np.intp)
    n = len(pairs)
    rows = np.repeat(np.arange(n), 2)
    cols = np.column_stack([lo, hi]).ravel()
    vals = np.tile([1.0, -1.0], n)
    B = sp.csr_matrix((vals, (rows, cols)), shape=(n, mesh.n_elements))
    return JumpOperator(B=B, lo=lo, hi=hi)


# ---------------------------------------------------------------------------
# piecewise-linear FE alternative for the displacement field


@dataclass
class FeDisplacementBasis:
    """P1 nodal displacement basis with Dirichlet-edge dofs removed.

    Drop-in alternative to the neural basis (config switch): basis entries
    are constants, so there are no trainable displacement weights.
    """

    mesh: TriMesh
    dirichlet_edges: tuple

    def __post_init__(self):
        fixed = set()
        n = self.mesh.n
        for e in self.dirichlet_edges:
            idx = {"bottom": np.arange(n),
                   "top": np.arange(n) + n * (n - 1),
                   "left": np.arange(n) * n,
                   "right": np.arange(n) * n + n - 1}[e]
            fixed.update(int(i) for i in idx)
        self.free_nodes = np.array(
            [i for i in range(self.mesh.n_nodes) if i not in fixed],
            dtype=np.intp)
        self.d_z = 2 * len(self.free_nodes)

    def basis(self, weights: dict, points: np.ndarray) -> BasisEval:
        """Constant basis matrices at the given points (weights unused)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        P, d = pts.shape[0], self.d_z
        nf = len(self.free_nodes)
        col_of = {int(n): k for k, n in enumerate(self.free_nodes)}
        b = np.zeros((P, nf))
        db1 = np.zeros((P, nf))
        db2 = np.zeros((P, nf))
        for r, p in enumerate(pts):
            e = locate_element(self.mesh, p)
            conn = self.mesh.elements[e]
            from .mesh import _barycentric
            lam = _barycentric(self.mesh.nodes[conn], p)
            for k in range(3):
                c = col_of.get(int(conn[k]))
                if c is None:
                    continue
                b[r, c] = lam[k]
                db1[r, c] = self.mesh.elem_grad[e, k, 0]
                db2[r, c] = self.mesh.elem_grad[e, k, 1]
        zero = np.zeros((P, nf))
        # component 1 uses the first nf latent entries, component 2 the rest
        return BasisEval(
            ad.Tensor(np.hstack([b, zero])), ad.Tensor(np.hstack([zero, b])),
            ad.Tensor(np.hstack([db1, zero])), ad.Tensor(np.hstack([db2, zero])),
            ad.Tensor(np.hstack([zero, db1])), ad.Tensor(np.hstack([zero, db2])))

    def init_weights(self, rng) -> dict:
        return {}
