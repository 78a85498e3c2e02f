"""Variational inference: approximate posterior, ELBO, conjugate updates,
and the stochastic training loop.

The posterior factorizes as q(x|z) q(chi|z) q(z) q(lambda_c) q(theta):
q(z) is a diagonal Gaussian; the conditional means of x (log-modulus
coefficients) and chi (stress coefficients) are MLPs of z with fixed
low-rank-plus-diagonal covariances; the precision fields lambda_c (one per
collocation point) and theta (one per material jump) keep Gamma posteriors
updated in closed form every iteration, with their means plugged into the
ELBO.  All Gaussian parameters are trained by reparameterized gradient
ascent (ADAM) on a Monte Carlo ELBO with weight-function subsampling.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import digamma, gammaln

from . import autodiff as ad
from .autodiff import AdamState, adam_init, adam_step, backward
from .config import RunConfig, config_hash
from .fields import (
    DisplacementNet,
    FeDisplacementBasis,
    JumpOperator,
    build_jump_operator,
    dirichlet_mask,
)
from .forward import BoundaryConditions, make_bc
from .mesh import ObservationGrid, TriMesh, build_grid
from .residuals import (
    CollocationSet,
    WeightFunctionFamily,
    collocation_set,
    generate_weight_functions,
    subsample,
    taped_conservation_residuals,
    taped_constitutive_residuals,
)


class ElboNotFiniteError(RuntimeError):
    """A named ELBO term evaluated to a non-finite value."""


# ---------------------------------------------------------------------------
# priors and Gamma posteriors


@dataclass(frozen=True)
class Priors:
    """Fixed hyperparameters: residual precisions and the vague Gamma/
    Gaussian priors.  A zero precision disables the corresponding ELBO term
    (prior-only diagnostics)."""

    lambda_e: float
    tau: float
    chi_variance: float = 1e16
    a0: float = 1e-8
    b0: float = 1e-8

    def __post_init__(self):
        if self.lambda_e < 0 or self.tau < 0:
            raise ValueError("lambda_e and tau must be non-negative")
        if self.a0 <= 0 or self.b0 <= 0:
            raise ValueError("Gamma hyperparameters must be positive")


@dataclass
class GammaPosterior:
    """Independent Gamma(a_i, b_i) posteriors for a precision vector."""

    a: np.ndarray
    b: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.a / self.b

    def mean_log(self) -> np.ndarray:
        return digamma(self.a) - np.log(self.b)

    def kl_to_prior(self, a0: float, b0: float) -> float:
        a, b = self.a, self.b
        kl = ((a - a0) * digamma(a) - gammaln(a) + gammaln(a0)
              + a0 * (np.log(b) - np.log(b0)) + a * (b0 - b) / b)
        return float(kl.sum())


def update_lambda_c(lam: GammaPosterior, rc_second_moments: np.ndarray,
                    a0: float, b0: float) -> GammaPosterior:
    """Closed-form conjugate update: a = a0 + 1/2, b = b0 + E[(r_c)^2]/2,
    with the second moment summed over the 3 stress components per point."""
    m = np.asarray(rc_second_moments, dtype=float)
    if np.any(m < 0):
        raise ValueError("second moments must be non-negative")
    return GammaPosterior(a=np.full(m.shape, a0 + 0.5), b=b0 + 0.5 * m)


def update_theta(theta: GammaPosterior, jump_second_moments: np.ndarray,
                 a0: float, b0: float) -> GammaPosterior:
    """Conjugate update of the jump precisions, mirroring update_lambda_c."""
    m = np.asarray(jump_second_moments, dtype=float)
    if np.any(m < 0):
        raise ValueError("second moments must be non-negative")
    return GammaPosterior(a=np.full(m.shape, a0 + 0.5), b=b0 + 0.5 * m)


# ---------------------------------------------------------------------------
# MLPs for the conditional means


def mlp_init(prefix: str, d_in: int, width: int, n_hidden: int, d_out: int,
             rng: np.random.Generator) -> dict:
    """Fan-in-scaled normal init, zero biases."""
    sizes = [d_in] + [width] * n_hidden + [d_out]
    weights = {}
    for k in range(len(sizes) - 1):
        weights[f"{prefix}.w{k}"] = rng.normal(
            0, 1 / np.sqrt(sizes[k]), size=(sizes[k + 1], sizes[k]))
        weights[f"{prefix}.b{k}"] = np.zeros(sizes[k + 1])
    return weights


def mlp_forward(weights: dict, prefix: str, X, n_hidden: int):
    """SiLU hidden layers, linear output; X is (L, d_in)."""
    h = X
    for k in range(n_hidden):
        h = ad.silu(ad.add(ad.matmul(h, ad.transpose(weights[f"{prefix}.w{k}"])),
                           weights[f"{prefix}.b{k}"]))
    k = n_hidden
    return ad.add(ad.matmul(h, ad.transpose(weights[f"{prefix}.w{k}"])),
                  weights[f"{prefix}.b{k}"])


# ---------------------------------------------------------------------------
# problem setup


class LatentState(NamedTuple):
    """One posterior sample; lambda_c enters via its posterior mean."""

    z: np.ndarray
    x: np.ndarray
    chi: np.ndarray
    lam_c: np.ndarray


@dataclass
class ProblemSetup:
    """Everything fixed during training."""

    cfg: RunConfig
    mesh: TriMesh
    bc: BoundaryConditions
    obs: ObservationGrid
    priors: Priors
    family: WeightFunctionFamily
    colloc: CollocationSet
    jumps: JumpOperator
    displacement: object            # DisplacementNet | FeDisplacementBasis
    points: np.ndarray              # collocation points then obs points
    mask_d: np.ndarray              # (P, 1)
    mask_g: np.ndarray              # (P, 2)
    n_colloc: int

    @property
    def d_x(self) -> int:
        return self.mesh.n_elements

    @property
    def d_chi(self) -> int:
        return 3 * self.mesh.n_elements

    @property
    def d_z(self) -> int:
        return self.displacement.d_z

    @property
    def obs_rows(self) -> np.ndarray:
        return self.n_colloc + np.arange(len(self.obs.points))


def build_setup(cfg: RunConfig, obs: ObservationGrid) -> ProblemSetup:
    mesh = build_grid(cfg.inversion_n)
    bc = make_bc(mesh, fixed_edges=cfg.fixed_edges,
                 traction_edge=cfg.traction_edge, traction=cfg.traction)
    n_e = cfg.n_weight_functions if cfg.n_weight_functions > 0 else None
    family = generate_weight_functions(mesh, bc, n_e=n_e, seed=cfg.seed + 2)
    colloc = collocation_set(mesh)
    jumps = build_jump_operator(mesh)
    if cfg.displacement_basis == "nn":
        displacement = DisplacementNet(d_z=cfg.d_z, width=cfg.u_width,
                                       depth=cfg.u_depth)
    else:
        displacement = FeDisplacementBasis(mesh, dirichlet_edges=cfg.fixed_edges)
    points = np.vstack([colloc.points, obs.points])
    if cfg.displacement_basis == "nn":
        d, g = dirichlet_mask(points, cfg.fixed_edges)
    else:
        # the FE basis removes Dirichlet dofs; no smooth mask needed
        d, g = np.ones(len(points)), np.zeros_like(points)
    priors = Priors(lambda_e=cfg.lambda_e, tau=obs.tau)
    return ProblemSetup(cfg=cfg, mesh=mesh, bc=bc, obs=obs, priors=priors,
                        family=family, colloc=colloc, jumps=jumps,
                        displacement=displacement, points=points,
                        mask_d=d[:, None], mask_g=g,
                        n_colloc=colloc.n_points)


def init_variational_params(setup: ProblemSetup, seed: int):
    """Trainable parameter dict plus the Gamma posteriors at their warm
    state (precision means ~ 1)."""
    cfg = setup.cfg
    rng = np.random.default_rng(seed)
    params = {}
    params.update(setup.displacement.init_weights(rng))
    params.update(mlp_init("x", setup.d_z, cfg.mean_width, cfg.mean_layers,
                           setup.d_x, rng))
    params.update(mlp_init("c", setup.d_z, cfg.mean_width, cfg.mean_layers,
                           setup.d_chi, rng))
    params["mu_z"] = np.zeros(setup.d_z)
    params["log_std_z"] = np.full(setup.d_z, -2.0)
    params["L_x"] = np.zeros((setup.d_x, cfg.rank))
    params["log_sig_x"] = np.full(setup.d_x, -2.0)
    params["L_chi"] = np.zeros((setup.d_chi, cfg.rank))
    params["log_sig_chi"] = np.full(setup.d_chi, -2.0)
    a0, b0 = setup.priors.a0, setup.priors.b0
    lam = GammaPosterior(a=np.full(setup.n_colloc, a0 + 0.5),
                         b=np.full(setup.n_colloc, b0 + 0.5))
    theta = GammaPosterior(a=np.full(setup.jumps.n_jumps, a0 + 0.5),
                           b=np.full(setup.jumps.n_jumps, b0 + 0.5))
    return params, lam, theta


# ---------------------------------------------------------------------------
# reparameterized sampling


def _taped_samples(setup: ProblemSetup, leaves: dict, eps: dict):
    """Z, X, Chi tensors for one batch of standard-normal draws."""
    cfg = setup.cfg
    Z = ad.add(ad.mul(ad.exp(leaves["log_std_z"]), eps["e1"]), leaves["mu_z"])
    mu_x = mlp_forward(leaves, "x", Z, cfg.mean_layers)
    X = ad.add(mu_x, ad.add(ad.matmul(eps["e2"], ad.transpose(leaves["L_x"])),
                            ad.mul(ad.exp(leaves["log_sig_x"]), eps["e3"])))
    mu_c = mlp_forward(leaves, "c", Z, cfg.mean_layers)
    Chi = ad.add(mu_c, ad.add(ad.matmul(eps["e4"], ad.transpose(leaves["L_chi"])),
                              ad.mul(ad.exp(leaves["log_sig_chi"]), eps["e5"])))
    return Z, X, Chi


def _draw_eps(setup: ProblemSetup, L: int, rng: np.random.Generator) -> dict:
    cfg = setup.cfg
    return {"e1": rng.standard_normal((L, setup.d_z)),
            "e2": rng.standard_normal((L, cfg.rank)),
            "e3": rng.standard_normal((L, setup.d_x)),
            "e4": rng.standard_normal((L, cfg.rank)),
            "e5": rng.standard_normal((L, setup.d_chi))}


def sample_posterior(setup: ProblemSetup, params: dict, lam: GammaPosterior,
                     L: int, seed: int) -> list[LatentState]:
    """L reparameterized samples (plain arrays, no tape)."""
    Z, X, Chi = sample_posterior_arrays(setup, params, L, seed)
    lam_mean = lam.mean
    return [LatentState(z=Z[i], x=X[i], chi=Chi[i], lam_c=lam_mean)
            for i in range(L)]


def sample_posterior_arrays(setup: ProblemSetup, params: dict, L: int,
                            seed: int):
    rng = np.random.default_rng(seed)
    eps = _draw_eps(setup, L, rng)
    Z, X, Chi = _taped_samples(setup, params, eps)
    return Z.data, X.data, Chi.data


# ---------------------------------------------------------------------------
# ELBO


@dataclass
class ElboResult:
    value: float
    root: ad.Tensor                  # taped part, for backward()
    leaves: dict
    parts: dict
    rc_second_moments: np.ndarray    # (N_c,) mean over samples, 3 comps summed
    jump_second_moments: np.ndarray  # (n_jumps,)
    res_cons: float                  # scaled  sum r_w^2  estimate
    res_const: float                 # sum lam_c * E[r_c^2]
    data_fit: float                  # sum (u_hat - u)^2


def _gaussian_entropy_lowrank(L_f, log_sig, rank: int):
    """Entropy of N(., L L^T + diag(exp(2 log_sig))) via the determinant
    lemma; differentiable in both factors."""
    d = log_sig.data.shape[0]
    inv_var = ad.reshape(ad.exp(ad.mul(log_sig, -2.0)), (d, 1))
    M = ad.add(np.eye(rank), ad.matmul(ad.transpose(L_f), ad.mul(L_f, inv_var)))
    ld = ad.add(ad.mul(ad.tsum(log_sig), 2.0), ad.logdet(M))
    const = 0.5 * d * (1.0 + np.log(2.0 * np.pi))
    return ad.add(ad.mul(ld, 0.5), const)


def elbo_estimate(setup: ProblemSetup, params: dict, lam: GammaPosterior,
                  theta: GammaPosterior, K: int, L: int, rng) -> ElboResult:
    """Monte Carlo ELBO over L posterior samples with K subsampled weight
    functions; the Gamma blocks enter through their posterior means and
    closed-form KL terms."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    cfg = setup.cfg
    pri = setup.priors
    n_c = setup.n_colloc
    tape = ad.Tape()
    leaves = {k: tape.leaf(v) for k, v in params.items()}

    eps = _draw_eps(setup, L, rng)
    idx = subsample(setup.family.size, K, rng)
    Z, X, Chi = _taped_samples(setup, leaves, eps)
    X_T = ad.transpose(X)
    Chi_T = ad.transpose(Chi)

    # conservation term (Eq.-19 scaling by N_e/K)
    G_sub, b_sub = setup.family.rows(idx)
    if cfg.use_mc_integration:
        G_sub, b_sub = setup.family.mc_rows(idx, cfg.mc_points, rng)
    R_w = taped_conservation_residuals(G_sub, b_sub, Chi_T)
    scale_w = setup.family.size / K / L
    sum_rw2 = ad.mul(ad.tsum(ad.square(R_w)), scale_w)
    term_cons = ad.mul(sum_rw2, -0.5 * pri.lambda_e)

    # displacement values and gradients at all points, all samples at once
    be = setup.displacement.basis(leaves, setup.points)
    Z_T = ad.transpose(Z)
    d, g1, g2 = setup.mask_d, setup.mask_g[:, :1], setup.mask_g[:, 1:]
    U, D1U, D2U = [], [], []
    for bval, db1, db2 in ((be.b1, be.d1b1, be.d2b1), (be.b2, be.d1b2, be.d2b2)):
        raw = ad.matmul(bval, Z_T)
        U.append(ad.mul(d, raw))
        D1U.append(ad.add(ad.mul(d, ad.matmul(db1, Z_T)), ad.mul(g1, raw)))
        D2U.append(ad.add(ad.mul(d, ad.matmul(db2, Z_T)), ad.mul(g2, raw)))

    # data misfit
    obs_rows = setup.obs_rows
    du1 = ad.sub(ad.gather(U[0], obs_rows), setup.obs.values[:, 0][:, None])
    du2 = ad.sub(ad.gather(U[1], obs_rows), setup.obs.values[:, 1][:, None])
    sum_df = ad.mul(ad.add(ad.tsum(ad.square(du1)), ad.tsum(ad.square(du2))),
                    1.0 / L)
    term_data = ad.mul(sum_df, -0.5 * pri.tau)

    # constitutive residuals at the collocation rows
    rows = np.arange(n_c)
    e11 = ad.gather(D1U[0], rows)
    e22 = ad.gather(D2U[1], rows)
    e12 = ad.mul(ad.add(ad.gather(D2U[0], rows), ad.gather(D1U[1], rows)), 0.5)
    r11, r12, r22 = taped_constitutive_residuals(
        Chi_T, X_T, e11, e22, e12, n_c, cfg.nu)
    rc_sq = ad.add(ad.add(ad.square(r11), ad.square(r12)), ad.square(r22))
    m_rc = ad.mul(ad.tsum(rc_sq, axis=1), 1.0 / L)
    term_const = ad.mul(ad.tsum(ad.mul(lam.mean, m_rc)), -0.5)

    # hierarchical material prior: quadratic jump part (theta means)
    J_T = ad.sub(ad.gather(X_T, setup.jumps.lo), ad.gather(X_T, setup.jumps.hi))
    m_j = ad.mul(ad.tsum(ad.square(J_T), axis=1), 1.0 / L)
    term_xprior = ad.mul(ad.tsum(ad.mul(theta.mean, m_j)), -0.5)

    # chi prior (vague Gaussian)
    term_chiprior = ad.mul(ad.tsum(ad.square(Chi)),
                           -0.5 / (pri.chi_variance * L))

    # z block: closed-form -KL(q(z) || N(0, I))
    var_z = ad.exp(ad.mul(leaves["log_std_z"], 2.0))
    kl_z = ad.mul(ad.tsum(ad.sub(ad.add(var_z, ad.square(leaves["mu_z"])),
                                 ad.add(ad.mul(leaves["log_std_z"], 2.0), 1.0))),
                  0.5)
    term_z = ad.neg(kl_z)

    # conditional entropies (closed form, z-independent covariances)
    ent_x = _gaussian_entropy_lowrank(leaves["L_x"], leaves["log_sig_x"],
                                      cfg.rank)
    ent_chi = _gaussian_entropy_lowrank(leaves["L_chi"], leaves["log_sig_chi"],
                                        cfg.rank)

    taped_terms = {
        "conservation": term_cons,
        "constitutive": term_const,
        "data": term_data,
        "x_prior_quadratic": term_xprior,
        "chi_prior": term_chiprior,
        "z_kl": term_z,
        "x_entropy": ent_x,
        "chi_entropy": ent_chi,
    }
    root = None
    for name, t in taped_terms.items():
        if not np.all(np.isfinite(t.data)):
            raise ElboNotFiniteError(f"ELBO term '{name}' is not finite")
        root = t if root is None else ad.add(root, t)

    # constant (non-taped) pieces: Gamma KLs, mean-log-theta normalization,
    # chi prior normalization
    const_parts = {
        "x_prior_logdet": 0.5 * float(theta.mean_log().sum())
        - 0.5 * setup.jumps.n_jumps * np.log(2 * np.pi),
        "chi_prior_norm": -0.5 * setup.d_chi * np.log(2 * np.pi
                                                      * pri.chi_variance),
        "lambda_c_kl": -lam.kl_to_prior(pri.a0, pri.b0),
        "theta_kl": -theta.kl_to_prior(pri.a0, pri.b0),
    }
    for name, v in const_parts.items():
        if not np.isfinite(v):
            raise ElboNotFiniteError(f"ELBO term '{name}' is not finite")

    parts = {k: float(v.data) for k, v in taped_terms.items()}
    parts.update(const_parts)
    value = float(root.data) + sum(const_parts.values())
    return ElboResult(
        value=value, root=root, leaves=leaves, parts=parts,
        rc_second_moments=m_rc.data.copy(),
        jump_second_moments=m_j.data.copy(),
        res_cons=float(sum_rw2.data),
        res_const=float(np.sum(lam.mean * m_rc.data)),
        data_fit=float(sum_df.data))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: dict
    lam: GammaPosterior
    theta: GammaPosterior
    trace: np.ndarray        # rows: iter, elbo, res_cons, res_const, data_fit
    setup: ProblemSetup
    iterations: int
    converged: bool
    state: AdamState | None = None
    rng: np.random.Generator | None = None


def train(cfg: RunConfig, obs: ObservationGrid, max_iters: int | None = None,
          progress=None) -> TrainResult:
    """SVI loop: per iteration draw K weight functions and L samples,
    ascend the ELBO with ADAM, then refresh the Gamma posteriors in closed
    form (after the warm-up window, during which their means stay 1)."""
    setup = build_setup(cfg, obs)
    params, lam, theta = init_variational_params(setup, cfg.seed)
    state = adam_init(params, learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 1)
    iters = cfg.max_iters if max_iters is None else max_iters

    trace = []
    window, prev_window = [], None
    converged = False
    worse_count = 0
    t = 0
    for t in range(iters):
        res = elbo_estimate(setup, params, lam, theta, cfg.K, cfg.L, rng)
        grads = backward(res.root)
        adam_step(params, {k: grads[v] for k, v in res.leaves.items()}, state)
        if t >= cfg.warmup_iters:
            lam = update_lambda_c(lam, res.rc_second_moments,
                                  setup.priors.a0, setup.priors.b0)
            theta = update_theta(theta, res.jump_second_moments,
                                 setup.priors.a0, setup.priors.b0)
        if t % cfg.trace_every == 0 or t == iters - 1:
            trace.append((t, res.value, res.res_cons, res.res_const,
                          res.data_fit))
            if progress is not None:
                progress(t, res)
        window.append(res.value)
        if len(window) >= cfg.convergence_window:
            mean = float(np.mean(window))
            window = []
            if prev_window is not None:
                denom = max(abs(prev_window), 1e-12)
                if abs(mean - prev_window) / denom < cfg.convergence_tol:
                    converged = True
                if mean < prev_window:
                    worse_count += 1
                    if worse_count >= 10:
                        warnings.warn(
                            "ELBO worsened over 10 consecutive windows",
                            RuntimeWarning)
                        worse_count = 0
                else:
                    worse_count = 0
            prev_window = mean
            if converged:
                break
    return TrainResult(params=params, lam=lam, theta=theta,
                       trace=np.array(trace), setup=setup,
                       iterations=t + 1, converged=converged,
                       state=state, rng=rng)


# ---------------------------------------------------------------------------
# checkpointing

_CKPT_VERSION = 1


def save_checkpoint(path, cfg: RunConfig, params: dict, lam: GammaPosterior,
                    theta: GammaPosterior, state: AdamState,
                    rng: np.random.Generator | None, iteration: int) -> None:
    """Versioned binary checkpoint: parameters, Gamma blocks, optimizer
    moments, RNG state; round-trips bit-exactly."""
    meta = {
        "version": _CKPT_VERSION,
        "iteration": iteration,
        "config_hash": config_hash(cfg),
        "adam": {"learning_rate": state.learning_rate, "beta1": state.beta1,
                 "beta2": state.beta2, "eps": state.eps, "step": state.step},
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "param_keys": sorted(params.keys()),
    }
    arrays = {f"p.{k}": v for k, v in params.items()}
    arrays.update({f"m.{k}": state.first_moment[k] for k in params})
    arrays.update({f"v.{k}": state.second_moment[k] for k in params})
    arrays["lam.a"], arrays["lam.b"] = lam.a, lam.b
    arrays["theta.a"], arrays["theta.b"] = theta.a, theta.b
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                   dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Returns (meta, params, lam, theta, adam_state, rng)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        params = {k: data[f"p.{k}"] for k in meta["param_keys"]}
        state = adam_init(params, **{k: meta["adam"][k] for k in
                                     ("learning_rate", "beta1", "beta2", "eps")})
        state.step = meta["adam"]["step"]
        for k in params:
            state.first_moment[k] = data[f"m.{k}"]
            state.second_moment[k] = data[f"v.{k}"]
        lam = GammaPosterior(a=data["lam.a"], b=data["lam.b"])
        theta = GammaPosterior(a=data["theta.a"], b=data["theta.b"])
        rng = None
        if meta["rng_state"] is not None:
            rng = np.random.default_rng()
            rng.bit_generator.state = meta["rng_state"]
    return meta, params, lam, theta, state, rng
