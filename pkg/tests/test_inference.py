"""Variational machinery tests: sampling, ELBO, conjugate updates, training."""

import numpy as np
import pytest

from wnvi.autodiff import backward
from wnvi.config import RunConfig
from wnvi.constitutive import IsoParams
from wnvi.forward import make_material_map, sample_observations, \
    solve_ground_truth, make_bc
from wnvi.inference import (
    ElboNotFiniteError,
    GammaPosterior,
    Priors,
    build_setup,
    elbo_estimate,
    init_variational_params,
    load_checkpoint,
    mlp_forward,
    sample_posterior,
    sample_posterior_arrays,
    save_checkpoint,
    train,
    update_lambda_c,
    update_theta,
)
from wnvi.mesh import ObservationGrid, build_grid
from wnvi.autodiff import adam_init, adam_step


def tiny_config(**kw) -> RunConfig:
    base = dict(inversion_n=3, truth_n=5, obs_n=4, d_z=4, u_width=8, u_depth=2,
                K=4, L=2, mean_width=8, mean_layers=1, rank=2, max_iters=30,
                warmup_iters=10, trace_every=5, lambda_e=1e4, seed=0,
                noise_percent=1.0)
    base.update(kw)
    return RunConfig(**base)


def tiny_observations(cfg, seed=0) -> ObservationGrid:
    mesh = build_grid(cfg.truth_n)
    mat = make_material_map(mesh, IsoParams(cfg.background_E, cfg.nu),
                            inclusion=None)
    bc = make_bc(mesh, fixed_edges=cfg.fixed_edges,
                 traction_edge=cfg.traction_edge, traction=cfg.traction)
    gt = solve_ground_truth(mesh, mat, bc)
    from wnvi.forward import default_tau
    return sample_observations(gt, cfg.obs_n, default_tau(gt, cfg.noise_percent),
                               seed=seed)


class TestGammaUpdates:
    def test_zero_residual_limit(self):
        lam = update_lambda_c(GammaPosterior(np.ones(3), np.ones(3)),
                              np.zeros(3), a0=1e-8, b0=1e-8)
        np.testing.assert_array_equal(lam.a, 1e-8 + 0.5)
        np.testing.assert_array_equal(lam.b, 1e-8)
        np.testing.assert_allclose(lam.mean, 5e7 * (1 + 2e-8))

    def test_unit_second_moment(self):
        lam = update_lambda_c(GammaPosterior(np.ones(1), np.ones(1)),
                              np.array([1.0]), a0=1e-8, b0=1e-8)
        assert lam.b[0] == 0.5 + 1e-8
        assert lam.mean[0] == pytest.approx(1.0, abs=1e-12)

    def test_mean_strictly_decreasing_in_moment(self):
        moments = np.linspace(0.0, 5.0, 20)
        lam = update_lambda_c(GammaPosterior(np.ones(20), np.ones(20)),
                              moments, a0=1e-8, b0=1e-8)
        assert np.all(np.diff(lam.mean) < 0)

    def test_theta_update_formula(self):
        theta = update_theta(GammaPosterior(np.ones(2), np.ones(2)),
                             np.array([0.0, 4.0]), a0=1e-8, b0=1e-8)
        np.testing.assert_array_equal(theta.a, 1e-8 + 0.5)
        np.testing.assert_array_equal(theta.b, [1e-8, 2.0 + 1e-8])
        # large jump -> precision mean ~ 1 / E[J^2]
        assert theta.mean[1] == pytest.approx(0.25, rel=1e-6)

    def test_constant_field_symmetric_updates(self):
        m = np.full(5, 0.3)
        theta = update_theta(GammaPosterior(np.ones(5), np.ones(5)), m,
                             a0=1e-8, b0=1e-8)
        assert np.all(theta.a == theta.a[0]) and np.all(theta.b == theta.b[0])

    def test_negative_moment_rejected(self):
        with pytest.raises(ValueError):
            update_lambda_c(GammaPosterior(np.ones(1), np.ones(1)),
                            np.array([-1e-3]), 1e-8, 1e-8)
        with pytest.raises(ValueError):
            update_theta(GammaPosterior(np.ones(1), np.ones(1)),
                         np.array([-1e-3]), 1e-8, 1e-8)


class TestSampling:
    def _setup(self, **kw):
        cfg = tiny_config(**kw)
        obs = tiny_observations(cfg)
        setup = build_setup(cfg, obs)
        params, lam, theta = init_variational_params(setup, cfg.seed)
        return setup, params, lam, theta

    def test_degenerate_variances_are_deterministic(self):
        setup, params, lam, _ = self._setup()
        for k in ("log_std_z", "log_sig_x", "log_sig_chi"):
            params[k] = np.full_like(params[k], -40.0)
        s1 = sample_posterior(setup, params, lam, L=3, seed=1)
        s2 = sample_posterior(setup, params, lam, L=3, seed=2)
        np.testing.assert_allclose(s1[0].x, s2[1].x, atol=1e-12)
        np.testing.assert_allclose(s1[0].chi, s2[2].chi, atol=1e-12)
        # and the mean equals the network applied to mu_z
        mu_x = mlp_forward(params, "x", params["mu_z"][None, :],
                           setup.cfg.mean_layers).data[0]
        np.testing.assert_allclose(s1[0].x, mu_x, atol=1e-12)

    def test_sample_mean_matches_conditional_mean(self):
        setup, params, lam, _ = self._setup()
        rng = np.random.default_rng(3)
        params["L_x"] = rng.normal(size=params["L_x"].shape) * 0.3
        params["log_std_z"] = np.full_like(params["log_std_z"], -40.0)  # fix z
        n = 10_000
        _, X, _ = sample_posterior_arrays(setup, params, n, seed=4)
        mu_x = mlp_forward(params, "x", params["mu_z"][None, :],
                           setup.cfg.mean_layers).data[0]
        se = X.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(X.mean(axis=0) - mu_x) < 3 * se + 1e-12)

    def test_sample_covariance_matches_lowrank_structure(self):
        setup, params, lam, _ = self._setup()
        rng = np.random.default_rng(5)
        params["L_x"] = rng.normal(size=params["L_x"].shape) * 0.5
        params["log_sig_x"] = rng.normal(size=params["log_sig_x"].shape) * 0.2
        params["log_std_z"] = np.full_like(params["log_std_z"], -40.0)
        n = 100_000
        _, X, _ = sample_posterior_arrays(setup, params, n, seed=6)
        S_want = (params["L_x"] @ params["L_x"].T
                  + np.diag(np.exp(2 * params["log_sig_x"])))
        S_got = np.cov(X.T)
        rel = np.linalg.norm(S_got - S_want) / np.linalg.norm(S_want)
        assert rel < 0.10


class TestElbo:
    def test_seed_pinned_reproducible(self):
        cfg = tiny_config()
        obs = tiny_observations(cfg)
        setup = build_setup(cfg, obs)
        params, lam, theta = init_variational_params(setup, cfg.seed)
        a = elbo_estimate(setup, params, lam, theta, cfg.K, cfg.L, rng=7)
        b = elbo_estimate(setup, params, lam, theta, cfg.K, cfg.L, rng=7)
        assert a.value == b.value

    def test_doubling_lambda_e_doubles_conservation_term(self):
        cfg = tiny_config()
        obs = tiny_observations(cfg)
        setup = build_setup(cfg, obs)
        params, lam, theta = init_variational_params(setup, cfg.seed)
        r1 = elbo_estimate(setup, params, lam, theta, cfg.K, cfg.L, rng=8)
        setup.priors = Priors(lambda_e=2 * cfg.lambda_e, tau=obs.tau)
        r2 = elbo_estimate(setup, params, lam, theta, cfg.K, cfg.L, rng=8)
        assert r2.parts["conservation"] == pytest.approx(
            2 * r1.parts["conservation"], rel=1e-12)

    def test_interpolating_displacement_zeroes_data_term(self):
        cfg = tiny_config()
        obs = tiny_observations(cfg)
        setup = build_setup(cfg, obs)
        params, lam, theta = init_variational_params(setup, cfg.seed)
        for k in ("log_std_z", "log_sig_x", "log_sig_chi"):
            params[k] = np.full_like(params[k], -40.0)
        # overwrite observations with the deterministic posterior prediction
        be = setup.displacement.basis(params, setup.obs.points)
        d, _ = __import__("wnvi.fields", fromlist=["dirichlet_mask"]) \
            .dirichlet_mask(setup.obs.points, cfg.fixed_edges)
        u1 = d * (be.b1.data @ params["mu_z"])
        u2 = d * (be.b2.data @ params["mu_z"])
        setup.obs = ObservationGrid(points=setup.obs.points,
                                    values=np.column_stack([u1, u2]),
                                    tau=setup.obs.tau)
        res = elbo_estimate(setup, params, lam, theta, cfg.K, cfg.L, rng=9)
        assert abs(res.parts["data"]) < 1e-12 * setup.priors.tau
        assert res.data_fit < 1e-20

    def test_manufactured_equilibrium_state(self):
        # FE displacement basis + zero-weight mean nets let the exact FEM
        # solution be planted; both residual families must then vanish
        cfg = tiny_config(displacement_basis="fe", inversion_n=3, lambda_e=1e6)
        obs = tiny_observations(cfg)
        setup = build_setup(cfg, obs)
        params, lam, theta = init_variational_params(setup, cfg.seed)

        mesh, bc = setup.mesh, setup.bc
        from wnvi.forward import solve_displacement, element_displacement_gradient
        u = solve_displacement(mesh, cfg.background_E, cfg.nu, bc)
        fe = setup.displacement
        nf = len(fe.free_nodes)
        z_star = np.concatenate([u[fe.free_nodes, 0], u[fe.free_nodes, 1]])
        g = element_displacement_gradient(mesh, u)
        from wnvi.constitutive import linear_iso_stress_components
        s11, s12, s22 = linear_iso_stress_components(
            g[:, 0, 0], g[:, 1, 1], 0.5 * (g[:, 0, 1] + g[:, 1, 0]),
            cfg.background_E, cfg.nu)
        chi_star = np.concatenate([s11, s12, s22])
        x_star = np.full(mesh.n_elements, np.log(cfg.background_E))

        # plant the state: zero hidden weights make the nets constant biases
        for k in params:
            if k.startswith(("x.", "c.")):
                params[k] = np.zeros_like(params[k])
        params["x.b1"] = x_star.copy()
        params["c.b1"] = chi_star.copy()
        params["mu_z"] = z_star
        for k in ("log_std_z", "log_sig_x", "log_sig_chi"):
            params[k] = np.full_like(params[k], -40.0)

        res = elbo_estimate(setup, params, lam, theta,
                            setup.family.size, 2, rng=10)
        assert res.res_cons < 1e-18
        assert res.res_const < 1e-18
        # ELBO is then dominated by the prior/entropy block
        kl_block = sum(abs(res.parts[k]) for k in
                       ("z_kl", "x_entropy", "chi_entropy"))
        assert kl_block > 10 * (abs(res.parts["conservation"])
                                + abs(res.parts["constitutive"]))

    def test_nonfinite_raises_with_term_name(self):
        cfg = tiny_config()
        obs = tiny_observations(cfg)
        setup = build_setup(cfg, obs)
        params, lam, theta = init_variational_params(setup, cfg.seed)
        params["mu_z"] = np.full_like(params["mu_z"], np.nan)
        with pytest.raises(ElboNotFiniteError):
            elbo_estimate(setup, params, lam, theta, cfg.K, cfg.L, rng=0)


class TestElboGradients:
    def test_twenty_random_parameters_match_finite_differences(self):
        cfg = tiny_config()
        obs = tiny_observations(cfg)
        setup = build_setup(cfg, obs)
        params, lam, theta = init_variational_params(setup, cfg.seed)
        # move off the all-zeros init so every path carries signal
        rng = np.random.default_rng(11)
        params["L_x"] += rng.normal(size=params["L_x"].shape) * 0.1
        params["L_chi"] += rng.normal(size=params["L_chi"].shape) * 0.1
        params["mu_z"] += rng.normal(size=params["mu_z"].shape) * 0.3

        res = elbo_estimate(setup, params, lam, theta, cfg.K, cfg.L, rng=12)
        grads = backward(res.root)

        keys = sorted(params.keys())
        picks = []
        while len(picks) < 20:
            k = keys[rng.integers(0, len(keys))]
            picks.append((k, int(rng.integers(0, params[k].size))))

        h = 1e-5
        for k, flat in picks:
            fd = 0.0
            for sign in (1, -1):
                p2 = {kk: vv.copy() for kk, vv in params.items()}
                p2[k].reshape(-1)[flat] += sign * h
                r2 = elbo_estimate(setup, p2, lam, theta, cfg.K, cfg.L, rng=12)
                fd += sign * float(r2.root.data) / (2 * h)
            got = grads[res.leaves[k]].reshape(-1)[flat]
            assert got == pytest.approx(fd, rel=1e-4, abs=2e-6), (k, flat)


class TestClosedFormsAgainstMonteCarlo:
    def test_z_kl_matches_sampling(self):
        rng = np.random.default_rng(13)
        mu = rng.normal(size=4) * 0.5
        log_std = rng.normal(size=4) * 0.3
        std = np.exp(log_std)
        kl_closed = 0.5 * np.sum(std**2 + mu**2 - 1 - 2 * log_std)
        zs = mu + std * rng.standard_normal((100_000, 4))
        log_q = -0.5 * np.sum(((zs - mu) / std) ** 2
                              + np.log(2 * np.pi) + 2 * log_std, axis=1)
        log_p = -0.5 * np.sum(zs ** 2 + np.log(2 * np.pi), axis=1)
        kl_mc = float(np.mean(log_q - log_p))
        assert kl_mc == pytest.approx(kl_closed, rel=0.01)

    def test_lowrank_entropy_matches_sampling(self):
        from wnvi.inference import _gaussian_entropy_lowrank
        from wnvi import autodiff as ad
        rng = np.random.default_rng(14)
        d, r = 6, 2
        Lf = rng.normal(size=(d, r)) * 0.7
        log_sig = rng.normal(size=d) * 0.2
        ent = float(_gaussian_entropy_lowrank(
            ad.Tensor(Lf), ad.Tensor(log_sig), r).data)
        S = Lf @ Lf.T + np.diag(np.exp(2 * log_sig))
        n = 100_000
        xs = (rng.standard_normal((n, r)) @ Lf.T
              + np.exp(log_sig) * rng.standard_normal((n, d)))
        Sinv = np.linalg.inv(S)
        logdet = np.linalg.slogdet(S)[1]
        log_q = -0.5 * (np.einsum("ni,ij,nj->n", xs, Sinv, xs)
                        + d * np.log(2 * np.pi) + logdet)
        assert -float(log_q.mean()) == pytest.approx(ent, rel=0.01)


class TestTraining:
    def test_deterministic_trace(self):
        cfg = tiny_config(max_iters=20)
        obs = tiny_observations(cfg)
        r1 = train(cfg, obs)
        r2 = train(cfg, obs)
        np.testing.assert_array_equal(r1.trace, r2.trace)
        for k in r1.params:
            np.testing.assert_array_equal(r1.params[k], r2.params[k])

    def test_trace_columns(self):
        cfg = tiny_config(max_iters=12, trace_every=4)
        obs = tiny_observations(cfg)
        r = train(cfg, obs)
        assert r.trace.shape[1] == 5
        assert r.trace[0, 0] == 0 and r.trace[-1, 0] == 11

    def test_prior_only_training_shrinks_z_kl(self):
        cfg = tiny_config(max_iters=1, warmup_iters=10**9, learning_rate=1e-2)
        obs = tiny_observations(cfg)
        setup = build_setup(cfg, obs)
        setup.priors = Priors(lambda_e=0.0, tau=0.0)
        params, lam, theta = init_variational_params(setup, cfg.seed)
        off = GammaPosterior(a=lam.a * 0 + 1.0, b=lam.b * 0 + 1e30)
        lam = GammaPosterior(a=off.a.copy(), b=off.b.copy())
        theta = GammaPosterior(a=np.ones(setup.jumps.n_jumps),
                               b=np.full(setup.jumps.n_jumps, 1e30))

        def z_kl(p):
            std2 = np.exp(2 * p["log_std_z"])
            return 0.5 * np.sum(std2 + p["mu_z"]**2 - 1 - 2 * p["log_std_z"])

        state = adam_init(params, learning_rate=1e-2)
        kl0 = z_kl(params)
        rng = np.random.default_rng(1)
        for _ in range(300):
            res = elbo_estimate(setup, params, lam, theta, cfg.K, cfg.L, rng)
            grads = backward(res.root)
            adam_step(params, {k: grads[v] for k, v in res.leaves.items()},
                      state)
        assert z_kl(params) < kl0

    def test_checkpoint_roundtrip(self, tmp_path):
        cfg = tiny_config(max_iters=8)
        obs = tiny_observations(cfg)
        r = train(cfg, obs)
        state = adam_init(r.params, learning_rate=cfg.learning_rate)
        rng = np.random.default_rng(5)
        rng.standard_normal(10)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, cfg, r.params, r.lam, r.theta, state, rng, 8)
        meta, params, lam, theta, state2, rng2 = load_checkpoint(path)
        assert meta["iteration"] == 8
        for k in r.params:
            np.testing.assert_array_equal(params[k], r.params[k])
        np.testing.assert_array_equal(lam.a, r.lam.a)
        np.testing.assert_array_equal(lam.b, r.lam.b)
        np.testing.assert_array_equal(theta.b, r.theta.b)
        assert state2.step == state.step
        # restored rng continues the exact stream
        np.testing.assert_array_equal(rng2.standard_normal(5),
                                      np.random.default_rng(5).standard_normal(15)[10:])
