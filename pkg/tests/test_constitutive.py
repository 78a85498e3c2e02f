"""Constitutive law tests: value oracles, reductions, differentiability."""

import numpy as np
import pytest

from wnvi import autodiff as ad
from wnvi.constitutive import (
    DegenerateMaterialError,
    InvertedElementError,
    IsoParams,
    KinematicState,
    TransIsoParams,
    lame_parameters,
    linear_iso_stress_components,
    linear_isotropic_stress,
    transiso_constants,
    transiso_stress,
    transiso_stress_components,
)

# inclusion material of the synthetic experiment
INCLUSION = dict(E=1.0, E_a=3.0, nu=0.3, G_a=1.154)


class TestLinearIsotropic:
    def test_zero_strain_zero_stress(self):
        p = IsoParams(E=2.0, nu=0.3)
        np.testing.assert_array_equal(
            linear_isotropic_stress(np.zeros((2, 2)), p), np.zeros((2, 2)))

    def test_uniaxial_strain_values(self):
        p = IsoParams(E=1.0, nu=0.3)
        lam = 0.3 / (0.4 * 1.3)
        mu = 1.0 / 2.6
        s = linear_isotropic_stress(np.diag([0.01, 0.0]), p)
        assert lam == pytest.approx(0.576923076923077)
        assert mu == pytest.approx(0.384615384615385)
        assert s[0, 0] == pytest.approx(lam * 0.01 + 2 * mu * 0.01)
        assert s[1, 1] == pytest.approx(lam * 0.01)
        assert s[0, 1] == 0.0

    def test_linear_in_modulus(self):
        g = np.array([[0.01, 0.002], [-0.003, 0.005]])
        s1 = linear_isotropic_stress(g, IsoParams(E=1.0, nu=0.3))
        s2 = linear_isotropic_stress(g, IsoParams(E=2.0, nu=0.3))
        np.testing.assert_allclose(s2, 2.0 * s1, rtol=1e-15)

    def test_superposition_machine_precision(self):
        rng = np.random.default_rng(4)
        p = IsoParams(E=1.7, nu=0.25)
        g1, g2 = rng.normal(size=(2, 2, 2)) * 0.01
        a, b = 1.3, -0.4
        lhs = linear_isotropic_stress(a * g1 + b * g2, p)
        rhs = a * linear_isotropic_stress(g1, p) + b * linear_isotropic_stress(g2, p)
        np.testing.assert_allclose(lhs, rhs, atol=1e-17)

    def test_symmetric_by_construction(self):
        g = np.array([[0.01, 0.03], [-0.02, 0.005]])
        s = linear_isotropic_stress(g, IsoParams(E=1.0, nu=0.3))
        assert s[0, 1] == s[1, 0]

    def test_invalid_poisson(self):
        with pytest.raises(ValueError):
            IsoParams(E=1.0, nu=0.5)


class TestTransIsoConstants:
    def test_experiment_parameter_chain(self):
        c = transiso_constants(TransIsoParams(**INCLUSION))
        assert c.n == pytest.approx(3.0, abs=1e-12)
        assert c.m == pytest.approx(0.16, abs=1e-12)
        assert c.lam == pytest.approx(2.740384615384615, abs=1e-6)
        assert c.mu == pytest.approx(0.384615384615385, abs=1e-6)
        assert c.alpha == pytest.approx(-0.769384615384615, abs=1e-6)
        assert c.beta == pytest.approx(-0.216346153846154, abs=1e-6)
        assert c.gamma == pytest.approx(1.033576923076923, abs=1e-6)

    def test_isotropic_reduction(self):
        nu = 0.3
        mu = 1.0 / (2 * (1 + nu))
        c = transiso_constants(TransIsoParams(E=1.0, E_a=1.0, nu=nu, G_a=mu))
        assert c.n == 1.0
        assert c.beta == pytest.approx(0.0, abs=1e-15)
        assert c.alpha == pytest.approx(0.0, abs=1e-15)
        assert c.gamma == pytest.approx(0.0, abs=1e-15)

    def test_modulus_ratio_scale_invariant(self):
        c1 = transiso_constants(TransIsoParams(E=1.0, E_a=3.0, nu=0.3, G_a=1.0))
        c2 = transiso_constants(TransIsoParams(E=7.0, E_a=21.0, nu=0.3, G_a=1.0))
        assert c1.n == c2.n == 3.0

    def test_degenerate_m_rejected(self):
        # m = 1 - nu - 2 n nu^2 = 0 at nu=0.4, n=1.875
        with pytest.raises(DegenerateMaterialError):
            transiso_constants(_raw_params(E=1.0, E_a=1.875, nu=0.4, G_a=1.0))


def _raw_params(**kw):
    """TransIsoParams without validation, for degenerate-chain tests."""
    p = object.__new__(TransIsoParams)
    object.__setattr__(p, "E", kw["E"])
    object.__setattr__(p, "E_a", kw["E_a"])
    object.__setattr__(p, "nu", kw["nu"])
    object.__setattr__(p, "G_a", kw["G_a"])
    object.__setattr__(p, "a", kw.get("a", (1.0, 0.0)))
    return p


class TestTransIsoStress:
    def test_zero_at_reference(self):
        p = TransIsoParams(**INCLUSION)
        s = transiso_stress(np.zeros((2, 2)), p)
        np.testing.assert_array_equal(s, np.zeros((2, 2)))

    def test_small_strain_matches_linear_law(self):
        nu = 0.3
        mu = 1.0 / (2 * (1 + nu))
        p = TransIsoParams(E=1.0, E_a=1.0, nu=nu, G_a=mu)
        rng = np.random.default_rng(9)
        g = rng.normal(size=(2, 2))
        g *= 1e-4 / np.linalg.norm(g)
        s_t = transiso_stress(g, p)
        s_l = linear_isotropic_stress(g, IsoParams(E=1.0, nu=nu))
        np.testing.assert_allclose(s_t, s_l, atol=1e-8)

    def test_second_order_convergence_to_linear(self):
        nu = 0.3
        mu = 1.0 / (2 * (1 + nu))
        p = TransIsoParams(E=1.0, E_a=1.0, nu=nu, G_a=mu)
        rng = np.random.default_rng(10)
        g0 = rng.normal(size=(2, 2))
        g0 /= np.linalg.norm(g0)

        def err(scale):
            g = scale * g0
            return np.max(np.abs(
                transiso_stress(g, p)
                - linear_isotropic_stress(g, IsoParams(E=1.0, nu=nu))))

        ratios = [err(s) / err(s / 2) for s in (1e-2, 5e-3, 2.5e-3)]
        for r in ratios:
            assert 3.5 < r < 4.5

    def test_stiff_axis_dominates_pure_stretch(self):
        p = TransIsoParams(a=(1.0, 0.0), **INCLUSION)
        g = np.diag([0.01, 0.0])
        s = transiso_stress(g, p)
        assert s[0, 0] > s[1, 1] > 0

    def test_axis_sign_invariance(self):
        g = np.array([[0.02, 0.01], [-0.015, 0.03]])
        sp = transiso_stress(g, TransIsoParams(a=(1.0, 0.0), **INCLUSION))
        sm = transiso_stress(g, TransIsoParams(a=(-1.0, 0.0), **INCLUSION))
        np.testing.assert_array_equal(sp, sm)

    def test_inverted_element_rejected(self):
        p = TransIsoParams(**INCLUSION)
        with pytest.raises(InvertedElementError):
            transiso_stress(np.diag([-1.5, 0.0]), p)

    def test_kinematic_state_invariants(self):
        k = KinematicState(np.zeros((2, 2)))
        assert k.J == 1.0 and k.I1 == 2.0 and k.I4 == 1.0
        np.testing.assert_array_equal(k.B, np.eye(2))


class TestDifferentiability:
    def _fd(self, f, x0, h=1e-6):
        g = np.zeros_like(x0)
        for k in range(x0.size):
            for sign in (1, -1):
                x = x0.copy()
                x.reshape(-1)[k] += sign * h
                g.reshape(-1)[k] += sign * f(x) / (2 * h)
        return g

    def test_linear_iso_grad_wrt_strain_and_modulus(self):
        nu = 0.3
        x0 = np.array([0.01, -0.005, 0.003, 0.8])  # e11, e22, e12, E

        def taped(x):
            tape = ad.Tape()
            leaves = [tape.leaf(v) for v in x]
            s11, s12, s22 = linear_iso_stress_components(
                leaves[0], leaves[1], leaves[2], leaves[3], nu)
            root = ad.add(ad.add(s11, ad.mul(s12, 2.0)), ad.square(s22))
            return root, leaves

        root, leaves = taped(x0)
        grads = ad.backward(root)
        got = np.array([float(grads[l]) for l in leaves])
        want = self._fd(lambda x: float(taped(x)[0].data), x0)
        np.testing.assert_allclose(got, want, rtol=1e-5)

    def test_transiso_grad_wrt_grad_u(self):
        c = transiso_constants(TransIsoParams(**INCLUSION))
        x0 = np.array([0.02, 0.01, -0.015, 0.03])

        def taped(x):
            tape = ad.Tape()
            leaves = [tape.leaf(v) for v in x]
            s11, s12, s22 = transiso_stress_components(
                leaves[0], leaves[1], leaves[2], leaves[3], c, (1.0, 0.0))
            root = ad.add(ad.add(s11, s22), ad.square(s12))
            return root, leaves

        root, leaves = taped(x0)
        grads = ad.backward(root)
        got = np.array([float(grads[l]) for l in leaves])
        want = self._fd(lambda x: float(taped(x)[0].data), x0)
        np.testing.assert_allclose(got, want, rtol=1e-5)


class TestLameParameters:
    def test_batched_modulus(self):
        E = np.array([1.0, 2.0, 0.5])
        lam, mu = lame_parameters(E, 0.3)
        np.testing.assert_allclose(lam, E * 0.3 / (0.4 * 1.3))
        np.testing.assert_allclose(mu, E / 2.6)
