"""Reverse-mode engine and ADAM optimizer tests."""

import numpy as np
import pytest

from wnvi import autodiff as ad
from wnvi.autodiff import (
    DomainError,
    ShapeError,
    Tape,
    adam_init,
    adam_step,
    backward,
)

from graphgen import ALL_OPS, fd_gradients, make_program, run_program


class TestForwardOps:
    def test_sigmoid_at_zero(self):
        assert float(ad.sigmoid(0.0).data) == 0.5

    def test_silu_at_zero(self):
        assert float(ad.silu(0.0).data) == 0.0

    def test_matmul_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(ad.Tensor(a), np.eye(2))
        np.testing.assert_array_equal(out.data, a)

    def test_matmul_vector_cases(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(3, 4))
        v = rng.normal(size=4)
        w = rng.normal(size=3)
        np.testing.assert_allclose(ad.matmul(m, v).data, m @ v)
        np.testing.assert_allclose(ad.matmul(w, m).data, w @ m)

    def test_gather_concat_reshape_transpose(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(4, 2))
        np.testing.assert_array_equal(ad.gather(a, [2, 0]).data, a[[2, 0]])
        np.testing.assert_array_equal(
            ad.concat([ad.Tensor(a), ad.Tensor(a)], axis=0).data,
            np.concatenate([a, a]))
        np.testing.assert_array_equal(ad.reshape(a, (2, 4)).data, a.reshape(2, 4))
        np.testing.assert_array_equal(ad.transpose(a).data, a.T)

    def test_logdet(self):
        rng = np.random.default_rng(2)
        m = rng.normal(size=(3, 3))
        spd = m @ m.T + np.eye(3)
        assert float(ad.logdet(spd).data) == pytest.approx(
            np.linalg.slogdet(spd)[1])

    def test_log_domain_error(self):
        with pytest.raises(DomainError):
            ad.log(np.array([1.0, -1.0]))

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            ad.add(np.ones((2, 3)), np.ones((4, 5)))
        with pytest.raises(ShapeError):
            ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestBackward:
    def test_polynomial(self):
        tape = Tape()
        x = tape.leaf(3.0)
        y = ad.square(x)
        assert float(backward(y)[x]) == pytest.approx(6.0)

    def test_tanh_chain_vs_fd(self):
        rng = np.random.default_rng(7)
        W = rng.normal(size=(3, 3))
        x0 = rng.normal(size=3)
        tape = Tape()
        x = tape.leaf(x0)
        y = ad.tsum(ad.tanh(ad.matmul(W, x)))
        g = backward(y)[x]
        h = 1e-6
        fd = np.zeros(3)
        for k in range(3):
            for sign in (1, -1):
                xp = x0.copy()
                xp[k] += sign * h
                fd[k] += sign * np.sum(np.tanh(W @ xp)) / (2 * h)
        np.testing.assert_allclose(g, fd, rtol=1e-6)

    def test_unreachable_leaf_gets_zeros(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        y = tape.leaf(2.0)
        out = ad.square(y)
        g = backward(out)
        np.testing.assert_array_equal(g[x], np.zeros(3))

    def test_nonscalar_root_rejected(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(ValueError):
            backward(ad.square(x))

    def test_backward_twice_identical(self):
        tape = Tape()
        x = tape.leaf(np.array([1.0, 2.0]))
        y = ad.tsum(ad.exp(ad.mul(x, 0.5)))
        g1 = backward(y)[x]
        g2 = backward(y)[x]
        np.testing.assert_array_equal(g1, g2)

    def test_mixed_tapes_rejected(self):
        t1, t2 = Tape(), Tape()
        with pytest.raises(ValueError):
            ad.add(t1.leaf(1.0), t2.leaf(2.0))

    def test_shared_subexpression_accumulates(self):
        # d/dx (x*x + x) = 2x + 1
        tape = Tape()
        x = tape.leaf(4.0)
        y = ad.add(ad.mul(x, x), x)
        assert float(backward(y)[x]) == pytest.approx(9.0)


class TestRandomGraphs:
    def test_fifty_graphs_match_finite_differences(self):
        ops_seen = set()
        for seed in range(50):
            leaf_values, steps = make_program(seed)
            ops_seen.update(op for op, _, _ in steps)
            root, leaves = run_program(leaf_values, steps)
            grads = backward(root)
            fd = fd_gradients(leaf_values, steps)
            for leaf, want in zip(leaves, fd):
                np.testing.assert_allclose(grads[leaf], want,
                                           rtol=1e-5, atol=1e-8)
        assert ops_seen == set(ALL_OPS)


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        params = {"w": np.array([1.0, -2.0])}
        state = adam_init(params, learning_rate=0.1)
        before = params["w"].copy()
        adam_step(params, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(params["w"], before)

    def test_first_step_magnitude_is_learning_rate(self):
        # bias correction makes the first update rho * g/|g| up to eps
        params = {"w": np.zeros(3)}
        g = np.array([0.4, -2.0, 1e3])
        state = adam_init(params, learning_rate=1e-4)
        adam_step(params, {"w": g.copy()}, state)
        np.testing.assert_allclose(params["w"], 1e-4 * np.sign(g), rtol=1e-6)

    def test_ascends_quadratic(self):
        # maximize -(w-3)^2: gradient ascent must move w toward 3
        params = {"w": np.array([0.0])}
        state = adam_init(params, learning_rate=0.05)
        for _ in range(400):
            grad = -2.0 * (params["w"] - 3.0)
            adam_step(params, {"w": grad}, state)
        assert abs(params["w"][0] - 3.0) < 0.05

    def test_shape_mismatch(self):
        params = {"w": np.zeros(3)}
        state = adam_init(params)
        with pytest.raises(ShapeError):
            adam_step(params, {"w": np.zeros(4)}, state)

    def test_default_learning_rate(self):
        assert adam_init({}).learning_rate == 1e-4
