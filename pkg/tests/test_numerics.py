import numpy as np
import pytest

from topiccap import numerics as nm
from topiccap.numerics import Tensor, apply_activation, backward, grad_check


class TestActivations:
    def test_sigmoid_fixed_points(self):
        assert nm.sigmoid(np.array(0.0)) == 0.5
        np.testing.assert_allclose(nm.sigmoid(np.array(2.0)), 0.8807970779778823, atol=1e-12)

    def test_tanh_and_relu_fixed_points(self):
        assert nm.tanh(np.array(0.0)) == 0.0
        assert nm.relu(np.array(-3.0)) == 0.0
        assert nm.relu(np.array(1.5)) == 1.5

    def test_ranges(self):
        # stay inside the float64-representable open intervals
        rng = np.random.default_rng(0)
        x = rng.uniform(-30, 30, size=1000)
        s = nm.sigmoid(x)
        assert np.all((s > 0) & (s < 1))
        t = nm.tanh(rng.uniform(-15, 15, size=1000))
        assert np.all((t > -1) & (t < 1))
        assert np.all(nm.relu(x) >= 0)

    def test_dispatch_by_kind(self):
        x = np.array([-1.0, 0.0, 2.0])
        np.testing.assert_array_equal(apply_activation(x, "sigmoid"), nm.sigmoid(x))
        np.testing.assert_array_equal(apply_activation(x, "tanh"), nm.tanh(x))
        np.testing.assert_array_equal(apply_activation(x, "relu"), nm.relu(x))
        with pytest.raises(ValueError):
            apply_activation(x, "gelu")

    def test_non_finite_rejected(self):
        for fn in (nm.sigmoid, nm.tanh, nm.relu):
            with pytest.raises(ValueError, match="non-finite"):
                fn(np.array([1.0, np.nan]))


class TestSoftmax:
    def test_uniform_on_constant_input(self):
        np.testing.assert_allclose(nm.softmax(np.zeros(3)), np.full(3, 1 / 3), atol=1e-15)

    def test_two_entry_value(self):
        np.testing.assert_allclose(
            nm.softmax(np.array([1.0, 2.0])),
            [0.2689414213699951, 0.7310585786300049],
            atol=1e-12,
        )

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            v = rng.normal(size=7)
            c = rng.normal() * 100
            np.testing.assert_allclose(nm.softmax(v + c), nm.softmax(v), atol=1e-12)

    def test_simplex_even_with_large_inputs(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            v = rng.normal(size=9) * rng.uniform(1, 50)
            p = nm.softmax(v)
            assert np.all(p > 0)
            assert abs(p.sum() - 1.0) < 1e-9

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            nm.softmax(np.array([]))


class TestMatmul:
    def test_agrees_with_naive_triple_loop(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            a = rng.normal(size=(7, 5))
            b = rng.normal(size=(5, 3))
            naive = np.zeros((7, 3))
            for i in range(7):
                for j in range(3):
                    for k in range(5):
                        naive[i, j] += a[i, k] * b[k, j]
            got = nm.matmul(nm.constant(a), nm.constant(b)).value
            np.testing.assert_allclose(got, naive, atol=1e-12)

    def test_rejects_non_2d(self):
        with pytest.raises(ValueError):
            nm.matmul(nm.constant(np.zeros(3)), nm.constant(np.zeros((3, 2))))


class TestTape:
    def test_quadratic_gradient_is_exact(self):
        p = nm.parameter(np.array([0.3, -1.2, 2.0]), "p")
        err = grad_check(lambda: (p * p).sum(), [p], eps=1e-4)
        assert err < 1e-8

    def test_replay_identical(self):
        rng = np.random.default_rng(4)
        w = nm.parameter(rng.normal(size=(4, 4)), "w")
        x = nm.constant(rng.normal(size=(2, 4)))
        loss = (nm.tanh(nm.matmul(x, w)) * nm.sigmoid(nm.matmul(x, w))).sum()
        backward(loss)
        first = w.grad.copy()
        backward(loss)
        np.testing.assert_array_equal(first, w.grad)

    def test_gradient_shape_matches_parameter(self):
        w = nm.parameter(np.ones((3, 2)), "w")
        b = nm.parameter(np.zeros(2), "b")
        x = nm.constant(np.ones((5, 3)))
        loss = (nm.matmul(x, w) + b).sum()
        backward(loss)
        assert w.grad.shape == w.value.shape
        assert b.grad.shape == b.value.shape

    def test_broadcast_bias_gradient(self):
        b = nm.parameter(np.zeros(3), "b")
        x = nm.constant(np.ones((4, 3)))
        loss = (x + b).sum()
        backward(loss)
        np.testing.assert_array_equal(b.grad, np.full(3, 4.0))

    def test_shared_node_accumulates(self):
        p = nm.parameter(np.array([2.0]), "p")
        y = p * p  # p used twice
        backward(y.sum())
        np.testing.assert_allclose(p.grad, [4.0])

    def test_take_rows_accumulates_duplicates(self):
        e = nm.parameter(np.arange(6.0).reshape(3, 2), "e")
        out = nm.take_rows(e, [1, 1, 2])
        backward(out.sum())
        np.testing.assert_array_equal(e.grad, [[0, 0], [2, 2], [1, 1]])

    def test_no_grad_blocks_taping(self):
        p = nm.parameter(np.ones(3), "p")
        with nm.no_grad():
            out = (p * 2.0).sum()
        assert not out.requires_grad

    def test_composite_graph_grad_check(self):
        rng = np.random.default_rng(5)
        w1 = nm.parameter(rng.normal(size=(4, 3)) * 0.5, "w1")
        w2 = nm.parameter(rng.normal(size=(2, 4)) * 0.5, "w2")
        x = rng.normal(size=(3, 3))

        def loss_fn():
            h = nm.relu(nm.matmul(nm.constant(x), w1.t()))
            logits = nm.matmul(h, w2.t())
            return -nm.take_at(nm.log_softmax(logits), [0, 1, 2], [0, 1, 0]).sum()

        assert grad_check(loss_fn, [w1, w2], eps=1e-5) < 1e-6

    def test_softmax_op_gradient(self):
        rng = np.random.default_rng(6)
        p = nm.parameter(rng.normal(size=(2, 5)), "p")
        t = rng.dirichlet(np.ones(5), size=2)

        def loss_fn():
            d = nm.softmax(p) - nm.constant(t)
            return (d * d).sum()

        assert grad_check(loss_fn, [p], eps=1e-5) < 1e-7


class TestGradCheck:
    def test_eps_bounds_enforced(self):
        p = nm.parameter(np.ones(1), "p")
        with pytest.raises(ValueError):
            grad_check(lambda: (p * p).sum(), [p], eps=1e-2)

    def test_non_finite_loss_at_perturbed_point_names_entry(self):
        p = nm.parameter(np.array([1e-4]), "p")

        def loss_fn():
            # finite at the base point, -inf when the entry is stepped to 0
            with np.errstate(divide="ignore"):
                extra = Tensor(np.log(np.abs(p.value)))
            return (p * p).sum() + extra.sum()

        with pytest.raises(ValueError, match=r"p\[0\]"):
            grad_check(loss_fn, [p], eps=1e-4)
