import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from taskembed import tensor as T
from taskembed.tensor import Adam, NonFiniteError, Tensor, finite_difference_check, no_grad

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def test_gelu_at_zero():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0


def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_identity_matmul():
    a = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal((Tensor(np.eye(3)) @ Tensor(a)).data, a)


class TestLayerNorm:
    def test_constant_input_gives_beta(self):
        out = T.layer_norm(Tensor([7.0, 7.0, 7.0]), [2.0, 3.0, 4.0], [0.1, 0.2, 0.3])
        np.testing.assert_allclose(out.data, [0.1, 0.2, 0.3])

    def test_already_normalized(self):
        out = T.layer_norm(Tensor([1.0, -1.0]), [1.0, 1.0], [0.0, 0.0], eps=0.0)
        np.testing.assert_allclose(out.data, [1.0, -1.0])

    def test_hand_computed(self):
        # mean 3, population std 1
        out = T.layer_norm(Tensor([2.0, 4.0]), [3.0, 3.0], [1.0, 1.0], eps=0.0)
        np.testing.assert_allclose(out.data, [-2.0, 4.0])

    def test_mismatched_gamma(self):
        with pytest.raises(ValueError):
            T.layer_norm(Tensor([1.0, 2.0]), [1.0], [0.0, 0.0])

    @given(arrays(np.float64, (3, 5), elements=finite))
    def test_zero_mean_unit_variance(self, x):
        if np.ptp(x, axis=-1).min() < 1e-2:
            return
        out = T.layer_norm(Tensor(x), np.ones(5), np.zeros(5), eps=0.0).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-8)


class TestCrossEntropy:
    def test_uniform_four_classes(self):
        assert T.cross_entropy(Tensor(np.zeros(4)), 2).item() == pytest.approx(np.log(4))

    def test_two_classes(self):
        assert T.cross_entropy(Tensor([0.0, 0.0]), 0).item() == pytest.approx(np.log(2))

    def test_point_mass(self):
        assert T.cross_entropy(Tensor([100.0, 0.0]), 0).item() == pytest.approx(0.0, abs=1e-12)

    def test_gradient_is_softmax_minus_onehot(self):
        z = Tensor([0.0, 0.0], requires_grad=True)
        T.cross_entropy(z, 0).backward()
        np.testing.assert_allclose(z.grad, [-0.5, 0.5])

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


class TestBackward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        T.square(x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_gelu_derivative_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        T.gelu(x).sum().backward()
        assert x.grad[0] == pytest.approx(0.5)

    def test_frozen_parameter_gets_nothing(self):
        w = Tensor([1.0, 2.0])
        x = Tensor([3.0, 4.0], requires_grad=True)
        (w * x).sum().backward()
        assert w.grad is None
        np.testing.assert_allclose(x.grad, [1.0, 2.0])

    def test_reused_node_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        (x * x + x).backward()
        assert x.grad == pytest.approx(5.0)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_minimum_blocks_gradient_above_cap(self):
        x = Tensor(3.0, requires_grad=True)
        y = T.minimum(x, 1.0)
        y.backward()
        assert y.item() == 1.0 and x.grad == 0.0

    def test_nan_raises(self):
        with pytest.raises(NonFiniteError):
            T.log_softmax(Tensor([0.0])) * np.inf


class TestFiniteDifference:
    def test_quadratic(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(4, 4)))
        x = Tensor(rng.normal(size=4), requires_grad=True)
        err = finite_difference_check(lambda: (x.reshape(1, 4) @ a @ x.reshape(4, 1)).sum(), [x], eps=1e-5)
        assert err <= 1e-7

    def test_composite_ops(self):
        rng = np.random.default_rng(1)
        w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        g = Tensor(rng.normal(size=3) + 1.0, requires_grad=True)
        x = Tensor(rng.normal(size=(2, 4, 5)))

        def loss():
            h = T.layer_norm(T.gelu(x @ w), g, np.zeros(3))
            return T.cross_entropy(h.reshape(8, 3), np.arange(8) % 3)

        assert finite_difference_check(loss, [w, g], eps=1e-5) <= 1e-6

    def test_rejects_large_eps(self):
        with pytest.raises(ValueError):
            finite_difference_check(lambda: Tensor(0.0), [], eps=0.1)

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
    def test_broadcast_add_mul(self, a, b):
        weights = np.linspace(-1.0, 1.0, 12).reshape(3, 4)
        x = Tensor(a, requires_grad=True)
        y = Tensor(b, requires_grad=True)

        def loss():
            return (T.softmax(x * y + y) * Tensor(weights)).sum()

        loss().backward()
        for p in (x, y):
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + 1e-6
                up = loss().item()
                flat[i] = orig - 1e-6
                down = loss().item()
                flat[i] = orig
                assert p.grad.reshape(-1)[i] == pytest.approx((up - down) / 2e-6, abs=1e-7)


class TestAdam:
    def test_zero_gradient(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_has_size_lr(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        opt = Adam({"p": p}, lr=0.01)
        p.grad = np.array([3.0, -0.5])
        opt.step()
        np.testing.assert_allclose(p.data, [0.99, -1.99], atol=1e-8)

    @given(arrays(np.float64, (3,), elements=finite))
    def test_zero_lr(self, g):
        p = Tensor([0.5, 0.5, 0.5], requires_grad=True)
        opt = Adam({"p": p}, lr=0.0)
        p.grad = g
        opt.step()
        np.testing.assert_array_equal(p.data, [0.5, 0.5, 0.5])

    def test_params_without_grad_are_skipped(self):
        a = Tensor([1.0], requires_grad=True)
        b = Tensor([1.0], requires_grad=True)
        opt = Adam({"a": a, "b": b}, lr=0.1)
        a.grad = np.array([1.0])
        opt.step()
        assert b.data[0] == 1.0 and "b" not in opt.state.m


@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=finite))
def test_tensor_io_round_trip(a):
    buf = io.BytesIO()
    T.write_tensor(buf, a)
    buf.seek(0)
    np.testing.assert_array_equal(T.read_tensor(buf), a)


def test_truncated_tensor():
    buf = io.BytesIO()
    T.write_tensor(buf, np.ones(4))
    with pytest.raises(EOFError):
        T.read_tensor(io.BytesIO(buf.getvalue()[:-3]))
