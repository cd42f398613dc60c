"""Gradient correctness: central finite differences in float64 for every op."""

import numpy as np
import pytest

from njcodec import tensor as T
from njcodec.tensor import Parameter, Tensor

FD_H = 1e-5
FD_RTOL = 1e-6


def fd_check(build, arrays, h=FD_H, rtol=FD_RTOL):
    """Compare backprop gradients of scalar build(*tensors) to central differences.

    arrays are float64; every element is probed.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*tensors)
    assert loss.size == 1
    T.backward(loss)

    for t, base in zip(tensors, arrays):
        assert t.grad is not None, "missing gradient"
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            for sign, slot in ((+1, 0), (-1, 1)):
                probe = base.copy().reshape(-1)
                probe[i] += sign * h
                args = [
                    Tensor(probe.reshape(base.shape)) if u is t else Tensor(arrays[k].copy())
                    for k, u in enumerate(tensors)
                ]
                val = build(*args).item()
                if slot == 0:
                    plus = val
                else:
                    flat[i] = (plus - val) / (2 * h)
        denom = np.maximum(np.abs(numeric) + np.abs(t.grad), 1e-4)
        err = np.abs(numeric - t.grad) / denom
        assert err.max() <= rtol, f"fd mismatch: max rel err {err.max():.3e}"


def _weighted_sum(out, seed=0):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=out.shape))
    return T.tensor_sum(T.mul(out, w))


class TestElementwiseGradients:
    def test_add_sub_mul_div(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 4)) + 3.0  # keep denominators away from zero
        fd_check(lambda x, y: _weighted_sum(T.add(x, y)), [a, b])
        fd_check(lambda x, y: _weighted_sum(T.sub(x, y)), [a, b])
        fd_check(lambda x, y: _weighted_sum(T.mul(x, y)), [a, b])
        fd_check(lambda x, y: _weighted_sum(T.div(x, y)), [a, b])

    def test_scalar_variants(self, rng):
        a = rng.normal(size=(5,))
        fd_check(lambda x: _weighted_sum(T.add(x, 1.7)), [a])
        fd_check(lambda x: _weighted_sum(T.mul(x, -0.3)), [a])
        fd_check(lambda x: _weighted_sum(T.div(x, 2.5)), [a])
        fd_check(lambda x: _weighted_sum(T.sub_from_scalar(1.0, x)), [a])

    def test_unary_smooth(self, rng):
        a = rng.normal(size=(4, 3)) * 0.8
        fd_check(lambda x: _weighted_sum(T.exp(x)), [a])
        fd_check(lambda x: _weighted_sum(T.sigmoid(x)), [a])
        fd_check(lambda x: _weighted_sum(T.softplus(x)), [a])
        fd_check(lambda x: _weighted_sum(T.erf(x)), [a])
        fd_check(lambda x: _weighted_sum(T.gelu(x)), [a])
        fd_check(lambda x: _weighted_sum(T.neg(x)), [a])

    def test_unary_positive_domain(self, rng):
        a = rng.uniform(0.5, 2.0, size=(6,))
        fd_check(lambda x: _weighted_sum(T.log(x)), [a])
        fd_check(lambda x: _weighted_sum(T.sqrt(x)), [a])
        fd_check(lambda x: _weighted_sum(T.power(x, 1.7)), [a])

    def test_kinked_away_from_kinks(self, rng):
        a = np.concatenate([rng.uniform(0.3, 1.0, 4), rng.uniform(-1.0, -0.3, 4)])
        fd_check(lambda x: _weighted_sum(T.absolute(x)), [a])
        fd_check(lambda x: _weighted_sum(T.leaky_relu(x, 0.2)), [a])
        fd_check(lambda x: _weighted_sum(T.clamp(x, -0.7, 0.7)), [a])
        fd_check(lambda x: T.l1_norm(x), [a])

    def test_reductions(self, rng):
        a = rng.normal(size=(3, 4, 2))
        fd_check(lambda x: T.tensor_sum(x), [a])
        fd_check(lambda x: T.mean(x), [a])
        fd_check(lambda x: _weighted_sum(T.tensor_sum(x, axis=1)), [a])
        fd_check(lambda x: _weighted_sum(T.mean(x, axis=(0, 2), keepdims=True)), [a])
        fd_check(lambda x: T.l2_norm(x), [a])


class TestShapeGradients:
    def test_reshape_transpose(self, rng):
        a = rng.normal(size=(2, 3, 4))
        fd_check(lambda x: _weighted_sum(T.reshape(x, (4, 6))), [a])
        fd_check(lambda x: _weighted_sum(T.transpose(x, (2, 0, 1))), [a])

    def test_concat_narrow_expand(self, rng):
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(2, 2))
        fd_check(lambda x, y: _weighted_sum(T.concat([x, y], axis=1)), [a, b])
        fd_check(lambda x: _weighted_sum(T.narrow(x, 1, 1, 2)), [a])
        c = rng.normal(size=(1, 3, 1))
        fd_check(lambda x: _weighted_sum(T.expand(x, (4, 3, 2))), [c])

    def test_pad2d(self, rng):
        a = rng.normal(size=(1, 2, 3, 4))
        for mode in ("zero", "reflect", "replicate"):
            fd_check(lambda x: _weighted_sum(T.pad2d(x, (1, 2, 2, 1), mode=mode)), [a])


class TestLinalgGradients:
    def test_matmul_2d(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        fd_check(lambda x, y: _weighted_sum(T.matmul(x, y)), [a, b])

    def test_matmul_batched(self, rng):
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(2, 4, 2))
        fd_check(lambda x, y: _weighted_sum(T.matmul(x, y)), [a, b])

    def test_matmul_broadcast_rhs(self, rng):
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(4, 5))
        fd_check(lambda x, y: _weighted_sum(T.matmul(x, y)), [a, b])

    def test_softmax(self, rng):
        a = rng.normal(size=(3, 5))
        fd_check(lambda x: _weighted_sum(T.softmax(x, axis=-1)), [a])

    def test_layer_norm(self, rng):
        a = rng.normal(size=(3, 6))
        g = rng.normal(size=6)
        b = rng.normal(size=6)
        fd_check(lambda x, gg, bb: _weighted_sum(T.layer_norm(x, gg, bb)), [a, g, b])


class TestConvGradients:
    def test_conv2d(self, rng):
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        fd_check(lambda xx, ww, bb: _weighted_sum(T.conv2d(xx, ww, bb, stride=2, padding=1)),
                 [x, w, b])

    def test_conv_transpose2d(self, rng):
        x = rng.normal(size=(2, 3, 3, 3))
        w = rng.normal(size=(3, 2, 4, 4))
        b = rng.normal(size=2)
        fd_check(
            lambda xx, ww, bb: _weighted_sum(T.conv_transpose2d(xx, ww, bb, stride=2, padding=1)),
            [x, w, b])

    def test_avg_pool(self, rng):
        x = rng.normal(size=(1, 2, 5, 6))
        fd_check(lambda xx: _weighted_sum(T.avg_pool2d(xx, 2)), [x])


class TestBackwardDriver:
    def test_square_sum_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.backward(T.tensor_sum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_backward_non_scalar_raises(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError):
            T.backward(T.mul(x, 2.0))

    def test_grad_accumulates_over_fanout(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = T.add(T.mul(x, 2.0), T.mul(x, 5.0))
        T.backward(T.tensor_sum(y))
        np.testing.assert_allclose(x.grad, [7.0])

    def test_no_grad_blocks_tape(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.mul(x, 2.0)
        assert not y.requires_grad and y._grad_fn is None


class TestAdam:
    def test_single_step_hand_formula(self, rng):
        data = rng.normal(size=(4,))
        grad = rng.normal(size=(4,))
        p = Parameter(data.copy(), name="p")
        p.grad = grad.copy()
        lr, b1, b2, eps = 3e-3, 0.9, 0.999, 1e-8
        T.adam_step([p], lr, b1, b2, eps)
        m_hat = (1 - b1) * grad / (1 - b1)
        v_hat = (1 - b2) * grad**2 / (1 - b2)
        expect = data - lr * m_hat / (np.sqrt(v_hat) + eps)
        np.testing.assert_allclose(p.data, expect, rtol=1e-12)
        # first-step update is the sign-scaled learning rate
        np.testing.assert_allclose(p.data, data - lr * np.sign(grad), atol=lr * 1e-4)
        assert p.grad is None

    def test_missing_grad_raises(self):
        p = Parameter(np.zeros(2), name="p")
        with pytest.raises(RuntimeError):
            T.adam_step([p], 1e-3)

    def test_two_steps_track_reference(self, rng):
        p = Parameter(rng.normal(size=(3,)).astype(np.float64), name="p")
        ref = p.data.copy()
        m = np.zeros(3)
        v = np.zeros(3)
        lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
        for step in range(1, 3):
            g = np.full(3, 0.5) * step
            p.grad = g.copy()
            T.adam_step([p], lr, b1, b2, eps)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            ref = ref - lr * (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + eps)
        np.testing.assert_allclose(p.data, ref, rtol=1e-12)
