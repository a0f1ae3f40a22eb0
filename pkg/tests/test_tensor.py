"""Tensor-core op semantics, oracles, and gradient integrity."""

import numpy as np
import pytest

from partstream import tensor as T
from partstream.nn import SGD
from partstream.tensor import (
    ConfigError, Parameter, ShapeError, Tensor, conv2d, cross_entropy,
    global_avg_pool, grad_check, matmul, max_pool_t, pointwise_conv, relu,
    softmax, tanh, temporal_pool, tsum,
)


def t64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def conv2d_naive(x, w, stride_t=1, dilation_t=1, pad_t=0):
    """Quadruple-loop reference for conv2d (cross-correlation)."""
    B, cin, t_in, n_in = x.shape
    cout, _, kt, kn = w.shape
    xp = np.zeros((B, cin, t_in + 2 * pad_t, n_in))
    xp[:, :, pad_t:pad_t + t_in] = x
    span = dilation_t * (kt - 1) + 1
    t_out = (t_in + 2 * pad_t - span) // stride_t + 1
    n_out = n_in - kn + 1
    out = np.zeros((B, cout, t_out, n_out))
    for b in range(B):
        for o in range(cout):
            for ti in range(t_out):
                for ni in range(n_out):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kt):
                            for v in range(kn):
                                acc += xp[b, c, ti * stride_t + u * dilation_t, ni + v] \
                                    * w[o, c, u, v]
                    out[b, o, ti, ni] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.allclose(matmul(a, b).data, b.data)

    def test_hand_arithmetic(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        assert np.array_equal(out.data, [[17.0], [39.0]])

    def test_backward_vs_finite_differences(self):
        rng = np.random.default_rng(0)
        a = t64(rng.standard_normal((3, 4)))
        b = t64(rng.standard_normal((4, 2)))
        r = Tensor(rng.standard_normal((3, 2)))
        report = grad_check(lambda: tsum(T.mul(matmul(a, b), r)), [a, b], tol=1e-6)
        assert report.passed
        assert report.max_rel_err < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_broadcast_batch(self):
        rng = np.random.default_rng(1)
        a = t64(rng.standard_normal((2, 1, 3, 4)))
        b = t64(rng.standard_normal((2, 5, 4, 2)))
        out = matmul(a, b)
        assert out.shape == (2, 5, 3, 2)
        report = grad_check(
            lambda: tsum(T.mul(matmul(a, b), Tensor(np.ones(out.shape)))), [a, b])
        assert report.passed


class TestConv2d:
    def test_pointwise_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 5)))
        w = Tensor(np.eye(3).reshape(3, 3, 1, 1))
        assert np.allclose(conv2d(x, w).data, x.data)

    def test_temporal_sum_kernel(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 3, 1))
        w = Tensor(np.ones((1, 1, 3, 1)))
        out = conv2d(x, w, pad_t=1)
        assert np.array_equal(out.data.ravel(), [3.0, 6.0, 5.0])

    def test_dilated_matches_naive(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 5, 3))
        w = rng.standard_normal((2, 2, 3, 1))
        out = conv2d(Tensor(x), Tensor(w), dilation_t=2, pad_t=2)
        assert out.shape[2] == 5
        assert np.allclose(out.data, conv2d_naive(x, w, dilation_t=2, pad_t=2),
                           atol=1e-12)

    def test_exhaustive_small_shapes_vs_naive(self):
        rng = np.random.default_rng(3)
        cases = 0
        for t_in in range(1, 7):
            for n_in in (1, 3):
                for kt in (1, 2, 3):
                    for kn in (1, n_in):
                        for stride in (1, 2):
                            for dil in (1, 2):
                                for pad in (0, 1):
                                    span = dil * (kt - 1) + 1
                                    if t_in + 2 * pad < span or kn > n_in:
                                        continue
                                    x = rng.standard_normal((2, 2, t_in, n_in))
                                    w = rng.standard_normal((2, 2, kt, kn))
                                    got = conv2d(Tensor(x), Tensor(w), stride,
                                                 dil, pad).data
                                    want = conv2d_naive(x, w, stride, dil, pad)
                                    assert np.max(np.abs(got - want)) <= 1e-10
                                    cases += 1
        assert cases > 100

    def test_empty_output_rejected(self):
        with pytest.raises(ConfigError):
            conv2d(Tensor(np.ones((1, 1, 2, 1))), Tensor(np.ones((1, 1, 5, 1))))

    def test_channel_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(1, 2, 3, 1\).*\(1, 3, 1, 1\)"):
            conv2d(Tensor(np.ones((1, 2, 3, 1))), Tensor(np.ones((1, 3, 1, 1))))


class TestPointwiseConv:
    def test_identity(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 4, 3, 5)))
        assert np.allclose(pointwise_conv(x, Tensor(np.eye(4))).data, x.data)

    def test_equals_conv2d_bitwise(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 3, 4, 5))
        w = rng.standard_normal((6, 3))
        a = pointwise_conv(Tensor(x), Tensor(w)).data
        b = conv2d(Tensor(x), Tensor(w.reshape(6, 3, 1, 1))).data
        assert np.allclose(a, b, rtol=0, atol=1e-12)

    def test_backward(self):
        rng = np.random.default_rng(5)
        x, w = t64(rng.standard_normal((2, 3, 2, 2))), t64(rng.standard_normal((4, 3)))
        r = Tensor(rng.standard_normal((2, 4, 2, 2)))
        report = grad_check(lambda: tsum(T.mul(pointwise_conv(x, w), r)), [x, w],
                            tol=1e-6)
        assert report.passed


class TestPooling:
    def test_temporal_pool_constant(self):
        x = Tensor(np.full((1, 2, 5, 3), 7.0))
        assert np.allclose(temporal_pool(x).data, 7.0)

    def test_temporal_pool_mean(self):
        x = np.zeros((1, 1, 2, 1))
        x[0, 0, 0, 0], x[0, 0, 1, 0] = 1.0, 3.0
        assert temporal_pool(Tensor(x)).data.item() == 2.0

    def test_gap_constant_and_squeeze(self):
        assert np.allclose(global_avg_pool(Tensor(np.full((2, 3, 4, 5), 1.5))).data, 1.5)
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3, 1, 1))
        assert np.array_equal(global_avg_pool(x).data,
                              np.arange(6, dtype=np.float64).reshape(2, 3))

    def test_pool_backward(self):
        rng = np.random.default_rng(6)
        x = t64(rng.standard_normal((2, 2, 4, 3)))
        r = Tensor(rng.standard_normal((2, 2, 3)))
        assert grad_check(lambda: tsum(T.mul(temporal_pool(x), r)), [x]).passed
        r2 = Tensor(rng.standard_normal((2, 2)))
        assert grad_check(lambda: tsum(T.mul(global_avg_pool(x), r2)), [x]).passed

    def test_max_pool_values(self):
        x = Tensor(np.array([1.0, 5.0, 2.0, 4.0]).reshape(1, 1, 4, 1))
        out = max_pool_t(x, kernel=3, stride=1, pad=1)
        assert np.array_equal(out.data.ravel(), [5.0, 5.0, 5.0, 4.0])


class TestActivations:
    def test_softmax_uniform(self):
        assert np.allclose(softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_relu_negative(self):
        assert relu(Tensor([-1.0])).data.item() == 0.0

    def test_tanh_backward(self):
        x = t64(np.random.default_rng(7).standard_normal((3, 3)))
        assert grad_check(lambda: tsum(tanh(x)), [x]).passed

    def test_softmax_probability_rows(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            out = softmax(Tensor(rng.standard_normal((4, 9)) * 10)).data
            assert np.all(out >= 0)
            assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_softmax_extreme_logits_finite(self):
        out = softmax(Tensor([[1e4, -1e4, 0.0]])).data
        assert np.all(np.isfinite(out))


class TestBatchNorm:
    def test_normalized_input_unchanged(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((64, 3, 8, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
        out = T.batch_norm_2d(Tensor(x), gamma, beta, np.zeros(3), np.ones(3), True)
        assert np.allclose(out.data, x, atol=1e-4)

    def test_zero_variance_channel(self):
        x = Tensor(np.full((2, 1, 3, 3), 5.0))
        out = T.batch_norm_2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)),
                              np.zeros(1), np.ones(1), True)
        assert np.all(np.isfinite(out.data))
        assert np.allclose(out.data, 0.0, atol=1e-5)

    def test_eval_uses_initial_running_stats(self):
        x = np.random.default_rng(10).standard_normal((2, 3, 4, 4))
        out = T.batch_norm_2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                              np.zeros(3), np.ones(3), False)
        assert np.allclose(out.data, x / np.sqrt(1 + 1e-5), atol=1e-6)

    def test_running_stats_update(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((8, 2, 4, 4)) * 3 + 1
        rm, rv = np.zeros(2), np.ones(2)
        T.batch_norm_2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True)
        assert np.allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-6)


class TestCrossEntropy:
    def test_confident_correct_is_zero(self):
        logits = Tensor(np.array([[1e6, 0.0, 0.0]]))
        assert cross_entropy(logits, np.array([0])).data.item() == pytest.approx(0.0, abs=1e-9)

    def test_uniform_is_log_k(self):
        k = 11
        logits = Tensor(np.zeros((3, k)))
        loss = cross_entropy(logits, np.array([0, 5, 10]))
        assert loss.data.item() == pytest.approx(np.log(k), rel=1e-9)

    def test_backward(self):
        rng = np.random.default_rng(12)
        logits = t64(rng.standard_normal((5, 7)))
        labels = rng.integers(0, 7, 5)
        assert grad_check(lambda: cross_entropy(logits, labels), [logits]).passed

    def test_label_validation(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))


class TestSGD:
    def _param(self, value):
        p = Parameter(np.asarray(value, dtype=np.float64))
        return p

    def test_vanilla_step(self):
        p = self._param([1.0, 2.0])
        p.grad = np.array([0.5, -1.0])
        SGD([p], lr=0.1).step()
        assert np.allclose(p.data, [0.95, 2.1])

    def test_momentum_two_step_trace(self):
        # hand trace: p0=1, g=0.5, lr=0.1, m=0.9 -> p1=0.95, p2=0.855
        p = self._param([1.0])
        opt = SGD([p], lr=0.1, momentum=0.9)
        p.grad = np.array([0.5])
        opt.step()
        assert p.data.item() == pytest.approx(0.95)
        p.grad = np.array([0.5])
        opt.step()
        assert p.data.item() == pytest.approx(0.855)

    def test_weight_decay_shrinks_without_gradient(self):
        p = self._param([2.0])
        p.grad = np.array([0.0])
        SGD([p], lr=0.1, weight_decay=0.5).step()
        assert p.data.item() == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_lr_zero_is_identity(self):
        p = self._param([3.0])
        p.grad = np.array([123.0])
        SGD([p], lr=0.0, momentum=0.9, weight_decay=0.1).step()
        assert p.data.item() == 3.0

    def test_negative_lr_rejected(self):
        with pytest.raises(ConfigError):
            SGD([self._param([1.0])], lr=-0.1)

    def test_duplicate_params_rejected(self):
        p = self._param([1.0])
        with pytest.raises(ConfigError):
            SGD([p, p], lr=0.1)


class TestGradCheck:
    def test_quadratic(self):
        x = t64([1.0, 2.0])
        report = grad_check(lambda: tsum(T.mul(x, x)), [x])
        assert report.passed
        x.zero_grad()
        tsum(T.mul(x, x)).backward()
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_linear_is_machine_precision(self):
        x = t64(np.random.default_rng(13).standard_normal(5))
        r = Tensor(np.array([1.0, -2.0, 3.0, 0.5, -0.25]))
        report = grad_check(lambda: tsum(T.mul(x, r)), [x])
        assert report.max_rel_err < 1e-10

    def test_requires_float64(self):
        x = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        with pytest.raises(ConfigError):
            grad_check(lambda: tsum(x), [x])


class TestFiniteness:
    def test_ops_finite_on_finite_inputs(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.standard_normal((2, 3, 4, 5)) * 100)
        for out in (relu(x), tanh(x), temporal_pool(x), global_avg_pool(x)):
            out.assert_finite()

    def test_assert_finite_raises(self):
        bad = Tensor(np.array([1.0, np.nan]))
        with pytest.raises(FloatingPointError):
            bad.assert_finite("loss")


def test_every_op_passes_fd_property_suite():
    """Every differentiable op at 64-bit, tol 1e-4, >= 20 random seeds."""
    from partstream.gradcheck import OP_CHECKS, check_op
    for name in OP_CHECKS:
        for seed in range(20):
            report = check_op(name, seed)
            assert report.passed, f"{name} seed {seed}: {report}"
