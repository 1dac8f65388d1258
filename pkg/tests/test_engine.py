"""Autodiff engine: op-level gradients vs finite differences, adjoint and
normalization identities, and the grad_check harness itself."""

import numpy as np
import pytest

from blan import engine
from blan.engine import (
    NumericalError, ShapeError, Tensor, conv2d, conv_transpose2d, grad_check,
)

F64 = np.float64


def t64(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=F64), requires_grad=grad)


def rand64(rng, *shape):
    return t64(rng.normal(size=shape))


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self):
        x = t64(np.arange(12.0).reshape(3, 4))
        engine.tsum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_mean_abs_diff_gradient_is_sign_over_n(self):
        rng = np.random.default_rng(0)
        x = t64(rng.normal(size=(2, 3)))
        y = t64(rng.normal(size=(2, 3)), grad=False)
        engine.tmean(engine.tabs(x - y)).backward()
        expected = np.sign(x.data - y.data) / x.data.size
        np.testing.assert_allclose(x.grad, expected, rtol=1e-12)

    def test_sigmoid_chain_matches_finite_difference(self):
        rng = np.random.default_rng(1)
        w = rand64(rng, 5)
        x = np.asarray(rng.normal(size=5), dtype=F64)

        def f(params):
            return engine.sigmoid(engine.tsum(params[0] * Tensor(x)))

        assert grad_check(f, [w]) < 1e-4

    def test_non_scalar_root_rejected(self):
        x = t64(np.ones((2, 2)))
        with pytest.raises(ShapeError):
            (x * 2.0).backward()

    def test_grad_accumulates_across_uses(self):
        x = t64(3.0)
        y = x * 2.0 + x * 4.0
        y.backward()
        assert x.grad == pytest.approx(6.0)

    def test_requires_grad_propagates(self):
        a = t64(1.0)
        b = Tensor(np.float64(2.0))
        out = a * b
        assert out.requires_grad
        out2 = b * 3.0
        assert not out2.requires_grad

    def test_no_grad_suppresses_graph(self):
        x = t64(2.0)
        with engine.no_grad():
            y = x * x
        assert y._backward is None and not y.requires_grad

    def test_detach_cuts_graph(self):
        x = t64(2.0)
        y = (x * 3.0).detach() * 5.0
        y.backward()
        assert x.grad is None

    def test_python_scalars_do_not_upcast_float32(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        assert (x * 0.5 + 1.0).dtype == np.float32


ELEMENTWISE = [
    ("relu", lambda t: engine.relu(t), 0.3),  # shift inputs away from the kink
    ("leaky_relu", lambda t: engine.leaky_relu(t, 0.2), 0.3),
    ("sigmoid", engine.sigmoid, 0.0),
    ("tanh", engine.tanh, 0.0),
    ("exp", engine.texp, 0.0),
    ("abs", engine.tabs, 0.3),
]


class TestOpGradients:
    @pytest.mark.parametrize("name,op,shift", ELEMENTWISE, ids=[e[0] for e in ELEMENTWISE])
    def test_elementwise_matches_finite_difference(self, name, op, shift):
        rng = np.random.default_rng(7)
        vals = rng.normal(size=(3, 4))
        if shift:
            vals = np.where(np.abs(vals) < shift, vals + 2 * shift, vals)
        x = t64(vals)
        assert grad_check(lambda p: engine.tsum(op(p[0])), [x]) < 1e-4

    def test_log_gradient(self):
        rng = np.random.default_rng(8)
        x = t64(rng.uniform(0.5, 2.0, size=(3, 3)))
        assert grad_check(lambda p: engine.tsum(engine.tlog(p[0])), [x]) < 1e-4

    def test_matmul_gradient(self):
        rng = np.random.default_rng(9)
        a, b = rand64(rng, 3, 4), rand64(rng, 4, 2)
        assert grad_check(lambda p: engine.tsum(engine.matmul(p[0], p[1]) * 0.5), [a, b]) < 1e-4

    def test_getitem_and_concat_gradients(self):
        rng = np.random.default_rng(10)
        x = rand64(rng, 4, 6)

        def f(p):
            parts = engine.concat([p[0][:2, :], p[0][2:, :]], axis=0)
            return engine.tsum(parts * parts)

        assert grad_check(f, [x]) < 1e-4

    def test_flip_transpose_reshape_gradients(self):
        rng = np.random.default_rng(11)
        x = rand64(rng, 2, 3, 4)

        def f(p):
            y = engine.flip(p[0], -1)
            y = engine.transpose(y, (1, 0, 2))
            return engine.tsum(engine.reshape(y, (6, 4)) * 0.25)

        assert grad_check(f, [x]) < 1e-4

    def test_sum_axis_keepdims_gradient(self):
        rng = np.random.default_rng(12)
        x = rand64(rng, 3, 5)

        def f(p):
            s = engine.tsum(p[0], axis=1, keepdims=True)
            return engine.tsum(s * s)

        assert grad_check(f, [x]) < 1e-4

    def test_avg_pool_gradient(self):
        rng = np.random.default_rng(13)
        x = rand64(rng, 2, 3, 4, 4)
        assert grad_check(lambda p: engine.tsum(engine.avg_pool2x2(p[0])), [x]) < 1e-4

    def test_broadcast_add_unbroadcasts(self):
        x = t64(np.ones((2, 3, 2, 2)))
        b = t64(np.zeros(3))
        out = x + engine.reshape(b, (1, 3, 1, 1))
        engine.tsum(out).backward()
        np.testing.assert_array_equal(b.grad, np.full(3, 8.0))


class TestConv:
    def test_zero_kernel_gives_zero_output(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 8, 8)))
        w = Tensor(np.zeros((1, 1, 3, 3)))
        out = conv2d(x, w, stride=1, pad=1)
        assert out.shape == (1, 1, 8, 8)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_output_size_formula(self):
        x = Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32))
        w = Tensor(np.zeros((8, 3, 4, 4), dtype=np.float32))
        assert conv2d(x, w, stride=2, pad=1).shape == (1, 8, 16, 16)

    def test_matches_direct_convolution_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 6, 6))
        w = rng.normal(size=(4, 3, 4, 4))
        out = conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data

        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((2, 4, 3, 3))
        for n in range(2):
            for f in range(4):
                for i in range(3):
                    for j in range(3):
                        patch = xp[n, :, 2 * i : 2 * i + 4, 2 * j : 2 * j + 4]
                        expected[n, f, i, j] = np.sum(patch * w[f])
        np.testing.assert_allclose(out, expected, rtol=1e-5)

    def test_conv2d_gradients(self):
        rng = np.random.default_rng(4)
        x = rand64(rng, 1, 2, 6, 6)
        w = rand64(rng, 3, 2, 4, 4)
        b = rand64(rng, 3)

        def f(p):
            out = conv2d(p[0], p[1], p[2], stride=2, pad=1)
            return engine.tmean(out * out)

        assert grad_check(f, [x, w, b], max_coords=40) < 1e-4

    def test_conv_transpose_gradients(self):
        rng = np.random.default_rng(5)
        y = rand64(rng, 1, 3, 3, 3)
        w = rand64(rng, 3, 2, 4, 4)
        b = rand64(rng, 2)

        def f(p):
            return engine.tmean(conv_transpose2d(p[0], p[1], p[2], stride=2, pad=1))

        assert grad_check(f, [y, w, b], max_coords=40) < 1e-4

    def test_adjoint_identity(self):
        # <conv(x, w), y> == <x, conv_T(y, w)> for random operands
        rng = np.random.default_rng(6)
        for stride, pad in [(1, 0), (2, 1), (1, 1)]:
            x = Tensor(rng.normal(size=(2, 3, 8, 8)))
            w = Tensor(rng.normal(size=(5, 3, 4, 4)))
            cx = conv2d(x, w, stride=stride, pad=pad)
            y = Tensor(rng.normal(size=cx.shape))
            cty = conv_transpose2d(y, w, stride=stride, pad=pad)
            lhs = float(np.sum(cx.data * y.data))
            rhs = float(np.sum(x.data * cty.data))
            assert lhs == pytest.approx(rhs, rel=1e-5)

    def test_channel_mismatch_names_shapes(self):
        x = Tensor(np.zeros((1, 4, 8, 8), dtype=np.float32))
        w = Tensor(np.zeros((2, 3, 3, 3), dtype=np.float32))
        with pytest.raises(ShapeError, match="4 channels.*expects 3"):
            conv2d(x, w, pad=1)

    def test_bad_geometry_rejected(self):
        x = Tensor(np.zeros((1, 1, 7, 7), dtype=np.float32))
        w = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
        with pytest.raises(ShapeError, match="integer output size"):
            conv2d(x, w, stride=2, pad=0)


class TestBatchNorm:
    def test_inference_identity_with_unit_stats(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
        out = engine.batchnorm2d(x, gamma, beta, np.zeros(3), np.ones(3), training=False)
        np.testing.assert_allclose(out.data, x.data, atol=1e-4)

    def test_training_mode_normalizes(self):
        rng = np.random.default_rng(15)
        x = Tensor(rng.normal(3.0, 2.0, size=(4, 2, 5, 5)))
        out = engine.batchnorm2d(
            x, Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), training=True
        )
        assert np.abs(out.data.mean(axis=(0, 2, 3))).max() < 1e-6
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_running_stats_update(self):
        rm, rv = np.zeros(1), np.ones(1)
        x = Tensor(np.full((1, 1, 2, 2), 10.0))
        engine.batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, training=True)
        assert rm[0] == pytest.approx(1.0)  # 0.9*0 + 0.1*10
        assert rv[0] == pytest.approx(0.9)  # 0.9*1 + 0.1*0

    def test_train_mode_gradients(self):
        rng = np.random.default_rng(16)
        x = rand64(rng, 3, 2, 4, 4)
        gamma = t64(rng.uniform(0.5, 1.5, size=2))
        beta = t64(rng.normal(size=2))
        rm, rv = np.zeros(2, dtype=F64), np.ones(2, dtype=F64)

        def f(p):
            out = engine.batchnorm2d(p[0], p[1], p[2], rm.copy(), rv.copy(), training=True)
            return engine.tsum(out * out)

        assert grad_check(f, [x, gamma, beta], max_coords=48) < 1e-4

    def test_eval_mode_gradients_flow_to_input(self):
        rng = np.random.default_rng(17)
        x = rand64(rng, 2, 2, 3, 3)
        gamma = t64(rng.uniform(0.5, 1.5, size=2))
        beta = t64(rng.normal(size=2))
        rm = rng.normal(size=2)
        rv = rng.uniform(0.5, 2.0, size=2)

        def f(p):
            out = engine.batchnorm2d(p[0], p[1], p[2], rm, rv, training=False)
            return engine.tsum(out * out)

        assert grad_check(f, [x, gamma, beta]) < 1e-4


class TestGradCheckHarness:
    def test_constant_function_reports_zero(self):
        x = t64(np.ones(4))
        assert grad_check(lambda p: Tensor(np.float64(2.5)) + engine.tsum(p[0] * 0.0), [x]) == 0.0

    def test_rejects_nonpositive_eps(self):
        x = t64(np.ones(2))
        with pytest.raises(ValueError):
            grad_check(lambda p: engine.tsum(p[0]), [x], eps=0.0)

    def test_flags_nonfinite(self):
        x = t64(np.zeros(2))
        with np.errstate(divide="ignore"), pytest.raises(NumericalError):
            grad_check(lambda p: engine.tsum(engine.tlog(p[0])), [x])

    def test_detects_wrong_gradient(self):
        # a deliberately corrupted gradient must produce a large error
        x = t64(np.ones(3) * 0.7)

        def f(p):
            out = engine.tsum(p[0] * p[0])
            return out + engine.tsum(p[0].detach() * 0.0)

        base = grad_check(f, [x])
        assert base < 1e-6

        def f_corrupt(p):
            return engine.tsum(p[0] * p[0].detach())  # analytic grad misses half

        assert grad_check(f_corrupt, [x]) > 0.3


class TestDeterminism:
    def test_same_seed_same_bytes(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32), requires_grad=True)
            out = engine.tmean(engine.tabs(conv2d(x, w, stride=1, pad=1)))
            out.backward()
            return x.grad.tobytes() + w.grad.tobytes() + out.data.tobytes()

        assert run() == run()
