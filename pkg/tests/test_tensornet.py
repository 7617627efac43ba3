"""Neural core: forward semantics, gradient oracles, optimizers, checkpoints."""

import math

import numpy as np
import pytest

from medrank.errors import DimensionError
from medrank.tensornet import (
    Adam,
    BatchNorm1d,
    BatchNorm2d,
    Conv2d,
    Linear,
    QuadrantPool,
    ReLU,
    SGD,
    Sequential,
    Sigmoid,
    Tensor,
    bce_grad,
    bce_loss,
    conv_out_dim,
    grad_check,
    he_uniform,
    read_manifest,
    relu,
    sigmoid,
    write_manifest,
)


def naive_conv2d(x, weight, bias, stride, padding):
    """Direct quadruple-loop convolution oracle (cross-correlation)."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = weight.shape
    sh, sw = stride
    ph, pw = padding
    padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for c in range(c_in):
                    for a in range(kh):
                        for b in range(kw):
                            acc += weight[o, c, a, b] * padded[c, i * sh + a, j * sw + b]
                out[o, i, j] = acc + (0.0 if bias is None else bias[o])
    return out


class TestBceLoss:
    def test_symmetric_point(self):
        assert bce_loss(np.array([0.5]), np.array([1.0])) == pytest.approx(
            math.log(2), abs=1e-12
        )

    def test_perfect_prediction_is_small(self):
        assert bce_loss(np.array([1.0]), np.array([1.0])) == pytest.approx(
            0.0, abs=1e-9
        )

    def test_clamping_keeps_loss_finite(self):
        assert math.isfinite(bce_loss(np.array([0.0]), np.array([1.0])))

    def test_reductions(self):
        pred = np.array([0.5, 0.5])
        target = np.array([1.0, 0.0])
        assert bce_loss(pred, target, "sum") == pytest.approx(2 * math.log(2))
        assert bce_loss(pred, target, "mean") == pytest.approx(math.log(2))

    def test_grad_matches_finite_difference(self):
        rng = np.random.default_rng(0)
        pred = rng.uniform(0.05, 0.95, size=7)
        target = rng.integers(0, 2, size=7).astype(float)
        grad = bce_grad(pred, target)
        eps = 1e-7
        for i in range(7):
            bumped = pred.copy()
            bumped[i] += eps
            dipped = pred.copy()
            dipped[i] -= eps
            numeric = (bce_loss(bumped, target) - bce_loss(dipped, target)) / (2 * eps)
            assert grad[i] == pytest.approx(numeric, rel=1e-5)


class TestActivations:
    def test_relu_clips_negative(self):
        x = np.array([-3.0, -0.5, 0.0, 2.0])
        np.testing.assert_array_equal(relu(x), [0.0, 0.0, 0.0, 2.0])

    def test_sigmoid_range_and_symmetry(self):
        x = np.linspace(-30, 30, 101)
        s = sigmoid(x)
        assert np.all((s > 0) & (s < 1))
        np.testing.assert_allclose(s + sigmoid(-x), 1.0, atol=1e-12)


class TestLinear:
    def test_identity(self):
        rng = np.random.default_rng(0)
        layer = Linear(3, 3, rng)
        layer.weight.data = np.eye(3)
        layer.bias.data = np.zeros(3)
        x = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(layer.forward(x), x)

    def test_shape_mismatch(self):
        layer = Linear(3, 2, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            layer.forward(np.zeros((4, 5)))

    def test_gradient(self):
        rng = np.random.default_rng(1)
        layer = Linear(4, 3, rng)
        x = rng.standard_normal((5, 4))
        r = rng.standard_normal((5, 3))
        layer.zero_grad()
        layer.forward(x)
        layer.backward(r)
        layer.enable_grad(False)
        err = grad_check(lambda: float((layer.forward(x) * r).sum()), layer.params())
        assert err <= 1e-4


class TestConv2d:
    def test_output_dim_formula(self):
        assert conv_out_dim(7, 3, 2, 1) == 4

    def test_non_positive_output_rejected(self):
        with pytest.raises(DimensionError):
            conv_out_dim(1, 5, 1, 0)

    def test_one_by_one_kernel_preserves_spatial_dims(self):
        rng = np.random.default_rng(0)
        layer = Conv2d(3, 2, (1, 1), rng=rng)
        out = layer.forward(rng.standard_normal((3, 5, 7)))
        assert out.shape == (2, 5, 7)

    def test_matches_naive_oracle_on_random_cases(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            c_in = int(rng.integers(1, 4))
            c_out = int(rng.integers(1, 4))
            h = int(rng.integers(1, 9))
            w = int(rng.integers(1, 9))
            kh = int(rng.integers(1, min(h + 2, 4)))
            kw = int(rng.integers(1, min(w + 2, 4)))
            stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
            padding = (int(rng.integers(0, 2)), int(rng.integers(0, 2)))
            if (h + 2 * padding[0] - kh) < 0 or (w + 2 * padding[1] - kw) < 0:
                continue
            layer = Conv2d(c_in, c_out, (kh, kw), stride, padding, rng)
            x = rng.standard_normal((c_in, h, w))
            expected = naive_conv2d(
                x, layer.weight.data, layer.bias.data, stride, padding
            )
            np.testing.assert_allclose(layer.forward(x), expected, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        layer = Conv2d(2, 3, (3, 3), (2, 2), (1, 1), rng)
        x = rng.standard_normal((2, 5, 5))
        r = rng.standard_normal((3, 3, 3))
        layer.zero_grad()
        layer.forward(x)
        layer.backward(r)
        layer.enable_grad(False)
        err = grad_check(lambda: float((layer.forward(x) * r).sum()), layer.params())
        assert err <= 1e-4

    def test_input_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        layer = Conv2d(2, 2, (2, 2), (1, 1), (1, 1), rng)
        x = rng.standard_normal((2, 3, 3))
        r = rng.standard_normal((2, 4, 4))
        layer.forward(x)
        dx = layer.backward(r)
        eps = 1e-6
        layer.enable_grad(False)
        for idx in [(0, 0, 0), (1, 2, 1), (0, 1, 2)]:
            orig = x[idx]
            x[idx] = orig + eps
            up = float((layer.forward(x) * r).sum())
            x[idx] = orig - eps
            down = float((layer.forward(x) * r).sum())
            x[idx] = orig
            assert dx[idx] == pytest.approx((up - down) / (2 * eps), rel=1e-4)


class TestQuadrantPool:
    def test_constant_input(self):
        pool = QuadrantPool()
        out = pool.forward(np.full((3, 5, 4), 2.5))
        np.testing.assert_allclose(out, 2.5)
        assert out.shape == (12,)

    def test_two_by_two_hand_case(self):
        pool = QuadrantPool()
        out = pool.forward(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        np.testing.assert_array_equal(out, [1.0, 2.0, 3.0, 4.0])

    def test_single_cell(self):
        pool = QuadrantPool()
        out = pool.forward(np.array([[[7.0]]]))
        np.testing.assert_array_equal(out, [7.0, 7.0, 7.0, 7.0])

    def test_odd_dims_overlap(self):
        # 3x3 single channel: quadrants are the four overlapping 2x2 corners.
        x = np.arange(9, dtype=float).reshape(1, 3, 3)
        out = QuadrantPool().forward(x)
        expected = [
            x[0, :2, :2].mean(),
            x[0, :2, 1:].mean(),
            x[0, 1:, :2].mean(),
            x[0, 1:, 1:].mean(),
        ]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_output_length_always_4c(self):
        pool = QuadrantPool()
        rng = np.random.default_rng(0)
        for c in (1, 3):
            for h in (1, 2, 5):
                for w in (1, 4, 7):
                    assert pool.forward(rng.standard_normal((c, h, w))).shape == (4 * c,)
                    pool.clear_cache()

    def test_gradient(self):
        rng = np.random.default_rng(4)
        pool = QuadrantPool()
        x = rng.standard_normal((2, 3, 5))
        r = rng.standard_normal(8)
        pool.forward(x)
        dx = pool.backward(r)
        pool.enable_grad(False)
        eps = 1e-6
        for idx in [(0, 0, 0), (1, 1, 2), (0, 2, 4)]:
            orig = x[idx]
            x[idx] = orig + eps
            up = float((pool.forward(x) * r).sum())
            x[idx] = orig - eps
            down = float((pool.forward(x) * r).sum())
            x[idx] = orig
            assert dx[idx] == pytest.approx((up - down) / (2 * eps), rel=1e-5)


class TestBatchNorm:
    def test_eval_identity_at_default_stats(self):
        bn = BatchNorm1d(3)
        bn.eval()
        x = np.array([[1.0, -2.0, 0.5], [0.0, 1.0, 2.0]])
        np.testing.assert_allclose(bn.forward(x), x, atol=1e-5 * np.abs(x).max() + 1e-6)

    def test_train_normalizes_to_beta_gamma(self):
        bn = BatchNorm1d(2)
        bn.gamma.data[:] = [2.0, 0.5]
        bn.beta.data[:] = [1.0, -1.0]
        rng = np.random.default_rng(0)
        x = rng.standard_normal((64, 2)) * 3.0 + 5.0
        y = bn.forward(x)
        np.testing.assert_allclose(y.mean(axis=0), [1.0, -1.0], atol=1e-9)
        np.testing.assert_allclose(y.std(axis=0), [2.0, 0.5], rtol=1e-4)

    def test_batch_of_one_rejected_in_train_mode(self):
        bn = BatchNorm1d(2)
        with pytest.raises(DimensionError):
            bn.forward(np.zeros((1, 2)))

    def test_batch_of_one_works_in_eval_mode(self):
        bn = BatchNorm1d(2)
        bn.eval()
        assert bn.forward(np.ones((1, 2))).shape == (1, 2)

    def test_running_stats_track_data(self):
        bn = BatchNorm1d(1, momentum=0.5)
        x = np.array([[2.0], [4.0]])
        bn.forward(x)
        assert bn.running_mean[0] == pytest.approx(0.5 * 3.0)
        # unbiased variance of (2, 4) is 2
        assert bn.running_var[0] == pytest.approx(0.5 * 1.0 + 0.5 * 2.0)

    def test_gradient_train_mode(self):
        rng = np.random.default_rng(5)
        bn = BatchNorm1d(4)
        bn.gamma.data[:] = rng.uniform(0.5, 1.5, 4)
        bn.beta.data[:] = rng.standard_normal(4)
        x = rng.standard_normal((6, 4))
        r = rng.standard_normal((6, 4))
        bn.zero_grad()
        bn.forward(x)
        bn.backward(r)
        bn.enable_grad(False)
        err = grad_check(lambda: float((bn.forward(x) * r).sum()), bn.params())
        assert err <= 1e-4

    def test_gradient_eval_mode(self):
        rng = np.random.default_rng(6)
        bn = BatchNorm2d(3)
        bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
        bn.beta.data[:] = rng.standard_normal(3)
        bn.running_mean = rng.standard_normal(3)
        bn.running_var = rng.uniform(0.5, 2.0, 3)
        bn.eval()
        x = rng.standard_normal((3, 4, 5))
        r = rng.standard_normal((3, 4, 5))
        bn.zero_grad()
        bn.forward(x)
        bn.backward(r)
        bn.enable_grad(False)
        err = grad_check(lambda: float((bn.forward(x) * r).sum()), bn.params())
        assert err <= 1e-4

    def test_input_gradient_train_mode(self):
        rng = np.random.default_rng(7)
        bn = BatchNorm1d(3)
        x = rng.standard_normal((5, 3))
        r = rng.standard_normal((5, 3))
        bn.forward(x)
        dx = bn.backward(r)
        bn.enable_grad(False)
        eps = 1e-6
        for idx in [(0, 0), (2, 1), (4, 2)]:
            orig = x[idx]
            x[idx] = orig + eps
            up = float((bn.forward(x) * r).sum())
            x[idx] = orig - eps
            down = float((bn.forward(x) * r).sum())
            x[idx] = orig
            assert dx[idx] == pytest.approx((up - down) / (2 * eps), abs=1e-4)


class TestSequentialComposite:
    def test_linear_sigmoid_bce_gradient(self):
        rng = np.random.default_rng(8)
        net = Sequential([Linear(4, 1, rng), Sigmoid()])
        x = rng.standard_normal((5, 4))
        t = rng.integers(0, 2, size=5).astype(float)
        net.zero_grad()
        probs = net.forward(x)[:, 0]
        net.backward(bce_grad(probs, t)[:, None])
        net.enable_grad(False)
        err = grad_check(lambda: bce_loss(net.forward(x)[:, 0], t), net.params())
        assert err <= 1e-4

    def test_lifo_interleaved_forwards(self):
        # Two forwards through the same net, backwards in reverse order.
        rng = np.random.default_rng(9)
        net = Sequential([Linear(3, 2, rng), ReLU(), Linear(2, 1, rng)])
        x1 = rng.standard_normal((2, 3))
        x2 = rng.standard_normal((4, 3))
        r1 = rng.standard_normal((2, 1))
        r2 = rng.standard_normal((4, 1))
        net.zero_grad()
        net.forward(x1)
        net.forward(x2)
        net.backward(r2)
        net.backward(r1)
        net.enable_grad(False)

        def loss():
            return float(
                (net.forward(x1) * r1).sum() + (net.forward(x2) * r2).sum()
            )

        err = grad_check(loss, net.params())
        assert err <= 1e-4

    def test_backward_without_forward_raises(self):
        net = Sequential([Linear(2, 2, np.random.default_rng(0))])
        with pytest.raises(RuntimeError):
            net.backward(np.zeros((1, 2)))

    def test_no_caching_when_grad_disabled(self):
        net = Sequential([Linear(2, 2, np.random.default_rng(0)), ReLU()])
        net.enable_grad(False)
        net.forward(np.zeros((3, 2)))
        assert net.pending() == 0


class TestOptimizers:
    def test_sgd_zero_gradient_is_noop(self):
        w = Tensor(np.array([1.0, -2.0]))
        w.zero_grad()
        SGD([w], lr=0.5).step()
        np.testing.assert_array_equal(w.data, [1.0, -2.0])

    def test_sgd_hand_step_on_square(self):
        # f(w) = w^2, f'(1) = 2; one step at lr 0.1 gives 0.8
        w = Tensor(np.array([1.0]))
        w.grad = np.array([2.0])
        SGD([w], lr=0.1).step()
        assert w.data[0] == pytest.approx(0.8, abs=1e-12)

    def test_adam_first_step_direction(self):
        rng = np.random.default_rng(0)
        w = Tensor(rng.standard_normal(6))
        grad = rng.standard_normal(6)
        grad[np.abs(grad) < 0.1] = 0.5
        w.grad = grad.copy()
        before = w.data.copy()
        Adam([w], lr=1e-3).step()
        moved = w.data - before
        np.testing.assert_array_equal(np.sign(moved), -np.sign(grad))

    def test_adam_converges_on_quadratic(self):
        w = Tensor(np.array([3.0]))
        opt = Adam([w], lr=0.1)
        for _ in range(200):
            w.grad = 2.0 * w.data
            opt.step()
        assert abs(w.data[0]) < 1e-2

    def test_weight_decay(self):
        w = Tensor(np.array([1.0]))
        w.grad = np.array([0.0])
        SGD([w], lr=0.1, weight_decay=0.5).step()
        assert w.data[0] == pytest.approx(1.0 - 0.1 * 0.5)


class TestInitialization:
    def test_he_uniform_bound_and_determinism(self):
        fan_in = 24
        bound = math.sqrt(6.0 / fan_in)
        a = he_uniform(np.random.default_rng(7), (100, fan_in), fan_in)
        b = he_uniform(np.random.default_rng(7), (100, fan_in), fan_in)
        assert np.abs(a).max() <= bound
        np.testing.assert_array_equal(a, b)


class TestManifest:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "layer.weight": rng.standard_normal((3, 4)),
            "layer.bias": rng.standard_normal(3),
        }
        meta = {"kind": "test", "seed": 7}
        path = tmp_path / "ckpt.json"
        write_manifest(path, meta, arrays)
        loaded_meta, loaded = read_manifest(path)
        assert loaded_meta == meta
        for name, value in arrays.items():
            np.testing.assert_array_equal(loaded[name], value)

    def test_write_is_deterministic(self, tmp_path):
        arrays = {"w": np.ones((2, 2)) / 3.0}
        write_manifest(tmp_path / "a.json", {"k": 1}, arrays)
        write_manifest(tmp_path / "b.json", {"k": 1}, arrays)
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
