import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsmprune import nn
from gsmprune.data import Dataset, synthetic_dataset
from gsmprune.errors import ConfigError, DimensionError

from conftest import random_params, tiny_cnn, tiny_mlp
from gradcheck import max_relative_error


def conv_loops(x, kernel, bias, layer):
    """Direct convolution with the unfolded (kh, kw, r) row order."""
    n, r, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (layer.pad, layer.pad), (layer.pad, layer.pad)))
    oh = (h + 2 * layer.pad - layer.h) // layer.stride + 1
    ow = (w + 2 * layer.pad - layer.w) // layer.stride + 1
    out = np.zeros((n, layer.s, oh, ow))
    for b in range(n):
        for o in range(layer.s):
            for i in range(oh):
                for j in range(ow):
                    acc = bias[o]
                    for a in range(layer.h):
                        for d in range(layer.w):
                            for c in range(r):
                                row = (a * layer.w + d) * r + c
                                acc += kernel[row, o] * xp[b, c, i * layer.stride + a,
                                                           j * layer.stride + d]
                    out[b, o, i, j] = acc
    return out


class TestArchitectures:
    def test_lenet_300_100_size(self):
        m = nn.lenet_300_100()
        assert m.kernel_shapes() == [(784, 300), (300, 100), (100, 10)]
        assert sum(p * q for p, q in m.kernel_shapes()) == 266_200

    def test_lenet5_size(self):
        m = nn.lenet5()
        assert m.kernel_shapes() == [(25, 20), (500, 50), (800, 500), (500, 10)]
        assert sum(p * q for p, q in m.kernel_shapes()) == 430_500
        assert m.output_shapes()[3] == (50, 4, 4)

    def test_composition_checked(self):
        with pytest.raises(ConfigError):
            nn.ModelSpec([nn.FullyConnected(4, 3), nn.FullyConnected(2, 2)], (4,), 2)

    def test_class_count_checked(self):
        with pytest.raises(ConfigError):
            nn.ModelSpec([nn.FullyConnected(4, 3)], (4,), 5)

    def test_dict_round_trip(self):
        for m in (nn.lenet5(), tiny_cnn(), tiny_mlp()):
            assert nn.ModelSpec.from_dict(m.to_dict()) == m

    def test_init_bounds(self):
        p = nn.init_params(nn.lenet5(), np.random.default_rng(0))
        for k in p.kernels:
            assert k.dtype == np.float32
            assert np.abs(k).max() <= math.sqrt(6 / k.shape[0])
        assert all(not b.any() for b in p.biases)


class TestForward:
    def test_zero_params_zero_logits(self):
        m = nn.lenet_300_100()
        p = nn.init_params(m, np.random.default_rng(0)).zeros_like()
        x = np.random.default_rng(1).random((3, 1, 28, 28), dtype=np.float32)
        assert not nn.forward(m, p, x)[0].any()

    def test_identity_layer(self):
        m = nn.ModelSpec([nn.FullyConnected(4, 4)], (4,), 4)
        p = nn.ParamSet([np.eye(4, dtype=np.float32)], [np.zeros(4, np.float32)])
        x = np.arange(8, dtype=np.float32).reshape(2, 4)
        np.testing.assert_array_equal(nn.forward(m, p, x)[0], x)

    def test_hand_computed_mlp(self):
        # 2 inputs -> 3 hidden (ReLU) -> 2 outputs, computed entry by entry
        m = nn.mlp([2, 3, 2])
        w1 = [[0.5, -1.0, 0.25], [1.5, 0.5, -0.75]]
        b1 = [0.1, 0.2, -0.3]
        w2 = [[1.0, -2.0], [0.5, 0.25], [-1.0, 3.0]]
        b2 = [0.05, -0.05]
        p = nn.ParamSet([np.array(w1, np.float32), np.array(w2, np.float32)],
                        [np.array(b1, np.float32), np.array(b2, np.float32)])
        x = [1.0, -2.0]
        hidden = [max(0.0, x[0] * w1[0][j] + x[1] * w1[1][j] + b1[j]) for j in range(3)]
        expected = [sum(hidden[j] * w2[j][o] for j in range(3)) + b2[o] for o in range(2)]
        out = nn.forward(m, p, np.array([x], np.float32))[0][0]
        np.testing.assert_allclose(out, expected, rtol=1e-6)

    def test_conv_matches_direct_loops(self, rng):
        layer = nn.Conv2d(3, 2, 2, 4, stride=2, pad=1)
        m = nn.ModelSpec([layer, nn.Flatten()], (2, 5, 6), 4 * 3 * 4)
        p = random_params(m, 3)
        x = rng.standard_normal((2, 2, 5, 6)).astype(np.float32)
        conv_out = nn.forward(m, p, x)[0].reshape(2, 4, 3, 4)
        np.testing.assert_allclose(conv_out, conv_loops(x, p.kernels[0], p.biases[0], layer),
                                   rtol=1e-5, atol=1e-5)

    def test_pure(self, rng):
        m = tiny_cnn()
        p = random_params(m)
        x = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
        np.testing.assert_array_equal(nn.forward(m, p, x)[0], nn.forward(m, p, x)[0])

    def test_shape_mismatch(self):
        m = tiny_mlp()
        with pytest.raises(DimensionError):
            nn.forward(m, random_params(m), np.zeros((2, 6), np.float32))


class TestLoss:
    @pytest.mark.parametrize("k", [2, 10, 37])
    def test_uniform_logits(self, k):
        loss, _ = nn.softmax_cross_entropy(np.zeros((4, k), np.float32), np.arange(4) % k)
        assert loss == pytest.approx(math.log(k), rel=1e-6)

    def test_gradient_closed_form(self, rng):
        logits = rng.standard_normal((5, 4)).astype(np.float32)
        labels = np.array([0, 3, 1, 1, 2])
        _, d = nn.softmax_cross_entropy(logits, labels)
        soft = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        np.testing.assert_allclose(d, (soft - np.eye(4)[labels]) / 5, atol=1e-7)

    def test_non_negative(self, rng):
        for _ in range(20):
            logits = 10 * rng.standard_normal((3, 6)).astype(np.float32)
            assert nn.softmax_cross_entropy(logits, rng.integers(0, 6, 3))[0] >= 0

    def test_label_out_of_range(self):
        m = tiny_mlp()
        p = random_params(m)
        _, cache = nn.forward(m, p, np.zeros((2, 5), np.float32))
        with pytest.raises(ValueError):
            nn.loss_and_backward(m, p, cache, np.array([0, 3]))


class TestGradients:
    @pytest.mark.parametrize("seed", range(6))
    @pytest.mark.parametrize("make", [tiny_cnn, tiny_mlp], ids=["cnn", "mlp"])
    def test_finite_differences(self, make, seed):
        m = make()
        p = random_params(m, seed)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((4, *m.input_shape)).astype(np.float32)
        y = rng.integers(0, m.num_classes, 4)
        worst, checked = max_relative_error(m, p, x, y)
        assert checked > 0.9 * (p.num_kernel_params + p.num_bias_params)
        assert worst <= 1e-3

    def test_maxpool_routes_to_first_max(self):
        x = np.array([[[[1, 3], [3, 0]]]], dtype=np.float32)
        out, saved = nn._maxpool_forward(x)
        assert out.item() == 3
        grad = nn._maxpool_backward(np.ones_like(out), saved)
        np.testing.assert_array_equal(grad, [[[[0, 1], [0, 0]]]])

    def test_relu_gate(self):
        m = nn.ModelSpec([nn.FullyConnected(2, 2), nn.ReLU(), nn.FullyConnected(2, 2)], (2,), 2)
        p = nn.ParamSet([np.array([[1, -1], [0, 0]], np.float32), np.eye(2, dtype=np.float32)],
                        [np.zeros(2, np.float32), np.zeros(2, np.float32)])
        _, cache = nn.forward(m, p, np.array([[1.0, 0.0]], np.float32))
        _, g = nn.loss_and_backward(m, p, cache, np.array([0]))
        # the second hidden unit is off, so its incoming column gets no gradient
        assert not g.kernels[0][:, 1].any() and g.kernels[0][0, 0] != 0


class TestEvaluate:
    def test_constant_predictor(self):
        m = nn.mlp([3, 4], (1, 1, 3))
        p = nn.ParamSet([np.zeros((3, 4), np.float32)], [np.array([1, 0, 0, 0], np.float32)])
        data = Dataset(np.zeros((10, 1, 1, 3), np.float32), np.zeros(10, np.int64), num_classes=4)
        assert nn.evaluate(m, p, data)[0] == 1.0

    def test_random_predictor_near_chance(self):
        # labels independent of inputs: accuracy ~ Binomial(10000, 0.1)/10000, sd 0.003
        m = nn.mlp([16, 32, 10], (1, 1, 16))
        p = random_params(m, 5)
        data = synthetic_dataset(0, 10_000, 10, 16)
        labels = np.random.default_rng(9).integers(0, 10, 10_000)
        acc, loss = nn.evaluate(m, p, Dataset(data.images, labels, num_classes=10))
        assert abs(acc - 0.1) <= 0.03
        assert loss > 0

    def test_empty(self):
        class Empty:
            images = np.zeros((0, 1, 1, 3), np.float32)
            labels = np.zeros(0, np.int64)
        with pytest.raises(ValueError):
            nn.evaluate(nn.mlp([3, 2], (1, 1, 3)), random_params(nn.mlp([3, 2], (1, 1, 3))), Empty())

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 1000))
    def test_accuracy_in_unit_interval(self, seed):
        m = nn.mlp([16, 10], (1, 1, 16))
        acc, _ = nn.evaluate(m, random_params(m, seed), synthetic_dataset(seed, 50, 10, 16))
        assert 0 <= acc <= 1
