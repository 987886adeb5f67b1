"""Forward-path oracles for the tensor ops."""

import math

import numpy as np
import pytest

from codlab.tensor import (
    Tensor,
    add,
    avgpool2d,
    batchnorm2d,
    concat_channels,
    conv2d,
    mul,
    relu,
    resize_bilinear,
    sigmoid,
    split_channels,
)
from codlab.tensor.kernels import available_backends, backend_name, use_backend


def conv_oracle(x, w, stride, pad, groups):
    """Direct six-nested-loop convolution."""
    n, cin, h, wi = x.shape
    cout, cing, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wi + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, cout, ho, wo))
    cpg = cout // groups
    for b in range(n):
        for o in range(cout):
            g = o // cpg
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(cing):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[b, g * cing + ci, oy * stride + i, ox * stride + j] * w[o, ci, i, j]
                    out[b, o, oy, ox] = acc
    return out


class TestConv2d:
    def test_constant_field_sum(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        y = conv2d(x, w, stride=1, pad=1)
        assert y.data[0, 0, 1, 1] == pytest.approx(9.0)

    def test_identity_kernel(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 5)))
        w = np.zeros((3, 3, 1, 1), dtype=np.float32)
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        y = conv2d(x, Tensor(w))
        np.testing.assert_array_equal(y.data, x.data)

    def test_grouped_matches_loop_oracle(self, rng):
        x = rng.standard_normal((2, 4, 8, 8))
        w = rng.standard_normal((6, 2, 3, 3))
        y = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                   stride=1, pad=1, groups=2)
        ref = conv_oracle(x, w, 1, 1, 2)
        rel = np.abs(y.data - ref).max() / max(1.0, np.abs(ref).max())
        assert rel < 1e-6

    def test_grouped_equals_blockwise_convs(self, rng):
        x = rng.standard_normal((1, 6, 7, 7))
        w = rng.standard_normal((9, 2, 3, 3))
        grouped = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                         pad=1, groups=3)
        blocks = []
        for g in range(3):
            blocks.append(conv2d(Tensor(x[:, 2 * g : 2 * g + 2], dtype=np.float64),
                                 Tensor(w[3 * g : 3 * g + 3], dtype=np.float64), pad=1).data)
        np.testing.assert_allclose(grouped.data, np.concatenate(blocks, axis=1),
                                   rtol=1e-6, atol=1e-9)

    def test_rejects_bad_groups(self):
        x = Tensor(np.zeros((1, 3, 4, 4)))
        w = Tensor(np.zeros((4, 1, 3, 3)))
        with pytest.raises(ValueError):
            conv2d(x, w, pad=1, groups=2)

    def test_rejects_even_kernel(self):
        with pytest.raises(ValueError):
            conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))

    @pytest.mark.parametrize("backend", available_backends())
    def test_backends_agree(self, backend, rng):
        x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        previous = backend_name()
        try:
            use_backend(backend)
            got = conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
        finally:
            use_backend(previous)
        ref = conv_oracle(x.astype(np.float64), w.astype(np.float64), 2, 1, 1)
        np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-5)


class TestBatchNorm:
    def test_normalizes_batch_statistics(self, rng):
        x = rng.standard_normal((4, 3, 8, 8)) * 2.0 + 5.0
        out = batchnorm2d(Tensor(x, dtype=np.float64), Tensor(np.ones(3), dtype=np.float64),
                          Tensor(np.zeros(3), dtype=np.float64),
                          np.zeros(3), np.ones(3), training=True)
        mean = out.data.mean(axis=(0, 2, 3))
        var = out.data.var(axis=(0, 2, 3))
        assert np.abs(mean).max() < 1e-5
        assert np.abs(var - 1.0).max() < 1e-4

    def test_zero_gamma_gives_constant_beta(self, rng):
        x = rng.standard_normal((2, 2, 4, 4))
        out = batchnorm2d(Tensor(x), Tensor(np.zeros(2)), Tensor(np.full(2, 0.7)),
                          np.zeros(2), np.ones(2), training=True)
        np.testing.assert_allclose(out.data, 0.7, atol=1e-7)

    def test_matches_two_pass_oracle(self, rng):
        x = rng.standard_normal((3, 4, 6, 6))
        gamma = rng.standard_normal(4)
        beta = rng.standard_normal(4)
        out = batchnorm2d(Tensor(x, dtype=np.float64), Tensor(gamma, dtype=np.float64),
                          Tensor(beta, dtype=np.float64), np.zeros(4), np.ones(4),
                          training=True)
        for c in range(4):
            vals = x[:, c]
            mu = vals.sum() / vals.size
            var = ((vals - mu) ** 2).sum() / vals.size
            ref = gamma[c] * (vals - mu) / np.sqrt(var + 1e-5) + beta[c]
            np.testing.assert_allclose(out.data[:, c], ref, atol=1e-6)

    def test_zero_variance_channel_is_finite(self):
        x = Tensor(np.full((2, 1, 3, 3), 4.2))
        out = batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)),
                          np.zeros(1), np.ones(1), training=True)
        assert np.all(np.isfinite(out.data))


class TestPointwise:
    def test_relu_values(self):
        out = relu(Tensor(np.array([-1.0, 2.0])))
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_sigmoid_zero(self):
        assert sigmoid(Tensor(np.zeros(1))).data[0] == pytest.approx(0.5)

    def test_sigmoid_saturated_matches_scalar_math(self):
        for v in (-20.0, 20.0):
            got = sigmoid(Tensor(np.array([v], dtype=np.float64))).data[0]
            ref = 1.0 / (1.0 + math.exp(-v))
            assert abs(got - ref) < 1e-9


class TestElementwise:
    def test_add_zeros_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        out = add(Tensor(x), Tensor(np.zeros_like(x)))
        np.testing.assert_array_equal(out.data, x)

    def test_mul_ones_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        out = mul(Tensor(x), Tensor(np.ones_like(x)))
        np.testing.assert_array_equal(out.data, x)

    def test_mul_matches_loop(self, rng):
        a = rng.standard_normal((3, 2, 2, 2))
        b = rng.standard_normal((3, 2, 2, 2))
        out = mul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
        ref = np.empty_like(a)
        for idx in np.ndindex(a.shape):
            ref[idx] = a[idx] * b[idx]
        np.testing.assert_array_equal(out.data, ref)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            add(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 3, 4))))


class TestChannels:
    def test_split_32_into_8(self, rng):
        x = Tensor(rng.standard_normal((1, 32, 4, 4)))
        parts = split_channels(x, 8)
        assert len(parts) == 8
        assert all(p.shape == (1, 4, 4, 4) for p in parts)

    def test_concat_split_roundtrip_bitexact(self, rng):
        x = Tensor(rng.standard_normal((2, 12, 5, 5)).astype(np.float32))
        for m in (1, 2, 3, 4, 6, 12):
            back = concat_channels(split_channels(x, m))
            np.testing.assert_array_equal(back.data, x.data)

    def test_indivisible_rejected(self, rng):
        x = Tensor(rng.standard_normal((1, 33, 2, 2)))
        with pytest.raises(ValueError):
            split_channels(x, 8)


class TestResize:
    def test_identity_same_size(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 6, 6)))
        assert resize_bilinear(x, 6, 6) is x

    def test_symmetric_average_to_single_pixel(self):
        x = Tensor(np.array([[[[0.0, 1.0], [1.0, 0.0]]]]))
        out = resize_bilinear(x, 1, 1)
        assert out.data[0, 0, 0, 0] == pytest.approx(0.5)

    def test_matches_per_pixel_interpolation_oracle(self, rng):
        x = rng.standard_normal((1, 1, 8, 8))
        out = resize_bilinear(Tensor(x, dtype=np.float64), 4, 4).data[0, 0]
        ref = np.zeros((4, 4))
        for oy in range(4):
            for ox in range(4):
                sy = (oy + 0.5) * 2.0 - 0.5
                sx = (ox + 0.5) * 2.0 - 0.5
                y0, x0 = int(np.floor(sy)), int(np.floor(sx))
                ty, tx = sy - y0, sx - x0
                y0c, y1c = min(max(y0, 0), 7), min(max(y0 + 1, 0), 7)
                x0c, x1c = min(max(x0, 0), 7), min(max(x0 + 1, 0), 7)
                ref[oy, ox] = ((1 - ty) * (1 - tx) * x[0, 0, y0c, x0c]
                               + (1 - ty) * tx * x[0, 0, y0c, x1c]
                               + ty * (1 - tx) * x[0, 0, y1c, x0c]
                               + ty * tx * x[0, 0, y1c, x1c])
        np.testing.assert_allclose(out, ref, atol=1e-6)


class TestAvgPool:
    def test_constant_input_stays_constant(self):
        x = Tensor(np.full((1, 1, 9, 9), 3.3, dtype=np.float32))
        out = avgpool2d(x, 5, stride=1, pad=2)
        np.testing.assert_allclose(out.data, 3.3, atol=1e-6)

    def test_k1_identity(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 5, 5)).astype(np.float32))
        np.testing.assert_allclose(avgpool2d(x, 1).data, x.data, atol=1e-7)

    def test_matches_window_loop_oracle(self, rng):
        x = rng.standard_normal((2, 2, 7, 7))
        out = avgpool2d(Tensor(x, dtype=np.float64), 3, stride=2, pad=1).data
        n, c, h, w = x.shape
        ho = wo = (7 + 2 - 3) // 2 + 1
        ref = np.zeros((n, c, ho, wo))
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        vals = []
                        for i in range(3):
                            for j in range(3):
                                yy, xx = oy * 2 + i - 1, ox * 2 + j - 1
                                if 0 <= yy < h and 0 <= xx < w:
                                    vals.append(x[b, ch, yy, xx])
                        ref[b, ch, oy, ox] = np.mean(vals)
        np.testing.assert_allclose(out, ref, atol=1e-6)


class TestDeterminism:
    def test_same_inputs_bit_identical(self):
        rng1 = np.random.default_rng(5)
        rng2 = np.random.default_rng(5)
        x1 = rng1.standard_normal((2, 4, 8, 8)).astype(np.float32)
        x2 = rng2.standard_normal((2, 4, 8, 8)).astype(np.float32)
        w1 = rng1.standard_normal((4, 4, 3, 3)).astype(np.float32)
        w2 = rng2.standard_normal((4, 4, 3, 3)).astype(np.float32)
        a = conv2d(Tensor(x1), Tensor(w1), pad=1).data
        b = conv2d(Tensor(x2), Tensor(w2), pad=1).data
        np.testing.assert_array_equal(a, b)
