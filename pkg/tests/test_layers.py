import numpy as np
import pytest

from cgp import tensor as T
from cgp.errors import ContractError, ShapeError
from cgp.layers import (Conv2d, LayerNorm, Linear, avg_pool2d, bilinear_upsample, conv2d,
                        cross_entropy, extract_patches, gelu, global_avg_pool, layer_norm)
from cgp.tensor import Tensor, grad_check


def rnd(seed=0):
    return np.random.default_rng(seed)


class TestLinear:
    def test_zero_weights_returns_bias(self):
        layer = Linear(3, 2, rnd())
        layer.weight.data[:] = 0.0
        layer.bias.data[:] = [1.0, -1.0]
        out = layer(Tensor(rnd(1).normal(size=(4, 3)).astype(np.float32)))
        assert np.allclose(out.data, [[1, -1]] * 4)

    def test_identity_weight(self):
        layer = Linear(3, 3, rnd())
        layer.weight.data = np.eye(3, dtype=np.float32)
        layer.bias.data[:] = 0.0
        x = rnd(2).normal(size=(2, 3)).astype(np.float32)
        assert np.allclose(layer(Tensor(x)).data, x, atol=1e-6)

    def test_matches_matmul_plus_bias_oracle(self):
        rng = rnd(3)
        layer = Linear(4, 2, rng, dtype=np.float64)
        layer.weight.data = rng.normal(size=(2, 4))
        layer.bias.data = rng.normal(size=2)
        x = rng.normal(size=(5, 4))
        expected = x @ layer.weight.data.T + layer.bias.data
        assert np.allclose(layer(Tensor(x, dtype=np.float64)).data, expected, atol=1e-12)

    def test_leading_axes_preserved(self):
        layer = Linear(4, 3, rnd(4))
        out = layer(Tensor(np.zeros((2, 5, 4), dtype=np.float32)))
        assert out.shape == (2, 5, 3)

    def test_trailing_dim_mismatch(self):
        with pytest.raises(ShapeError):
            Linear(4, 3, rnd())(Tensor(np.zeros((2, 5))))


class TestConv2d:
    def test_one_by_one_identity_kernel(self):
        conv = Conv2d(1, 1, 1, rnd(), padding=0)
        conv.kernel.data[:] = 1.0
        conv.bias.data[:] = 0.0
        x = rnd(1).normal(size=(1, 1, 5, 5)).astype(np.float32)
        assert np.allclose(conv(Tensor(x)).data, x)

    def test_all_ones_3x3_on_constant_interior(self):
        conv = Conv2d(1, 1, 3, rnd(), padding=0)
        conv.kernel.data[:] = 1.0
        conv.bias.data[:] = 0.0
        x = np.full((1, 1, 5, 5), 2.0, dtype=np.float32)
        out = conv(Tensor(x)).data
        assert np.allclose(out, 18.0)  # 9 taps * 2

    def test_matches_six_loop_oracle(self):
        rng = rnd(2)
        conv = Conv2d(2, 3, 3, rng, padding=1, dtype=np.float64)
        conv.kernel.data = rng.normal(size=conv.kernel.shape)
        conv.bias.data = rng.normal(size=3)
        x = rng.normal(size=(1, 2, 5, 5))
        out = conv(Tensor(x, dtype=np.float64)).data

        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((1, 3, 5, 5))
        for n in range(1):
            for oc in range(3):
                for oy in range(5):
                    for ox in range(5):
                        acc = conv.bias.data[oc]
                        for ic in range(2):
                            for ky in range(3):
                                for kx in range(3):
                                    acc += conv.kernel.data[oc, ic, ky, kx] * xp[n, ic, oy + ky, ox + kx]
                        expected[n, oc, oy, ox] = acc
        assert np.max(np.abs(out - expected)) < 1e-5

    def test_kernel_larger_than_padded_input(self):
        conv = Conv2d(1, 1, 7, rnd(), padding=0)
        with pytest.raises(ShapeError, match="larger"):
            conv(Tensor(np.zeros((1, 1, 4, 4))))

    def test_channel_mismatch(self):
        conv = Conv2d(3, 4, 3, rnd())
        with pytest.raises(ShapeError):
            conv(Tensor(np.zeros((1, 2, 8, 8))))

    def test_same_padding_preserves_spatial_dims(self):
        for k in (1, 3, 5):
            conv = Conv2d(1, 1, k, rnd(), padding=(k - 1) // 2)
            out = conv(Tensor(np.zeros((1, 1, 8, 8), dtype=np.float32)))
            assert out.shape == (1, 1, 8, 8)

    def test_gradients(self):
        rng = rnd(5)
        conv = Conv2d(2, 2, 3, rng, padding=1, dtype=np.float64)
        x = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True, dtype=np.float64)
        err = grad_check(lambda: T.tsum(T.mul(conv(x), conv(x))), [x, conv.kernel, conv.bias])
        assert err < 1e-5


class TestLayerNorm:
    def test_constant_vector_zero_output(self):
        ln = LayerNorm(4)
        out = ln(Tensor(np.full((2, 4), 3.3, dtype=np.float32)))
        assert np.allclose(out.data, 0.0, atol=1e-3)  # epsilon keeps it finite

    def test_already_normalized(self):
        ln = LayerNorm(2, eps=1e-12, dtype=np.float64)
        out = ln(Tensor(np.array([[1.0, -1.0]]), dtype=np.float64))
        assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_output_statistics(self):
        rng = rnd(6)
        ln = LayerNorm(32, dtype=np.float64)
        out = ln(Tensor(rng.normal(2.0, 3.0, size=(10, 32)), dtype=np.float64)).data
        assert np.max(np.abs(out.mean(axis=-1))) < 1e-6
        assert np.max(np.abs(out.var(axis=-1) - 1.0)) < 1e-4


class TestCrossEntropy:
    def test_uniform_logits_ln2(self):
        z = Tensor(np.zeros((3, 2)))
        assert abs(cross_entropy(z, np.array([0, 1, 0])).item() - np.log(2)) < 1e-6

    def test_saturated_margin(self):
        z = np.zeros((1, 2), dtype=np.float32)
        z[0, 1] = 1000.0
        assert cross_entropy(Tensor(z), np.array([1])).item() < 1e-6

    def test_matches_high_precision_oracle(self):
        z = Tensor(np.array([[1.0, 2.0]]), dtype=np.float64)
        expected = -np.log(np.exp(2.0) / (np.exp(1.0) + np.exp(2.0)))
        assert abs(cross_entropy(z, np.array([1])).item() - expected) < 1e-12

    def test_out_of_range_label(self):
        with pytest.raises(ContractError):
            cross_entropy(Tensor(np.zeros((2, 2))), np.array([0, 2]))

    def test_nonnegative_and_uniform_equals_lnk(self):
        rng = rnd(7)
        for k in (2, 3, 5):
            z = Tensor(rng.normal(size=(4, k)), dtype=np.float64)
            y = rng.integers(0, k, size=4)
            assert cross_entropy(z, y).item() >= 0.0
            uniform = cross_entropy(Tensor(np.zeros((4, k)), dtype=np.float64), y).item()
            assert abs(uniform - np.log(k)) < 1e-12

    def test_per_sample_reduction(self):
        rng = rnd(8)
        z = rng.normal(size=(6, 3))
        y = rng.integers(0, 3, size=6)
        per = cross_entropy(Tensor(z, dtype=np.float64), y, reduction="none")
        mean = cross_entropy(Tensor(z, dtype=np.float64), y)
        assert per.shape == (6,)
        assert abs(per.data.mean() - mean.item()) < 1e-12


class TestPooling:
    def test_gap_constant(self):
        x = Tensor(np.full((2, 3, 4, 4), 0.7, dtype=np.float32))
        assert np.allclose(global_avg_pool(x).data, 0.7)

    def test_gap_small_case(self):
        x = Tensor(np.array([[[[1.0, 3.0], [5.0, 7.0]]]]))
        assert np.allclose(global_avg_pool(x).data, [[4.0]])

    def test_gap_matches_mean_oracle(self):
        rng = rnd(9)
        x = rng.normal(size=(3, 2, 5, 5))
        got = global_avg_pool(Tensor(x, dtype=np.float64)).data
        assert np.allclose(got, x.sum(axis=(2, 3)) / 25.0, atol=1e-12)

    def test_avg_pool_matches_blocks(self):
        rng = rnd(10)
        x = rng.normal(size=(1, 1, 4, 4))
        got = avg_pool2d(Tensor(x, dtype=np.float64), 2).data
        expected = x.reshape(1, 1, 2, 2, 2, 2).mean(axis=(3, 5))
        assert np.allclose(got, expected, atol=1e-12)

    def test_avg_pool_indivisible(self):
        with pytest.raises(ShapeError):
            avg_pool2d(Tensor(np.zeros((1, 1, 5, 5))), 2)


class TestBilinearUpsample:
    def test_constant_grid_exact(self):
        x = Tensor(np.full((1, 3, 3), 0.8, dtype=np.float64))
        out = bilinear_upsample(x, 13, 9).data
        assert np.allclose(out, 0.8, atol=1e-12)

    def test_same_resolution_identity(self):
        rng = rnd(11)
        x = rng.normal(size=(2, 8, 8))
        out = bilinear_upsample(Tensor(x, dtype=np.float64), 8, 8).data
        assert np.allclose(out, x, atol=1e-12)

    def test_2x2_to_4x4_matches_scalar_oracle(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]], dtype=np.float64)

        def oracle(src, oh, ow):
            h, w = src.shape
            out = np.zeros((oh, ow))
            for dy in range(oh):
                for dx in range(ow):
                    sy = min(max((dy + 0.5) * h / oh - 0.5, 0.0), h - 1)
                    sx = min(max((dx + 0.5) * w / ow - 0.5, 0.0), w - 1)
                    y0, x0 = int(np.floor(sy)), int(np.floor(sx))
                    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
                    fy, fx = sy - y0, sx - x0
                    out[dy, dx] = (src[y0, x0] * (1 - fy) * (1 - fx) + src[y0, x1] * (1 - fy) * fx
                                   + src[y1, x0] * fy * (1 - fx) + src[y1, x1] * fy * fx)
            return out

        got = bilinear_upsample(Tensor(x[None]), 4, 4).data[0]
        assert np.max(np.abs(got - oracle(x, 4, 4))) < 1e-6

    def test_output_within_source_range(self):
        rng = rnd(12)
        x = rng.uniform(0.2, 0.9, size=(4, 8, 8))
        out = bilinear_upsample(Tensor(x), 32, 32).data
        assert out.min() >= x.min() - 1e-6
        assert out.max() <= x.max() + 1e-6


class TestPatches:
    def test_counts(self):
        out = extract_patches(Tensor(np.zeros((2, 3, 32, 32), dtype=np.float32)), 4)
        assert out.shape == (2, 64, 48)

    def test_pixel_lands_in_expected_token(self):
        # pixel (y=5, x=9) with patch 4 on a 32px image -> grid cell (1, 2) -> token 10
        x = np.zeros((1, 3, 32, 32), dtype=np.float32)
        x[0, 0, 5, 9] = 1.0
        tokens = extract_patches(Tensor(x), 4).data[0]
        nonzero_tokens = np.flatnonzero(np.abs(tokens).sum(axis=1))
        assert nonzero_tokens.tolist() == [10]
        # inside the token: channel-major, row-major over the 4x4 patch
        assert tokens[10, 0 * 16 + (5 % 4) * 4 + (9 % 4)] == 1.0

    def test_roundtrip_gradient(self):
        x = Tensor(rnd(13).normal(size=(1, 2, 8, 8)), requires_grad=True, dtype=np.float64)
        assert grad_check(lambda: T.tsum(T.mul(extract_patches(x, 4), extract_patches(x, 4))), [x]) < 1e-7


def test_gelu_reference_values():
    # exact erf-based gelu at a few fixed points
    from scipy.special import erf

    x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    expected = 0.5 * x * (1 + erf(x / np.sqrt(2)))
    assert np.allclose(gelu(Tensor(x, dtype=np.float64)).data, expected, atol=1e-12)


def test_parameter_init_recipe():
    rng = rnd(14)
    lin = Linear(256, 128, rng)
    assert abs(float(lin.weight.data.std()) - 0.02) < 0.005
    assert np.all(lin.bias.data == 0.0)
    conv = Conv2d(16, 32, 3, rng)
    bound = np.sqrt(6.0 / (16 * 9))
    assert float(np.abs(conv.kernel.data).max()) <= bound
    assert np.all(conv.bias.data == 0.0)
