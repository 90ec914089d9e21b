import numpy as np
import pytest

from cgp import tensor as T
from cgp.errors import ConfigError
from cgp.layers import Linear
from cgp.tensor import Tensor, grad_check
from cgp.vit import MaskViT, ViTConfig, reset_vit_call_count, vit_call_count


def make_vit(seed=0, dtype=np.float32, **kw):
    cfg = ViTConfig(**kw)
    return MaskViT(cfg, np.random.default_rng(seed), dtype=dtype), cfg


class TestConfig:
    def test_defaults(self):
        cfg = ViTConfig()
        assert cfg.num_patches == 64
        assert cfg.grid == 8

    def test_indivisible_image(self):
        with pytest.raises(ConfigError):
            ViTConfig(image_size=30, patch_size=4)

    def test_indivisible_heads(self):
        with pytest.raises(ConfigError):
            ViTConfig(embed_dim=30, heads=4)


class TestPatchify:
    def test_token_count_with_cls(self):
        vit, cfg = make_vit()
        x = Tensor(np.zeros((2, 3, 32, 32), dtype=np.float32))
        tokens = vit.patchify(x)
        assert tokens.shape == (2, cfg.num_patches + 1, cfg.embed_dim)

    def test_zero_image_zero_pos_gives_bias(self):
        vit, cfg = make_vit()
        vit.pos.data[:] = 0.0
        x = Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32))
        tokens = vit.patchify(x).data
        assert np.allclose(tokens[0, 1:], vit.patch_embed.bias.data, atol=1e-7)

    def test_patch_order_row_major(self):
        # pixel (y=5, x=9) -> grid cell (1, 2) -> patch token index 10
        vit, cfg = make_vit()
        vit.pos.data[:] = 0.0
        vit.patch_embed.bias.data[:] = 0.0
        base = np.zeros((1, 3, 32, 32), dtype=np.float32)
        lit = base.copy()
        lit[0, :, 5, 9] = 1.0
        t_base = vit.patchify(Tensor(base)).data
        t_lit = vit.patchify(Tensor(lit)).data
        changed = np.flatnonzero(np.abs(t_lit - t_base).sum(axis=2)[0])
        assert changed.tolist() == [1 + 10]  # offset by the CLS slot

    def test_wrong_resolution(self):
        vit, _ = make_vit()
        with pytest.raises(ConfigError):
            vit.patchify(Tensor(np.zeros((1, 3, 16, 16), dtype=np.float32)))


class TestEncode:
    def test_depth_zero_is_identity_composition(self):
        vit, cfg = make_vit(depth=0)
        x = Tensor(np.random.default_rng(1).normal(size=(2, 3, 32, 32)).astype(np.float32))
        cls, tokens = vit.encode(x)
        raw = vit.patchify(x).data
        assert np.allclose(cls.data, raw[:, 0], atol=1e-7)
        assert np.allclose(tokens.data, raw[:, 1:], atol=1e-7)

    def test_single_token_attention_is_value_projection(self):
        # with one token, softmax over keys is exactly 1, so attention output
        # equals proj(v(ln(x)))
        vit, _ = make_vit(image_size=4, patch_size=4, embed_dim=8, heads=2, depth=1)
        block = vit.blocks[0]
        rng = np.random.default_rng(2)
        for _, t in block.params():
            t.data = rng.normal(0.0, 0.5, size=t.data.shape).astype(np.float32)
        x = Tensor(rng.normal(size=(3, 1, 8)).astype(np.float32))
        att = block.attention(block.ln1(x))
        expected = block.proj(block.v(block.ln1(x)))
        assert np.allclose(att.data, expected.data, atol=1e-5)

    def test_two_token_attention_matches_qkv_oracle(self):
        vit, _ = make_vit(image_size=8, patch_size=4, embed_dim=4, heads=1, depth=1, dtype=np.float64)
        block = vit.blocks[0]
        rng = np.random.default_rng(3)
        for _, t in block.params():
            t.data = rng.normal(0.0, 0.5, size=t.data.shape)
        x = rng.normal(size=(1, 2, 4))
        got = block.attention(Tensor(x, dtype=np.float64)).data

        def lin(layer, v):
            return v @ layer.weight.data.T + layer.bias.data

        q, k, v = lin(block.q, x[0]), lin(block.k, x[0]), lin(block.v, x[0])
        scores = q @ k.T / np.sqrt(4)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        att = e / e.sum(axis=1, keepdims=True)
        expected = lin(block.proj, att @ v)
        assert np.max(np.abs(got[0] - expected)) < 1e-5


class TestMask:
    def test_zero_head_gives_half_everywhere(self):
        vit, cfg = make_vit()
        vit.mask_head.weight.data[:] = 0.0
        vit.mask_head.bias.data[:] = 0.0
        x = Tensor(np.random.default_rng(4).normal(size=(2, 3, 32, 32)).astype(np.float32))
        mask, _, _ = vit.mask_for(x)
        assert mask.shape == (2, 1, 32, 32)
        assert np.allclose(mask.data, 0.5, atol=1e-7)

    def test_large_bias_saturates_to_one(self):
        vit, _ = make_vit()
        vit.mask_head.weight.data[:] = 0.0
        vit.mask_head.bias.data[:] = 50.0
        x = Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32))
        mask, _, _ = vit.mask_for(x)
        assert np.all(mask.data == 1.0)

    def test_scores_equal_sigmoid_of_linear(self):
        vit, cfg = make_vit(seed=5)
        rng = np.random.default_rng(6)
        tokens = Tensor(rng.normal(size=(2, cfg.num_patches, cfg.embed_dim)).astype(np.float32))
        got = vit.mask_scores(tokens).data
        z = tokens.data @ vit.mask_head.weight.data.T + vit.mask_head.bias.data
        expected = 1.0 / (1.0 + np.exp(-z[..., 0]))
        assert np.allclose(got, expected, atol=1e-6)

    def test_mask_values_in_unit_interval_many_inputs(self):
        vit, _ = make_vit(seed=7)
        rng = np.random.default_rng(8)
        for _ in range(20):
            x = Tensor(rng.normal(0, 2, size=(4, 3, 32, 32)).astype(np.float32))
            mask, _, _ = vit.mask_for(x)
            assert np.all(mask.data >= 0.0) and np.all(mask.data <= 1.0)
            assert np.all(np.isfinite(mask.data))

    def test_mask_gradient_reaches_head(self):
        vit, _ = make_vit(seed=9, dtype=np.float64)
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(1, 3, 32, 32)), dtype=np.float64)
        r = Tensor(rng.normal(size=(1, 1, 32, 32)), dtype=np.float64)

        def f():
            mask, _, _ = vit.mask_for(x)
            return T.tsum(T.mul(mask, r))

        err = grad_check(f, [vit.mask_head.weight, vit.mask_head.bias], sample=8)
        assert err < 1e-5
        assert np.abs(vit.mask_head.weight.grad).max() > 0


class TestConfidence:
    def test_zero_logits_give_half(self):
        vit, _ = make_vit()
        vit.cls_head.weight.data[:] = 0.0
        vit.cls_head.bias.data[:] = 0.0
        logits, c = vit.confidence(Tensor(np.zeros((3, 64), dtype=np.float32)))
        assert np.allclose(c.data, 0.5)

    def test_saturated_logits(self):
        vit, _ = make_vit()
        vit.cls_head.weight.data[:] = 0.0
        vit.cls_head.bias.data[:] = [10.0, -10.0]
        _, c = vit.confidence(Tensor(np.zeros((2, 64), dtype=np.float32)))
        assert np.all(np.abs(c.data - 1.0) < 1e-8)

    def test_known_two_logit_case(self):
        vit, _ = make_vit(dtype=np.float64)
        vit.cls_head.weight.data[:] = 0.0
        vit.cls_head.bias.data[:] = [1.0, 2.0]
        _, c = vit.confidence(Tensor(np.zeros((1, 64)), dtype=np.float64))
        expected = np.exp(2) / (np.exp(1) + np.exp(2))
        assert abs(c.data[0] - expected) < 1e-9

    def test_confidence_bounded_below_by_chance(self):
        vit, _ = make_vit(seed=11)
        rng = np.random.default_rng(12)
        _, c = vit.confidence(Tensor(rng.normal(size=(16, 64)).astype(np.float32)))
        assert np.all(c.data >= 0.5 - 1e-7)  # K = 2
        assert np.all(c.data <= 1.0 + 1e-7)


class TestCallCounter:
    def test_each_public_op_counts(self):
        vit, cfg = make_vit()
        reset_vit_call_count()
        x = Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32))
        cls, tokens = vit.encode(x)
        scores = vit.mask_scores(tokens)
        vit.soft_mask(scores)
        vit.confidence(cls)
        assert vit_call_count() == 4
        reset_vit_call_count()
        assert vit_call_count() == 0


def test_depth0_mask_path_reduces_to_sigmoid_linear_of_patches():
    """With no encoder blocks and zeroed positional terms the mask is a
    sigmoid of a linear map of raw patch pixels."""
    vit, cfg = make_vit(depth=0, dtype=np.float64)
    vit.pos.data[:] = 0.0
    rng = np.random.default_rng(13)
    x = rng.normal(size=(2, 3, 32, 32))
    _, tokens = vit.encode(Tensor(x, dtype=np.float64))
    scores = vit.mask_scores(tokens).data

    patches = (x.reshape(2, 3, 8, 4, 8, 4).transpose(0, 2, 4, 1, 3, 5).reshape(2, 64, 48))
    emb = patches @ vit.patch_embed.weight.data.T + vit.patch_embed.bias.data
    z = emb @ vit.mask_head.weight.data.T + vit.mask_head.bias.data
    expected = 1.0 / (1.0 + np.exp(-z[..., 0]))
    assert np.allclose(scores, expected, atol=1e-9)
