import numpy as np
import pytest

from cgp import tensor as T
from cgp.cnn import CnnConfig, SmallCnn
from cgp.errors import ConfigError
from cgp.tensor import Tensor, backward
from cgp.vit import reset_vit_call_count, vit_call_count


def make_cnn(seed=0, **kw):
    return SmallCnn(CnnConfig(**kw), np.random.default_rng(seed))


class TestConfig:
    def test_spatial_collapse_rejected(self):
        with pytest.raises(ConfigError):
            CnnConfig(channels=(4,) * 6, image_size=32)

    def test_needs_a_block(self):
        with pytest.raises(ConfigError):
            CnnConfig(channels=())


class TestFeatures:
    def test_zero_input_zero_bias_gives_zero(self):
        cnn = make_cnn()
        out = cnn.features(Tensor(np.zeros((2, 3, 32, 32), dtype=np.float32)))
        assert np.allclose(out.data, 0.0)

    def test_matches_layer_by_layer_composition(self):
        from cgp.layers import avg_pool2d
        from cgp.tensor import relu

        cnn = make_cnn(seed=1)
        x = Tensor(np.random.default_rng(2).normal(size=(2, 3, 32, 32)).astype(np.float32))
        got = cnn.features(x).data
        h = x
        for conv in cnn.convs:
            h = avg_pool2d(relu(conv(h)), 2)
        assert np.array_equal(got, h.data)

    def test_feature_shape(self):
        cnn = make_cnn()
        out = cnn.features(Tensor(np.zeros((4, 3, 32, 32), dtype=np.float32)))
        assert out.shape == (4, 32, 8, 8)


class TestHead:
    def test_zero_features_give_bias(self):
        cnn = make_cnn()
        cnn.head_linear.bias.data[:] = [0.3, -0.7]
        logits = cnn.head(Tensor(np.zeros((3, 32, 8, 8), dtype=np.float32)))
        assert np.allclose(logits.data, [[0.3, -0.7]] * 3)

    def test_matches_gap_linear_oracle(self):
        cnn = make_cnn(seed=3)
        rng = np.random.default_rng(4)
        feats = rng.normal(size=(2, 32, 8, 8)).astype(np.float32)
        got = cnn.head(Tensor(feats)).data
        gap = feats.mean(axis=(2, 3))
        expected = gap @ cnn.head_linear.weight.data.T + cnn.head_linear.bias.data
        assert np.allclose(got, expected, atol=1e-5)


class TestPredict:
    def test_argmax(self):
        cnn = make_cnn()
        assert np.argmax(np.array([0.2, 0.9])) == 1

    def test_tie_breaks_to_lowest_index(self):
        cnn = make_cnn()
        # zero weights and biases -> all logits equal -> class 0
        for _, t in cnn.params():
            t.data[:] = 0.0
        preds = cnn.predict(np.random.default_rng(5).normal(size=(6, 3, 32, 32)).astype(np.float32))
        assert np.all(preds == 0)

    def test_order_preserving_batches(self):
        cnn = make_cnn(seed=6)
        x = np.random.default_rng(7).normal(size=(10, 3, 32, 32)).astype(np.float32)
        assert np.array_equal(cnn.predict(x, batch_size=3), cnn.predict(x, batch_size=10))

    def test_predict_never_touches_the_transformer(self):
        cnn = make_cnn(seed=8)
        reset_vit_call_count()
        cnn.predict(np.random.default_rng(9).normal(size=(4, 3, 32, 32)).astype(np.float32))
        assert vit_call_count() == 0


def test_all_parameters_get_gradients_at_init():
    cnn = make_cnn(seed=10)
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(8, 3, 32, 32)).astype(np.float32))
    from cgp.layers import cross_entropy

    loss = cross_entropy(cnn.forward(x), rng.integers(0, 2, size=8))
    backward(loss)
    for name, t in cnn.params():
        assert t.grad is not None, name
        assert np.abs(t.grad).max() > 0.0, f"{name} has an all-zero gradient"
