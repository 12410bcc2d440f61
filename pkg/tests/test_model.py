import numpy as np
import pytest

from conftest import numeric_grad, rel_error, small_spec
from incremental_cnn import tensor
from incremental_cnn.exceptions import DimensionError, UsageError
from incremental_cnn.model import (backward, build_model, count_params, extend, forward,
                                   he_init, network_param_count)
from incremental_cnn.optim import OptimConfig, apply_gradients
from incremental_cnn.specs import (ClassifierSpec, NetworkSpec, conv, dense, dropout, flatten,
                                   global_avgpool, maxpool, relu)


def loss_of(model, x, y):
    _, logits = forward(model, x, training=False)
    return tensor.softmax_cross_entropy(logits, y)[0]


class TestHeInit:
    def test_conv_std(self):
        w = he_init(conv(400, kernel=3), (3, 8, 8), 0, np.float64)["weight"]
        assert w.size > 10_000
        assert abs(w.std() / np.sqrt(2 / 27) - 1) < 0.05
        assert np.sqrt(2 / 27) == pytest.approx(0.27217, abs=1e-5)

    def test_dense_std(self):
        w = he_init(dense(20), (512,), 1, np.float64)["weight"]
        assert w.size == 10_240
        assert abs(w.std() / 0.0625 - 1) < 0.05

    def test_bias_zero(self):
        for spec, shape in [(conv(16), (3, 32, 32)), (dense(10), (512,))]:
            assert not he_init(spec, shape, 0)["bias"].any()

    def test_non_trainable_rejected(self):
        with pytest.raises(UsageError):
            he_init(relu(), (3, 4, 4), 0)


class TestForward:
    def test_inference_is_deterministic(self):
        model = build_model(small_spec(), seed=3)
        x = np.random.default_rng(0).random((4, 3, 32, 32)).astype(np.float32)
        _, a = forward(model, x)
        _, b = forward(model, x)
        assert a.tobytes() == b.tobytes()

    def test_empty_backbone_applies_classifier_to_flattened_input(self):
        spec = NetworkSpec((), ClassifierSpec((flatten(), dense(5))), input_shape=(2, 3, 3))
        model = build_model(spec, seed=0, dtype=np.float64)
        x = np.random.default_rng(1).random((1, 2, 3, 3))
        _, logits = forward(model, x)
        p = model.params["classifier.1"]
        np.testing.assert_allclose(logits, x.reshape(1, -1) @ p["weight"] + p["bias"])

    def test_dropout_mask_follows_recorded_stream(self):
        spec = NetworkSpec((), ClassifierSpec((flatten(), dropout(0.5), dense(3))),
                           input_shape=(1, 4, 4))
        model = build_model(spec, seed=11, dtype=np.float64)
        x = np.ones((2, 1, 4, 4))
        _, logits = forward(model, x, training=True)
        mask = (np.random.default_rng([11, 0xD80]).random((2, 16)) >= 0.5) / 0.5
        p = model.params["classifier.2"]
        np.testing.assert_allclose(logits, (x.reshape(2, -1) * mask) @ p["weight"] + p["bias"],
                                   rtol=1e-12)

    def test_dropout_inactive_at_inference(self):
        spec = NetworkSpec((), ClassifierSpec((flatten(), dropout(0.5), dense(3))),
                           input_shape=(1, 2, 2))
        model = build_model(spec, dtype=np.float64)
        x = np.ones((1, 1, 2, 2))
        _, a = forward(model, x)
        p = model.params["classifier.2"]
        np.testing.assert_allclose(a, x.reshape(1, -1) @ p["weight"] + p["bias"])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            forward(build_model(small_spec()), np.zeros((1, 3, 16, 16)))


class TestBackward:
    def test_only_classifier_grads_when_backbone_frozen(self):
        model = build_model(small_spec(), seed=0)
        model.set_frozen([k for k in model.params if k.startswith("backbone.")])
        x = np.random.default_rng(0).random((3, 3, 32, 32)).astype(np.float32)
        cache, logits = forward(model, x, training=True)
        _, g = tensor.softmax_cross_entropy(logits, [0, 1, 2])
        grads = backward(model, cache, g)
        assert set(grads) == {"classifier.1"}
        # nothing upstream of the frozen boundary was cached
        assert all(e is None for e in cache.entries[:cache.start])

    def test_full_network_finite_differences(self):
        spec = NetworkSpec((conv(2), relu(), maxpool(2), conv(3, kernel=1)),
                           ClassifierSpec((flatten(), dense(4), relu(), dense(3))),
                           input_shape=(2, 4, 4))
        model = build_model(spec, seed=5, dtype=np.float64)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((3, 2, 4, 4))
        y = np.array([0, 2, 1])
        cache, logits = forward(model, x, training=True)
        _, g = tensor.softmax_cross_entropy(logits, y)
        grads = backward(model, cache, g)
        assert set(grads) == set(model.trainable_ids())
        for lid, pg in grads.items():
            for name, arr in pg.items():
                num = numeric_grad(lambda: loss_of(model, x, y), model.params[lid][name])
                assert rel_error(arr, num) < 1e-4, (lid, name)

    def test_linearity(self):
        model = build_model(small_spec(), seed=1, dtype=np.float64)
        x = np.random.default_rng(3).random((2, 3, 32, 32))
        cache, logits = forward(model, x, training=True)
        _, g = tensor.softmax_cross_entropy(logits, [1, 4])
        one = backward(model, cache, g)
        cache, _ = forward(model, x, training=True)
        two = backward(model, cache, 2 * g)
        for lid in one:
            for name in one[lid]:
                np.testing.assert_allclose(two[lid][name], 2 * one[lid][name], rtol=1e-12)

    def test_stale_cache(self):
        model = build_model(small_spec(), seed=1)
        x = np.zeros((1, 3, 32, 32), dtype=np.float32)
        cache, logits = forward(model, x, training=True)
        model.touch()
        with pytest.raises(UsageError):
            backward(model, cache, np.zeros_like(logits))

    def test_cache_cannot_be_reused(self):
        model = build_model(small_spec(), seed=1)
        cache, logits = forward(model, np.zeros((1, 3, 32, 32), dtype=np.float32), training=True)
        backward(model, cache, np.zeros_like(logits))
        with pytest.raises(UsageError):
            backward(model, cache, np.zeros_like(logits))


class TestFreeze:
    def test_frozen_bytes_unchanged_and_grad_keys_complete(self):
        model = build_model(small_spec(), seed=0)
        frozen = ["backbone.0"]
        model.set_frozen(frozen)
        before = model.params["backbone.0"]["weight"].tobytes()
        rng = np.random.default_rng(0)
        for _ in range(3):
            x = rng.random((4, 3, 32, 32)).astype(np.float32)
            cache, logits = forward(model, x, training=True)
            _, g = tensor.softmax_cross_entropy(logits, rng.integers(0, 10, 4))
            grads = backward(model, cache, g)
            assert set(grads) == set(model.live_trainable_ids())
            apply_gradients(model, grads, OptimConfig(learning_rate=1e-2))
        assert model.params["backbone.0"]["weight"].tobytes() == before
        assert model.params["backbone.0"]["bias"].tobytes() == bytes(4 * 4)


class TestCounts:
    def test_conv_3_to_16(self):
        spec = NetworkSpec((conv(16),), ClassifierSpec((global_avgpool(), dense(10))))
        model = build_model(spec)
        assert sum(a.size for a in model.params["backbone.0"].values()) == 448
        assert count_params(model) == 448 + 16 * 10 + 10

    def test_dense_512_to_10(self):
        spec = NetworkSpec((), ClassifierSpec((flatten(), dense(10))), input_shape=(512, 1, 1))
        assert count_params(build_model(spec)) == 5130

    def test_empty_model(self):
        spec = NetworkSpec((), ClassifierSpec((flatten(), dense(10))), input_shape=(1, 1, 1))
        model = build_model(spec)
        model.params.clear()
        assert count_params(model) == 0

    def test_live_count_grows(self):
        spec = small_spec()
        model = build_model(spec, live_layers=3)
        first = count_params(model)
        extend(model, 6)
        assert count_params(model) > first
        assert count_params(model) == count_params(model, live_only=False)


def test_extend_keeps_existing_params_and_slots():
    model = build_model(small_spec(), live_layers=3, seed=2)
    model.slots["backbone.0"]["weight"][:] = 0.5
    w = model.params["backbone.0"]["weight"].copy()
    new = extend(model, 6)
    assert set(new) == {"backbone.3", "classifier.1"}
    np.testing.assert_array_equal(model.params["backbone.0"]["weight"], w)
    assert np.all(model.slots["backbone.0"]["weight"] == 0.5)
    assert not model.slots["backbone.3"]["weight"].any()
    assert model.classifier_generation == 1
