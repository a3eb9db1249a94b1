import math

import numpy as np
import pytest

from safe_tune.exceptions import ContractError, ShapeError
from safe_tune.models import ModelConfig
from safe_tune.transformer import (
    Batch,
    adapter_param_names,
    dual_forward,
    forward,
    init_model,
    lora_contribution,
    parameter_shapes,
    predict,
)

from conftest import random_batch, trained_like


def test_same_seed_gives_bit_identical_parameters(tiny_config):
    a, b = init_model(tiny_config, 3), init_model(tiny_config, 3)
    assert set(a.arrays) == set(b.arrays) == set(parameter_shapes(tiny_config))
    for name in a.arrays:
        assert a.arrays[name].tobytes() == b.arrays[name].tobytes()


def test_different_seeds_differ(tiny_config):
    a, b = init_model(tiny_config, 3), init_model(tiny_config, 4)
    assert not np.array_equal(a.arrays["layers.0.attn.wq"], b.arrays["layers.0.attn.wq"])


def test_initial_adapters_contribute_nothing(tiny_params, tiny_batch):
    with_adapters = forward(tiny_params, tiny_batch, (False, False), training=False, track_grad=False)
    for layer in range(2):
        without = forward(tiny_params, tiny_batch, (False, False), training=False, track_grad=False,
                          disabled_adapter=layer)
        np.testing.assert_array_equal(with_adapters.logits.data, without.logits.data)
    for name in tiny_params.adapter_names():
        if name.endswith(".B"):
            assert not tiny_params.arrays[name].any()
    assert not tiny_params.arrays["head.b"].any()


def test_frozen_mask_does_not_change_logits(tiny_params, tiny_batch):
    params = trained_like(tiny_params)
    active = forward(params, tiny_batch, (False, False), training=False)
    frozen = forward(params, tiny_batch, (True, True), training=False)
    np.testing.assert_array_equal(active.logits.data, frozen.logits.data)


def test_all_frozen_gradients_reach_head_only(tiny_params, tiny_batch):
    result = forward(tiny_params, tiny_batch, (True, True))
    assert result.tape.cut_layer == 2
    assert set(result.tape.backward(result.loss)) == {"head.w", "head.b"}


def test_untrained_loss_is_near_log_k(tiny_config):
    params = init_model(tiny_config, 0)
    batch = random_batch(tiny_config, batch_size=1000, seq_len=5, seed=9)
    result = forward(params, batch, (False, False), training=False, track_grad=False)
    assert abs(result.loss.item() - math.log(tiny_config.n_classes)) < 0.1


def test_sequence_longer_than_max_seq_rejected(tiny_params, tiny_config):
    batch = Batch.from_sequences([[1] * (tiny_config.max_seq + 1)], [0])
    with pytest.raises(ShapeError, match="max_seq"):
        forward(tiny_params, batch, (False, False))


def test_out_of_vocab_token_rejected(tiny_params, tiny_config):
    batch = Batch.from_sequences([[1, tiny_config.vocab_size]], [0])
    with pytest.raises(ShapeError, match="token ids"):
        forward(tiny_params, batch, (False, False))


def test_mask_length_must_match_layers(tiny_params, tiny_batch):
    with pytest.raises(ShapeError, match="frozen mask"):
        forward(tiny_params, tiny_batch, (False,))


def test_padding_does_not_leak_into_predictions(tiny_params):
    params = trained_like(tiny_params)
    short = Batch.from_sequences([[3, 4, 5]], [1], seq_len=3)
    padded = Batch.from_sequences([[3, 4, 5]], [1], seq_len=6)
    a = forward(params, short, (False, False), training=False, track_grad=False)
    b = forward(params, padded, (False, False), training=False, track_grad=False)
    np.testing.assert_allclose(a.logits.data, b.logits.data, rtol=1e-10, atol=1e-12)


def test_dual_forward_identical_paths_when_adapters_are_zero(tiny_params, tiny_batch):
    trace = dual_forward(tiny_params, tiny_batch)
    rows = int(tiny_batch.lengths.sum())
    for X, Y in zip(trace.X, trace.Y):
        assert X.shape == Y.shape == (rows, tiny_params.config.d_model)
        np.testing.assert_array_equal(X, Y)


def test_dual_forward_is_causal(tiny_params, tiny_batch):
    params = tiny_params.clone()
    rng = np.random.default_rng(5)
    params.arrays["layers.1.lora_v.B"] = rng.normal(0.0, 0.5, size=params.arrays["layers.1.lora_v.B"].shape)
    trace = dual_forward(params, tiny_batch)
    np.testing.assert_array_equal(trace.X[0], trace.Y[0])
    assert not np.allclose(trace.X[1], trace.Y[1])


def test_dual_forward_matches_direct_recomputation(tiny_params, tiny_batch):
    params = trained_like(tiny_params)
    trace = dual_forward(params, tiny_batch)
    rows = tiny_batch.valid_rows()
    full = forward(params, tiny_batch, (False, False), training=False, track_grad=False)
    np.testing.assert_allclose(trace.X[1], full.layer_outputs[1].data[rows], rtol=1e-12)
    without = forward(params, tiny_batch, (False, False), training=False, track_grad=False, disabled_adapter=1)
    # Layer 1 has the same input either way, so removing its adapter in a full pass matches Y_1.
    np.testing.assert_allclose(trace.Y[1], without.layer_outputs[1].data[rows], rtol=1e-10, atol=1e-12)


def test_lora_contribution_is_linear_in_B(tiny_params):
    params = trained_like(tiny_params)
    hidden = np.random.default_rng(2).normal(size=(7, params.config.d_model))
    base = lora_contribution(params, 0, "q", hidden)
    doubled = params.clone()
    doubled.arrays["layers.0.lora_q.B"] = 2.0 * params.arrays["layers.0.lora_q.B"]
    np.testing.assert_allclose(lora_contribution(doubled, 0, "q", hidden), 2.0 * base, rtol=1e-9)
    A, B = params.arrays["layers.0.lora_q.A"], params.arrays["layers.0.lora_q.B"]
    np.testing.assert_allclose(base, params.config.lora_scaling * (hidden @ A) @ B, rtol=1e-12)


def test_freeze_is_absorbing(tiny_params):
    params = tiny_params.clone()
    params.freeze(1, epoch=3)
    assert params.frozen_mask() == (False, True)
    assert params.adapters[1].freeze_epoch == 3
    assert set(params.trainable_names()) == set(adapter_param_names(0)) | {"head.w", "head.b"}
    with pytest.raises(ContractError, match="already frozen"):
        params.freeze(1, epoch=4)


def test_predict_returns_class_indices(tiny_params, tiny_batch):
    preds = predict(tiny_params, tiny_batch)
    assert preds.shape == (tiny_batch.batch_size,)
    assert set(preds.tolist()) <= {0, 1}


def test_model_config_rejects_indivisible_heads():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(d_model=10, n_heads=4)
