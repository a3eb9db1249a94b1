import itertools

import numpy as np
import pytest

from safe_tune.models import ModelConfig
from safe_tune.resource_model import (
    epoch_report,
    flops_per_step,
    layer_activation_bytes,
    modeled_activation_bytes,
    optimizer_bytes,
    reduction_summary,
    summarize_reports,
    trainable_parameter_count,
)
from safe_tune.transformer import forward, init_model

from conftest import random_batch


def _random_config(rng) -> ModelConfig:
    heads = int(rng.choice([1, 2]))
    return ModelConfig(
        n_layers=int(rng.integers(1, 4)),
        d_model=heads * int(rng.choice([2, 4])),
        n_heads=heads,
        d_ff=int(rng.choice([4, 8])),
        vocab_size=10,
        max_seq=6,
        n_classes=int(rng.choice([2, 3])),
        lora_rank=int(rng.choice([1, 2])),
        lora_alpha=2.0,
        lora_dropout=float(rng.choice([0.0, 0.1])),
    )


def test_modeled_bytes_equal_measured_tape_bytes():
    rng = np.random.default_rng(0)
    for trial in range(20):
        config = _random_config(rng)
        mask = tuple(bool(f) for f in rng.integers(0, 2, size=config.n_layers))
        bs, seq = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        params = init_model(config, seed=trial)
        result = forward(params, random_batch(config, bs, seq, seed=trial), mask, seed=trial, step=trial)
        assert result.tape.retained_bytes == modeled_activation_bytes(config, mask, bs, seq), (config, mask)
        fwd, bwd = flops_per_step(config, mask, bs, seq)
        assert result.tape.forward_flops == fwd
        assert result.tape.modeled_backward_flops == bwd


@pytest.fixture
def stack_config():
    return ModelConfig(n_layers=4, d_model=8, n_heads=2, d_ff=16, vocab_size=12, max_seq=6,
                       lora_rank=2, lora_alpha=4.0)


def test_all_frozen_keeps_only_head_activations(stack_config):
    bs, seq = 5, 6
    mask = (True,) * 4
    d, C = stack_config.d_model, stack_config.n_classes
    assert modeled_activation_bytes(stack_config, mask, bs, seq) == 8 * bs * (d + C)
    per_layer = layer_activation_bytes(stack_config, mask, bs, seq)
    assert per_layer[:4] == (0, 0, 0, 0)
    assert per_layer[4] == 8 * bs * (d + C)


def test_cut_in_the_middle_drops_the_lower_layer_terms(stack_config):
    full = layer_activation_bytes(stack_config, (False,) * 4, 4, 6)
    half = layer_activation_bytes(stack_config, (True, True, False, False), 4, 6)
    assert full[1] == full[2] == full[3]
    assert half[:2] == (0, 0)
    assert half[2] == full[0]
    assert half[3:] == full[3:]
    assert sum(half) == sum(full) - full[1] - full[2]


def test_optimizer_bytes_drop_by_one_adapter(stack_config):
    d, r = stack_config.d_model, stack_config.lora_rank
    before = optimizer_bytes(stack_config, (False,) * 4)
    after = optimizer_bytes(stack_config, (True, False, False, False))
    assert before - after == 2 * 8 * 4 * d * r
    head = d * stack_config.n_classes + stack_config.n_classes
    assert trainable_parameter_count(stack_config, (True,) * 4) == head


def test_resources_are_monotone_in_the_frozen_set(stack_config):
    masks = list(itertools.product([False, True], repeat=4))
    forwards = set()
    for small, large in itertools.product(masks, repeat=2):
        if not all(s <= l for s, l in zip(small, large)):
            continue
        assert modeled_activation_bytes(stack_config, large, 3, 5) <= modeled_activation_bytes(stack_config, small, 3, 5)
        assert flops_per_step(stack_config, large, 3, 5)[1] <= flops_per_step(stack_config, small, 3, 5)[1]
        assert optimizer_bytes(stack_config, large) <= optimizer_bytes(stack_config, small)
        forwards.add(flops_per_step(stack_config, small, 3, 5)[0])
    assert len(forwards) == 1


def test_single_adapter_variants_decrease_with_depth(stack_config):
    values = []
    for i in range(4):
        mask = tuple(j != i for j in range(4))
        values.append(modeled_activation_bytes(stack_config, mask, 4, 6))
    assert all(a > b for a, b in zip(values, values[1:]))


def test_backward_flops_match_the_instrumented_engine(stack_config):
    params = init_model(stack_config, seed=0)
    batch = random_batch(stack_config, 4, 6, seed=1)
    counted = {}
    for mask in [(False,) * 4, (True, True, False, False), (True,) * 4]:
        result = forward(params, batch, mask)
        total = []
        result.tape.flop_hook = lambda phase, kind, flops: total.append(flops) if phase == "backward" else None
        result.tape.backward(result.loss)
        counted[mask] = sum(total)
        assert counted[mask] == flops_per_step(stack_config, mask, 4, 6)[1]
    assert counted[(True,) * 4] < counted[(True, True, False, False)] < counted[(False,) * 4]


def test_epoch_report_fields(stack_config):
    mask = (True, False, False, False)
    report = epoch_report(mask, stack_config, 4, 6, epoch=3)
    assert report.cut_layer == 1
    assert report.optimizer_bytes == 2 * 8 * report.trainable_parameter_count
    assert report.gradient_bytes == 8 * report.trainable_parameter_count
    assert sum(report.layer_activation_bytes) == report.activation_bytes
    record = report.to_record()
    assert record.epoch == 3 and record.layer_activation_bytes == list(report.layer_activation_bytes)
    again = epoch_report(mask, stack_config, 4, 6, epoch=4)
    assert again.activation_bytes == report.activation_bytes
    assert again.backward_flops == report.backward_flops


def test_reduction_summary_formatting():
    summary = reduction_summary([100, 100, 50, 50], warmup_epoch=1)
    assert summary.final == "50.00%"
    assert summary.integrated == "25.00%"
    assert summary.after_warmup == "50.00%"
    untouched = reduction_summary([7, 7, 7], warmup_epoch=None)
    assert (untouched.final, untouched.integrated, untouched.after_warmup) == ("0.00%", "0.00%", "0.00%")


def test_summarize_reports_keys(stack_config):
    reports = [epoch_report((False,) * 4, stack_config, 2, 4, 0), epoch_report((True,) * 4, stack_config, 2, 4, 1)]
    summary = summarize_reports(reports, warmup_epoch=0)
    assert set(summary) == {"activation", "optimizer", "backward_flops"}
    assert summary["activation"].final != "0.00%"
