import numpy as np
import pytest

from safe_tune.models import ModelConfig, RunConfig
from safe_tune.transformer import Batch, init_model


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16, vocab_size=12, max_seq=6,
                       n_classes=2, lora_rank=2, lora_alpha=4.0, lora_dropout=0.1)


@pytest.fixture
def tiny_params(tiny_config):
    return init_model(tiny_config, seed=0)


def random_batch(config: ModelConfig, batch_size: int, seq_len: int, seed: int = 0) -> Batch:
    rng = np.random.default_rng(seed)
    lengths = rng.integers(1, seq_len + 1, size=batch_size)
    lengths[0] = seq_len
    seqs = [rng.integers(1, config.vocab_size, size=int(n)).tolist() for n in lengths]
    labels = rng.integers(0, config.n_classes, size=batch_size).tolist()
    return Batch.from_sequences(seqs, labels, seq_len)


def trained_like(params, seed: int = 1, scale: float = 0.3):
    """Copy of ``params`` with non-zero adapter B factors, as after some training."""
    rng = np.random.default_rng(seed)
    out = params.clone()
    for name in out.adapter_names():
        if name.endswith(".B"):
            out.arrays[name] = rng.normal(0.0, scale, size=out.arrays[name].shape)
    return out


@pytest.fixture
def tiny_batch(tiny_config) -> Batch:
    return random_batch(tiny_config, batch_size=3, seq_len=5)


@pytest.fixture
def tiny_run_config(tmp_path) -> RunConfig:
    return RunConfig.model_validate({
        "seed": 0,
        "out_dir": str(tmp_path / "run"),
        "probe_rows": 24,
        "model": {"n_layers": 2, "d_model": 8, "n_heads": 2, "d_ff": 16, "vocab_size": 12, "max_seq": 6,
                  "lora_rank": 2, "lora_alpha": 4.0},
        "schedule": {"policy": "safe", "tau_target": 0.99, "total_epochs": 4, "final_epoch": 2, "warmup": 0},
        "task": {"kind": "parity", "n": 60, "seq_len": 6, "marker_rate": 0.2},
        "optimizer": {"batch_size": 16, "lr": 0.01},
        "analysis": {"eval_examples": 8, "landscape_steps": 3, "spectrum_k": 2, "spectrum_max_iter": 20},
    })
