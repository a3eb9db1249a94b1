"""
Per-step resource accounting as a function of the frozen mask.

Activation bytes and FLOPs come from tracing the model's forward graph with
shape-only tensors through the engine's primitive table, the same table the
engine consults when it records a real step. Optimizer, gradient and parameter
bytes follow from the trainable parameter count.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

from safe_tune.models import ModelConfig, ReductionSummary, ResourceRecord
from safe_tune.scheduler import cut_layer_for
from safe_tune.tensor_engine import BYTES_PER_ELEMENT, Tape, numel
from safe_tune.transformer import Batch, forward, meta_parameters, parameter_shapes

logger = logging.getLogger(__name__)

MOMENT_BUFFERS = 2


@dataclass(frozen=True)
class ResourceReport:
    epoch: int
    cut_layer: int
    activation_bytes: int
    optimizer_bytes: int
    gradient_bytes: int
    parameter_bytes: int
    trainable_parameter_count: int
    forward_flops: int
    backward_flops: int
    layer_activation_bytes: Tuple[int, ...]

    def to_record(self) -> ResourceRecord:
        return ResourceRecord(
            epoch=self.epoch,
            cut_layer=self.cut_layer,
            activation_bytes=self.activation_bytes,
            optimizer_bytes=self.optimizer_bytes,
            gradient_bytes=self.gradient_bytes,
            parameter_bytes=self.parameter_bytes,
            trainable_parameter_count=self.trainable_parameter_count,
            forward_flops=self.forward_flops,
            backward_flops=self.backward_flops,
            layer_activation_bytes=list(self.layer_activation_bytes),
        )


@lru_cache(maxsize=256)
def trace_step(config: ModelConfig, frozen_mask: Tuple[bool, ...], batch: int, seq: int,
               training: bool = True) -> Tape:
    """Symbolic tape of one training step; no arithmetic is performed."""
    params = meta_parameters(config)
    result = forward(params, Batch.symbolic(batch, seq), frozen_mask, training=training)
    return result.tape


def modeled_activation_bytes(config: ModelConfig, frozen_mask: Sequence[bool], batch: int, seq: int,
                             training: bool = True) -> int:
    return trace_step(config, tuple(bool(f) for f in frozen_mask), batch, seq, training).retained_bytes


def layer_activation_bytes(config: ModelConfig, frozen_mask: Sequence[bool], batch: int, seq: int,
                           training: bool = True) -> Tuple[int, ...]:
    """Bytes per layer 0..L-1 followed by the head (index L)."""
    by_layer = trace_step(config, tuple(bool(f) for f in frozen_mask), batch, seq, training).retained_bytes_by_layer()
    return tuple(by_layer.get(i, 0) for i in range(config.n_layers + 1))


def flops_per_step(config: ModelConfig, frozen_mask: Sequence[bool], batch: int, seq: int,
                   training: bool = True) -> Tuple[int, int]:
    tape = trace_step(config, tuple(bool(f) for f in frozen_mask), batch, seq, training)
    return tape.forward_flops, tape.modeled_backward_flops


def trainable_parameter_count(config: ModelConfig, frozen_mask: Sequence[bool]) -> int:
    shapes = parameter_shapes(config)
    count = numel(shapes["head.w"]) + numel(shapes["head.b"])
    for layer, frozen in enumerate(frozen_mask):
        if not frozen:
            count += sum(numel(shapes[n]) for n in shapes if n.startswith(f"layers.{layer}.lora_"))
    return count


def optimizer_bytes(config: ModelConfig, frozen_mask: Sequence[bool]) -> int:
    return MOMENT_BUFFERS * BYTES_PER_ELEMENT * trainable_parameter_count(config, frozen_mask)


def parameter_bytes(config: ModelConfig) -> int:
    return BYTES_PER_ELEMENT * sum(numel(s) for s in parameter_shapes(config).values())


def epoch_report(frozen_mask: Sequence[bool], config: ModelConfig, batch: int, seq: int, epoch: int) -> ResourceReport:
    mask = tuple(bool(f) for f in frozen_mask)
    count = trainable_parameter_count(config, mask)
    fwd, bwd = flops_per_step(config, mask, batch, seq)
    return ResourceReport(
        epoch=epoch,
        cut_layer=cut_layer_for(mask),
        activation_bytes=modeled_activation_bytes(config, mask, batch, seq),
        optimizer_bytes=MOMENT_BUFFERS * BYTES_PER_ELEMENT * count,
        gradient_bytes=BYTES_PER_ELEMENT * count,
        parameter_bytes=parameter_bytes(config),
        trainable_parameter_count=count,
        forward_flops=fwd,
        backward_flops=bwd,
        layer_activation_bytes=layer_activation_bytes(config, mask, batch, seq),
    )


def percent_reduction(baseline: float, value: float) -> float:
    if baseline == 0:
        return 0.0
    return 100.0 * (baseline - value) / baseline


def format_percent(value: float) -> str:
    return f"{value:.2f}%"


def reduction_summary(values: Sequence[int], warmup_epoch: Optional[int]) -> ReductionSummary:
    """
    Reductions against keeping the epoch-0 value for the whole run: at the last
    epoch, integrated over all epochs, and integrated over the epochs after t_w.
    """
    baseline = values[0]
    after = list(values[warmup_epoch + 1:]) if warmup_epoch is not None else []
    return ReductionSummary(
        final=format_percent(percent_reduction(baseline, values[-1])),
        integrated=format_percent(percent_reduction(baseline * len(values), sum(values))),
        after_warmup=format_percent(percent_reduction(baseline * len(after), sum(after)) if after else 0.0),
    )


def summarize_reports(reports: List[ResourceReport], warmup_epoch: Optional[int]) -> Dict[str, ReductionSummary]:
    return {
        "activation": reduction_summary([r.activation_bytes for r in reports], warmup_epoch),
        "optimizer": reduction_summary([r.optimizer_bytes for r in reports], warmup_epoch),
        "backward_flops": reduction_summary([r.backward_flops for r in reports], warmup_epoch),
    }
