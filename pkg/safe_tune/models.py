# safe_tune/models.py

# Pydantic schemas for run configuration and for every record persisted to a run
# directory (metrics lines, summaries, checkpoint manifests, dataset lines).

from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from safe_tune.exceptions import ConfigError

TASK_CLASSES = {"parity": 2, "majority": 2}


class FreezePolicy(str, Enum):
    SAFE = "safe"
    NONE = "none"
    RANDOM = "random"


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_layers: int = Field(4, ge=1)
    d_model: int = Field(64, ge=1)
    n_heads: int = Field(4, ge=1)
    d_ff: int = Field(256, ge=1)
    vocab_size: int = Field(64, ge=3)
    max_seq: int = Field(32, ge=1)
    n_classes: int = Field(2, ge=2)
    lora_rank: int = Field(4, ge=1)
    lora_alpha: float = Field(16.0, gt=0)
    lora_dropout: float = Field(0.1, ge=0.0, lt=1.0)
    init_std: float = Field(0.02, gt=0)

    @model_validator(mode="after")
    def _check_heads(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def lora_scaling(self) -> float:
        return self.lora_alpha / self.lora_rank


class ScheduleConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    policy: FreezePolicy = FreezePolicy.SAFE
    tau_target: float = Field(0.1, gt=0.0, lt=1.0)
    total_epochs: int = Field(40, ge=1)
    final_epoch: Optional[int] = Field(None, ge=1)
    warmup: Union[Literal["auto"], int] = "auto"
    warmup_cap: Optional[int] = Field(None, ge=0)
    warmup_tolerance: float = Field(0.05, gt=0.0, lt=1.0)
    random_rate: float = Field(0.5, ge=0.0, le=1.0)
    random_seed: int = 0

    @model_validator(mode="after")
    def _check_epochs(self) -> "ScheduleConfig":
        t_f = self.resolved_final_epoch
        if t_f > self.total_epochs:
            raise ValueError(f"final_epoch ({t_f}) must not exceed total_epochs ({self.total_epochs})")
        if self.warmup != "auto":
            if self.warmup < 0:
                raise ValueError("warmup must be 'auto' or a non-negative epoch index")
            if self.warmup >= t_f:
                raise ValueError(f"warmup ({self.warmup}) must be smaller than final_epoch ({t_f})")
        return self

    @property
    def resolved_final_epoch(self) -> int:
        if self.final_epoch is not None:
            return self.final_epoch
        return max(1, int(0.6 * self.total_epochs))

    @property
    def resolved_warmup_cap(self) -> int:
        cap = self.warmup_cap if self.warmup_cap is not None else int(0.3 * self.total_epochs)
        return max(0, min(cap, self.resolved_final_epoch - 1))


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    lr: float = Field(5e-3, gt=0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.01, ge=0.0)
    batch_size: int = Field(32, ge=1)


class TaskSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["parity", "majority", "copy_first_token"] = "parity"
    n: int = Field(10_000, ge=10)
    seq_len: int = Field(32, ge=1)
    marker_rate: float = Field(0.1, gt=0.0, lt=0.5)
    path: Optional[str] = None
    seed: Optional[int] = None


class AnalysisConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    eval_examples: int = Field(128, ge=1)
    landscape_radius: float = Field(1.0, gt=0)
    landscape_steps: int = Field(11, ge=1)
    spectrum_k: int = Field(5, ge=1)
    spectrum_tol: float = Field(1e-4, gt=0)
    spectrum_max_iter: int = Field(200, ge=1)

    @model_validator(mode="after")
    def _check_grid(self) -> "AnalysisConfig":
        if self.landscape_steps % 2 == 0:
            raise ValueError(f"landscape_steps must be odd, got {self.landscape_steps}")
        return self


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    model: ModelConfig = ModelConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    task: TaskSpec = TaskSpec()
    optimizer: OptimizerConfig = OptimizerConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    seed: int = 0
    out_dir: str = "runs/default"
    probe_rows: int = Field(512, ge=2)
    centered_cka: bool = True

    @model_validator(mode="after")
    def _check_task_fits_model(self) -> "RunConfig":
        if self.task.seq_len > self.model.max_seq:
            raise ValueError(f"task.seq_len ({self.task.seq_len}) exceeds model.max_seq ({self.model.max_seq})")
        expected = TASK_CLASSES.get(self.task.kind)
        if self.task.path is None and expected is not None and self.model.n_classes != expected:
            raise ValueError(f"model.n_classes must be {expected} for the {self.task.kind} task")
        if self.task.kind == "copy_first_token" and self.model.n_classes > self.model.vocab_size:
            raise ValueError("model.n_classes must not exceed model.vocab_size for copy_first_token")
        return self

    @property
    def task_seed(self) -> int:
        return self.task.seed if self.task.seed is not None else self.seed


# --- Persisted records ---

class ExampleRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tokens: List[int] = Field(min_length=1)
    label: int = Field(ge=0)
    split: Optional[Literal["train", "valid", "probe"]] = None


class FreezeEventRecord(BaseModel):
    epoch: int
    adapter: int
    importance: float
    tau: float


class ResourceRecord(BaseModel):
    epoch: int
    cut_layer: int
    activation_bytes: int
    optimizer_bytes: int
    gradient_bytes: int
    parameter_bytes: int
    trainable_parameter_count: int
    forward_flops: int
    backward_flops: int
    layer_activation_bytes: List[int]


class EpochMetrics(BaseModel):
    epoch: int
    steps: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    importance: List[float]
    cka: List[Optional[float]]
    undefined: List[bool]
    relative_change: List[Optional[float]]
    tau: float
    warmup_epoch: Optional[int]
    candidates: List[int]
    frozen: List[bool]
    freeze_events: List[FreezeEventRecord]
    resource: ResourceRecord


class ReductionSummary(BaseModel):
    final: str
    integrated: str
    after_warmup: str


class RunSummary(BaseModel):
    policy: FreezePolicy
    task: str
    seed: int
    epochs: int
    warmup_epoch: Optional[int]
    final_val_accuracy: float
    final_val_loss: float
    final_train_loss: float
    frozen_fraction: float
    frozen_adapters: List[int]
    activation_bytes_total: int
    optimizer_bytes_total: int
    backward_flops_total: int
    forward_flops_total: int
    activation_reduction: ReductionSummary
    optimizer_reduction: ReductionSummary
    backward_flops_reduction: ReductionSummary


class RunStatus(BaseModel):
    state: Literal["running", "complete", "incomplete"]
    error: Optional[str] = None


class CheckpointEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int
    nbytes: int


class AdapterStatusRecord(BaseModel):
    layer: int
    status: Literal["active", "frozen"]
    freeze_epoch: Optional[int] = None


class CheckpointManifest(BaseModel):
    version: int
    partial: bool
    epoch: Optional[int] = None
    config: Dict[str, Any]
    entries: List[CheckpointEntry]
    adapters: List[AdapterStatusRecord]


# --- Config file IO ---

def format_validation_error(error: ValidationError) -> str:
    """Render pydantic errors as 'dotted.field.path: message' pairs."""
    parts = []
    for err in error.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{path}: {err['msg']}")
    return "; ".join(parts)


def load_run_config(path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Reads a YAML run config and validates it.

    Args:
        path: YAML file path
        overrides: dotted-key overrides applied before validation (e.g. {"schedule.policy": "none"})

    Returns:
        Validated RunConfig
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(f"<root>: config {path} must be a mapping")

    for dotted, value in (overrides or {}).items():
        node = raw
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value

    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e))


def dump_run_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=True)
