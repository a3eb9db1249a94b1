# safe_tune/run_log.py

# Run directory layout:
#   config.yaml            resolved RunConfig, written before the first epoch
#   metrics.jsonl          one EpochMetrics object per line
#   freeze_pattern.csv     epoch x layer importance / frozen flags
#   resources.csv          per-epoch resource report
#   summary.json           RunSummary
#   status.json            running | complete | incomplete
#   checkpoints/           initial.ckpt and epoch_XXX.ckpt (adapters + head), final.ckpt
#                          (initial.ckpt is the untrained state, labelled epoch -1)
# No file carries timestamps, so repeated runs are byte-identical.

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd
from pydantic import ValidationError

from safe_tune.exceptions import RunIOError
from safe_tune.models import EpochMetrics, RunConfig, RunStatus, RunSummary, dump_run_config, load_run_config

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.yaml"
METRICS_FILE = "metrics.jsonl"
FREEZE_PATTERN_FILE = "freeze_pattern.csv"
RESOURCES_FILE = "resources.csv"
SUMMARY_FILE = "summary.json"
STATUS_FILE = "status.json"
CHECKPOINT_DIR = "checkpoints"
FINAL_CHECKPOINT = "final.ckpt"
INITIAL_CHECKPOINT = "initial.ckpt"
INITIAL_EPOCH = -1

RESOURCE_COLUMNS = ["epoch", "activation_bytes", "optimizer_bytes", "fwd_flops", "bwd_flops"]
FREEZE_PATTERN_COLUMNS = ["epoch", "layer", "importance", "cka", "undefined", "candidate", "frozen", "tau"]


def epoch_checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:03d}.ckpt"


def write_csv(rows: Sequence[Dict[str, Any]], path: Union[str, Path], columns: Sequence[str]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(list(rows), columns=list(columns)).to_csv(path, index=False)
    except OSError as e:
        raise RunIOError(f"failed to write {path}: {e}")
    return path


def write_json(payload: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise RunIOError(f"failed to write {path}: {e}")
    return path


def read_json(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise RunIOError(f"cannot read {path}: {e}")


class RunLog:
    """Append-only writer and reader for one run directory."""

    def __init__(self, run_dir: Union[str, Path]):
        self.run_dir = Path(run_dir)

    def path(self, name: str) -> Path:
        return self.run_dir / name

    @property
    def checkpoint_dir(self) -> Path:
        return self.run_dir / CHECKPOINT_DIR

    @property
    def final_checkpoint(self) -> Path:
        return self.checkpoint_dir / FINAL_CHECKPOINT

    @property
    def initial_checkpoint(self) -> Path:
        return self.checkpoint_dir / INITIAL_CHECKPOINT

    def epoch_checkpoint(self, epoch: int) -> Path:
        return self.checkpoint_dir / epoch_checkpoint_name(epoch)

    def epoch_checkpoints(self) -> List[Path]:
        return sorted(self.checkpoint_dir.glob("epoch_*.ckpt"))

    # --- writing ---

    def prepare(self, config: RunConfig) -> None:
        """Creates the directory, saves the resolved config and starts a fresh metrics file."""
        try:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            for stale in self.epoch_checkpoints():
                stale.unlink()
            if self.initial_checkpoint.exists():
                self.initial_checkpoint.unlink()
            self.path(CONFIG_FILE).write_text(dump_run_config(config), encoding="utf-8")
            self.path(METRICS_FILE).write_text("", encoding="utf-8")
        except OSError as e:
            raise RunIOError(f"cannot prepare run directory {self.run_dir}: {e}")
        self.write_status("running")

    def append_epoch(self, metrics: EpochMetrics) -> None:
        try:
            with open(self.path(METRICS_FILE), "a", encoding="utf-8") as fh:
                fh.write(metrics.model_dump_json())
                fh.write("\n")
        except OSError as e:
            raise RunIOError(f"failed to append metrics for epoch {metrics.epoch}: {e}")

    def write_status(self, state: str, error: Optional[str] = None) -> None:
        write_json(RunStatus(state=state, error=error).model_dump(mode="json"), self.path(STATUS_FILE))

    def write_summary(self, summary: RunSummary) -> None:
        write_json(summary.model_dump(mode="json"), self.path(SUMMARY_FILE))

    def write_freeze_pattern(self, metrics: Sequence[EpochMetrics]) -> Path:
        rows = []
        for m in metrics:
            for layer, score in enumerate(m.importance):
                rows.append({
                    "epoch": m.epoch,
                    "layer": layer,
                    "importance": score,
                    "cka": m.cka[layer],
                    "undefined": int(m.undefined[layer]),
                    "candidate": int(layer in m.candidates),
                    "frozen": int(m.frozen[layer]),
                    "tau": m.tau,
                })
        return write_csv(rows, self.path(FREEZE_PATTERN_FILE), FREEZE_PATTERN_COLUMNS)

    def write_resources(self, metrics: Sequence[EpochMetrics]) -> Path:
        rows = [{
            "epoch": m.epoch,
            "activation_bytes": m.resource.activation_bytes,
            "optimizer_bytes": m.resource.optimizer_bytes,
            "fwd_flops": m.resource.forward_flops,
            "bwd_flops": m.resource.backward_flops,
        } for m in metrics]
        return write_csv(rows, self.path(RESOURCES_FILE), RESOURCE_COLUMNS)

    # --- reading ---

    def read_config(self) -> RunConfig:
        path = self.path(CONFIG_FILE)
        if not path.exists():
            raise RunIOError(f"{self.run_dir} is not a run directory (no {CONFIG_FILE})")
        return load_run_config(path)

    def read_metrics(self) -> List[EpochMetrics]:
        try:
            lines = self.path(METRICS_FILE).read_text(encoding="utf-8").splitlines()
            return [EpochMetrics.model_validate_json(line) for line in lines if line.strip()]
        except OSError as e:
            raise RunIOError(f"cannot read metrics of {self.run_dir}: {e}")
        except ValidationError as e:
            raise RunIOError(f"corrupt metrics file in {self.run_dir}: {e}")

    def read_summary(self) -> RunSummary:
        try:
            return RunSummary.model_validate(read_json(self.path(SUMMARY_FILE)))
        except ValidationError as e:
            raise RunIOError(f"corrupt summary in {self.run_dir}: {e}")

    def read_status(self) -> RunStatus:
        return RunStatus.model_validate(read_json(self.path(STATUS_FILE)))
