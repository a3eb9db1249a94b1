# safe_tune/checkpoint.py

# Flat binary checkpoint container:
#   magic (8 bytes) | version (u32) | manifest length (u64) | manifest JSON | float64 LE buffers
# The manifest lists (name, shape, offset, nbytes) per parameter, relative to the
# start of the buffer section, plus adapter status and freeze epoch.

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from safe_tune.exceptions import CheckpointError
from safe_tune.models import AdapterStatusRecord, CheckpointEntry, CheckpointManifest, ModelConfig
from safe_tune.transformer import AdapterState, AdapterStatus, ModelParams

logger = logging.getLogger(__name__)

MAGIC = b"SAFECKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    manifest: CheckpointManifest
    arrays: Dict[str, np.ndarray]

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.model_validate(self.manifest.config)

    def raw_bytes(self, name: str) -> bytes:
        return self.arrays[name].astype("<f8").tobytes()


def save_checkpoint(path: Union[str, Path], params: ModelParams, names: Optional[Iterable[str]] = None,
                    epoch: Optional[int] = None) -> Path:
    """Writes all parameters, or only ``names`` (a partial checkpoint), atomically."""
    path = Path(path)
    selected = list(params.arrays) if names is None else list(names)
    entries: List[CheckpointEntry] = []
    buffers: List[bytes] = []
    offset = 0
    for name in selected:
        if name not in params.arrays:
            raise CheckpointError(f"unknown parameter '{name}'")
        buf = np.ascontiguousarray(params.arrays[name], dtype="<f8").tobytes()
        entries.append(CheckpointEntry(name=name, shape=list(params.arrays[name].shape), offset=offset,
                                       nbytes=len(buf)))
        buffers.append(buf)
        offset += len(buf)

    manifest = CheckpointManifest(
        version=VERSION,
        partial=names is not None,
        epoch=epoch,
        config=params.config.model_dump(mode="json"),
        entries=entries,
        adapters=[AdapterStatusRecord(layer=a.layer, status=a.status.value, freeze_epoch=a.freeze_epoch)
                  for a in params.adapters],
    )
    header_json = manifest.model_dump_json().encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, len(header_json)))
            fh.write(header_json)
            for buf in buffers:
                fh.write(buf)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"failed to write checkpoint {path}: {e}")
    logger.debug(f"Saved checkpoint {path} ({len(entries)} tensors, {offset} bytes)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"{path} is too short to be a checkpoint")
    magic, version, header_len = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a safe_tune checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path} has unsupported checkpoint version {version}")
    start = _HEADER.size + header_len
    try:
        manifest = CheckpointManifest.model_validate_json(blob[_HEADER.size:start])
    except ValidationError as e:
        raise CheckpointError(f"{path} has a corrupt manifest: {e}")

    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest.entries:
        lo = start + entry.offset
        if lo + entry.nbytes > len(blob):
            raise CheckpointError(f"{path}: buffer for {entry.name} is truncated")
        flat = np.frombuffer(blob, dtype="<f8", count=entry.nbytes // 8, offset=lo)
        arrays[entry.name] = flat.astype(np.float64).reshape(entry.shape)
    return Checkpoint(manifest=manifest, arrays=arrays)


def restore_params(checkpoint: Checkpoint, base: Optional[ModelParams] = None) -> ModelParams:
    """
    Rebuilds ModelParams. A partial checkpoint needs ``base`` to supply the missing
    (frozen, never-trained) tensors.
    """
    config = checkpoint.config
    if base is not None and base.config != config:
        raise CheckpointError("checkpoint config does not match the base model config")
    if checkpoint.manifest.partial and base is None:
        raise CheckpointError("partial checkpoint needs a base model to restore from")
    arrays = {} if base is None else {n: a.copy() for n, a in base.arrays.items()}
    arrays.update({n: a.copy() for n, a in checkpoint.arrays.items()})
    adapters = [AdapterState(layer=a.layer, status=AdapterStatus(a.status), freeze_epoch=a.freeze_epoch)
                for a in checkpoint.manifest.adapters]
    return ModelParams(config=config, arrays=arrays, adapters=adapters)


def snapshot_names(params: ModelParams) -> Tuple[str, ...]:
    """Names stored in per-epoch snapshots: every adapter factor plus the head."""
    return tuple(params.adapter_names()) + ("head.w", "head.b")
