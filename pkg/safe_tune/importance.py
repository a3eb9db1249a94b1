"""
Linear CKA between adapted and original layer activations, and the adapter
importance score derived from it (1 - CKA).
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from safe_tune.exceptions import NumericError, ShapeError
from safe_tune.scheduler import RELATIVE_EPS
from safe_tune.transformer import Batch, ModelParams, dual_forward, forward

logger = logging.getLogger(__name__)

# centering residue of a constant float matrix sits near machine epsilon
DEGENERATE_RTOL = 1e-12


def _check_activation(name: str, m: np.ndarray) -> None:
    if m.ndim != 2 or m.shape[0] < 2:
        raise ShapeError(f"{name} must be a 2-D activation matrix with at least 2 rows, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite entries")


def _centered_or_none(m: np.ndarray) -> Optional[np.ndarray]:
    raw = np.linalg.norm(m)
    centered = m - m.mean(axis=0, keepdims=True)
    if raw == 0.0 or np.linalg.norm(centered) <= DEGENERATE_RTOL * raw:
        return None
    return centered


def cka(X: np.ndarray, Y: np.ndarray, centered: bool = True) -> Optional[float]:
    """
    ||Y~^T X~||_F^2 / (||X~^T X~||_F ||Y~^T Y~||_F) on column-centered copies.

    Returns None (undefined similarity) when either matrix is constant, i.e. its
    centered norm is at most DEGENERATE_RTOL times its raw norm.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    _check_activation("X", X)
    _check_activation("Y", Y)
    if X.shape[0] != Y.shape[0]:
        raise ShapeError(f"X and Y need the same rows, got {X.shape} and {Y.shape}")
    if centered:
        X = _centered_or_none(X)
        Y = _centered_or_none(Y)
        if X is None or Y is None:
            return None
    elif not np.any(X) or not np.any(Y):
        return None
    cross = np.linalg.norm(Y.T @ X, "fro") ** 2
    norm_x = np.linalg.norm(X.T @ X, "fro")
    norm_y = np.linalg.norm(Y.T @ Y, "fro")
    if norm_x == 0.0 or norm_y == 0.0:
        return None
    return float(cross / (norm_x * norm_y))


def importance(X: np.ndarray, Y: np.ndarray, centered: bool = True) -> Optional[float]:
    similarity = cka(X, Y, centered=centered)
    if similarity is None:
        return None
    return float(min(1.0, max(0.0, 1.0 - similarity)))


@dataclass
class ImportanceRecord:
    epoch: int
    scores: Tuple[float, ...]
    cka: Tuple[Optional[float], ...]
    undefined: Tuple[bool, ...]
    relative_change: Tuple[Optional[float], ...]


def relative_changes(previous: Optional[Sequence[float]], current: Sequence[float],
                     eps: float = RELATIVE_EPS) -> Tuple[Optional[float], ...]:
    if previous is None:
        return tuple(None for _ in current)
    return tuple(abs(c - p) / max(p, eps) for p, c in zip(previous, current))


def probe_activations(params: ModelParams, probe_batches: Sequence[Batch]) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Runs dual_forward over every probe batch and stacks rows per layer."""
    if not probe_batches:
        raise ShapeError("probe set is empty")
    traces = [dual_forward(params, batch) for batch in probe_batches]
    n_layers = params.config.n_layers
    X = [np.concatenate([t.X[i] for t in traces], axis=0) for i in range(n_layers)]
    Y = [np.concatenate([t.Y[i] for t in traces], axis=0) for i in range(n_layers)]
    return X, Y


def epoch_importances(params: ModelParams, probe_batches: Sequence[Batch], epoch: int,
                      previous: Optional[ImportanceRecord] = None, centered: bool = True) -> ImportanceRecord:
    X, Y = probe_activations(params, probe_batches)
    similarities = [cka(x, y, centered=centered) for x, y in zip(X, Y)]
    undefined = tuple(s is None for s in similarities)
    # Undefined similarity counts as full importance so it never triggers a freeze.
    scores = tuple(1.0 if s is None else float(min(1.0, max(0.0, 1.0 - s))) for s in similarities)
    for adapter, score in zip(params.adapters, scores):
        adapter.importance_history.append(score)
    record = ImportanceRecord(
        epoch=epoch,
        scores=scores,
        cka=tuple(similarities),
        undefined=undefined,
        relative_change=relative_changes(previous.scores if previous else None, scores),
    )
    if any(undefined):
        logger.warning(f"Undefined CKA at epoch {epoch} for adapters {[i for i, u in enumerate(undefined) if u]}")
    logger.info(f"Epoch {epoch} importance: {[round(s, 4) for s in scores]}")
    return record


def adapted_activations(params: ModelParams, probe_batches: Sequence[Batch]) -> List[np.ndarray]:
    """Block outputs X_i (all adapters live) stacked over the probe set."""
    per_batch = []
    for batch in probe_batches:
        result = forward(params, batch, params.frozen_mask(), training=False, track_grad=False)
        rows = batch.valid_rows()
        per_batch.append([out.data[rows] for out in result.layer_outputs])
    return [np.concatenate([b[i] for b in per_batch], axis=0) for i in range(params.config.n_layers)]


def trajectory_similarity(snapshots: Sequence[ModelParams], final: ModelParams,
                          probe_batches: Sequence[Batch], centered: bool = True) -> np.ndarray:
    """
    Grid[e, i] = CKA between snapshot e's adapted activation of layer i and the final
    model's, on the same probe set. Undefined cells are NaN in the returned grid.
    """
    for snap in snapshots:
        if snap.config != final.config:
            raise ShapeError("snapshot and final model configs differ")
    final_acts = adapted_activations(final, probe_batches)
    grid = np.full((len(snapshots), final.config.n_layers), np.nan)
    for e, snap in enumerate(snapshots):
        acts = adapted_activations(snap, probe_batches)
        for i, (x, y) in enumerate(zip(acts, final_acts)):
            value = cka(x, y, centered=centered)
            if value is not None:
                grid[e, i] = value
    return grid
