"""
Post-hoc instruments over a flattened trainable-parameter vector: Hessian-vector
products by central differences of gradients, a top-k Hessian spectrum by
deflated power iteration, 2-D loss-landscape slices, and the masked deviation
penalty ||(I - M)(theta - theta0)||^2.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from safe_tune.exceptions import ContractError, NumericError, ShapeError
from safe_tune.transformer import HEAD_PARAMS, Batch, ModelParams, forward

logger = logging.getLogger(__name__)

HVP_STEP = 1e-4


class Objective(Protocol):
    """A scalar loss over a flat parameter vector, with its gradient."""

    @property
    def dim(self) -> int: ...

    def blocks(self) -> List[Tuple[str, slice]]: ...

    def loss(self, theta: np.ndarray) -> float: ...

    def grad(self, theta: np.ndarray) -> np.ndarray: ...


class QuadraticObjective:
    """0.5 theta^T A theta + b^T theta with a symmetric A; the Hessian is A."""

    def __init__(self, A: np.ndarray, b: Optional[np.ndarray] = None):
        A = np.asarray(A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ShapeError(f"quadratic form needs a square matrix, got {A.shape}")
        self.A = 0.5 * (A + A.T)
        self.b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def blocks(self) -> List[Tuple[str, slice]]:
        return [("theta", slice(0, self.dim))]

    def loss(self, theta: np.ndarray) -> float:
        return float(0.5 * theta @ self.A @ theta + self.b @ theta)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.A @ theta + self.b


class ModelObjective:
    """
    Mean cross-entropy of the classifier over fixed batches as a function of the
    named parameters (by default the ones still trainable: active adapters + head).
    Dropout is off; the remaining parameters stay at their stored values.
    """

    def __init__(self, params: ModelParams, batches: Sequence[Batch], names: Optional[Sequence[str]] = None):
        if not batches:
            raise ShapeError("objective needs at least one batch")
        if any(b.labels is None for b in batches):
            raise ShapeError("objective batches need labels")
        self.params = params
        self.batches = list(batches)
        self.mask = params.frozen_mask()
        self.names = list(names) if names is not None else params.trainable_names()
        self._slices: List[Tuple[str, slice]] = []
        offset = 0
        for name in self.names:
            size = params.arrays[name].size
            self._slices.append((name, slice(offset, offset + size)))
            offset += size
        self._dim = offset
        self._weights = np.array([b.batch_size for b in self.batches], dtype=np.float64)
        self._weights /= self._weights.sum()

    @property
    def dim(self) -> int:
        return self._dim

    def blocks(self) -> List[Tuple[str, slice]]:
        return list(self._slices)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.params.arrays[n].reshape(-1) for n in self.names])

    def _with(self, theta: np.ndarray) -> ModelParams:
        if theta.shape != (self._dim,):
            raise ShapeError(f"parameter vector has shape {theta.shape}, expected ({self._dim},)")
        arrays = dict(self.params.arrays)
        for name, sl in self._slices:
            arrays[name] = theta[sl].reshape(self.params.arrays[name].shape)
        return ModelParams(config=self.params.config, arrays=arrays, adapters=self.params.adapters,
                           shapes=self.params.shapes)

    def loss(self, theta: np.ndarray) -> float:
        # same accumulation as pipeline.evaluate, so loss(theta) reproduces the recorded val_loss
        params = self._with(theta)
        total, count = 0.0, 0
        for batch in self.batches:
            result = forward(params, batch, self.mask, training=False, track_grad=False)
            total += result.loss.item() * batch.batch_size
            count += batch.batch_size
        return float(total / count)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        params = self._with(theta)
        out = np.zeros(self._dim)
        for w, batch in zip(self._weights, self.batches):
            result = forward(params, batch, self.mask, training=False, track_grad=True)
            grads = result.tape.backward(result.loss)
            for name, sl in self._slices:
                if name in grads:
                    out[sl] += w * grads[name].reshape(-1)
        return out


def hvp(objective: Objective, theta: np.ndarray, v: np.ndarray) -> np.ndarray:
    """(grad(theta + eps v) - grad(theta - eps v)) / (2 eps), eps = 1e-4 (1 + |theta|) / |v|."""
    norm_v = float(np.linalg.norm(v))
    if norm_v == 0.0:
        raise ShapeError("hvp direction must be non-zero")
    eps = HVP_STEP * (1.0 + float(np.linalg.norm(theta))) / norm_v
    g_plus = objective.grad(theta + eps * v)
    g_minus = objective.grad(theta - eps * v)
    if not (np.all(np.isfinite(g_plus)) and np.all(np.isfinite(g_minus))):
        raise NumericError("non-finite gradient while estimating a Hessian-vector product")
    return (g_plus - g_minus) / (2.0 * eps)


def dense_hessian(objective: Objective, theta: np.ndarray) -> np.ndarray:
    """Column-by-column finite-difference Hessian, symmetrized. Small models only."""
    n = objective.dim
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        H[:, i] = hvp(objective, theta, e)
    return 0.5 * (H + H.T)


@dataclass
class Spectrum:
    eigenvalues: List[float]
    residuals: List[float]
    iterations: List[int]
    converged: List[bool]
    vectors: np.ndarray = field(repr=False)

    @property
    def flagged(self) -> bool:
        return not all(self.converged)

    @property
    def lambda_max(self) -> float:
        return self.eigenvalues[0] if self.eigenvalues else float("nan")

    def to_dict(self) -> Dict[str, object]:
        return {
            "eigenvalues": list(self.eigenvalues),
            "residuals": list(self.residuals),
            "iterations": list(self.iterations),
            "converged": list(self.converged),
            "flagged": self.flagged,
            "lambda_max": self.lambda_max,
        }


def _deflate(v: np.ndarray, basis: Sequence[np.ndarray]) -> np.ndarray:
    for u in basis:
        v = v - (u @ v) * u
    return v


def top_k_eigs(objective: Objective, theta: np.ndarray, k: int = 5, tol: float = 1e-4,
               max_iter: int = 200, seed: int = 0) -> Spectrum:
    """
    Power iteration on the deflated operator P H P, where P projects out every
    eigenvector accepted so far. Each eigenvalue is the Rayleigh quotient of its
    vector; a pair is accepted once |Hv - lambda v| / |lambda| < tol. A pair that
    does not get there within max_iter is kept with converged=False.
    """
    if k < 1:
        raise ContractError("k must be at least 1")
    k = min(k, objective.dim)
    rng = np.random.default_rng(seed)
    found: List[np.ndarray] = []
    values, residuals, iterations, converged = [], [], [], []

    for _ in range(k):
        v = _deflate(rng.normal(size=objective.dim), found)
        v = _deflate(v, found)
        v /= np.linalg.norm(v)
        lam, res, ok, it = 0.0, float("inf"), False, 0
        for it in range(1, max_iter + 1):
            hv = _deflate(hvp(objective, theta, v), found)
            lam = float(v @ hv)
            res = float(np.linalg.norm(hv - lam * v))
            if res == 0.0 or res < tol * abs(lam):
                ok = True
                break
            nxt = _deflate(hv, found)
            norm = np.linalg.norm(nxt)
            if norm == 0.0:
                break
            v = nxt / norm
        rel = 0.0 if res == 0.0 else (res / abs(lam) if lam != 0.0 else float("inf"))
        if not ok:
            logger.warning(f"Power iteration stopped after {it} iterations (relative residual {rel:.3e})")
        found.append(v)
        values.append(lam)
        residuals.append(rel)
        iterations.append(it)
        converged.append(ok)

    order = sorted(range(k), key=lambda i: -abs(values[i]))
    spectrum = Spectrum(
        eigenvalues=[values[i] for i in order],
        residuals=[residuals[i] for i in order],
        iterations=[iterations[i] for i in order],
        converged=[converged[i] for i in order],
        vectors=np.stack([found[i] for i in order]),
    )
    logger.info(f"Top-{k} Hessian eigenvalues: {[round(x, 6) for x in spectrum.eigenvalues]}")
    return spectrum


@dataclass
class LandscapeGrid:
    d1: np.ndarray
    d2: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray  # losses[i, j] at theta + alphas[i] d1 + betas[j] d2

    @property
    def center(self) -> float:
        n = len(self.alphas)
        return float(self.losses[n // 2, n // 2])

    def rows(self) -> List[Dict[str, float]]:
        return [{"alpha": float(a), "beta": float(b), "loss": float(self.losses[i, j])}
                for i, a in enumerate(self.alphas) for j, b in enumerate(self.betas)]


def worker_threads() -> int:
    try:
        return max(1, int(os.getenv("SAFE_TUNE_THREADS", "1")))
    except ValueError:
        return 1


def _block_normalized(direction: np.ndarray, theta: np.ndarray, blocks: Sequence[Tuple[str, slice]]) -> np.ndarray:
    out = direction.copy()
    for _, sl in blocks:
        target = np.linalg.norm(theta[sl])
        current = np.linalg.norm(out[sl])
        # Blocks sitting at zero (e.g. untrained biases) get no perturbation.
        out[sl] = out[sl] * (target / current) if target > 0.0 and current > 0.0 else 0.0
    return out


def landscape_directions(objective: Objective, theta: np.ndarray, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    blocks = objective.blocks()
    d1 = _block_normalized(rng.normal(size=objective.dim), theta, blocks)
    d2 = _block_normalized(rng.normal(size=objective.dim), theta, blocks)
    n1 = np.linalg.norm(d1)
    if n1 == 0.0:
        raise NumericError("landscape direction vanished after block normalization")
    d1 = d1 / n1
    for _ in range(2):
        d2 = d2 - (d1 @ d2) * d1
    n2 = np.linalg.norm(d2)
    if n2 == 0.0:
        raise NumericError("landscape directions are collinear")
    return d1, d2 / n2


def landscape(objective: Objective, theta: np.ndarray, radius: float = 1.0, steps: int = 11,
              seed: int = 0, threads: Optional[int] = None) -> LandscapeGrid:
    """Loss over theta + a d1 + b d2 for a, b on a symmetric odd grid in [-radius, radius]."""
    if steps < 1 or steps % 2 == 0:
        raise ContractError(f"landscape needs an odd number of steps, got {steps}")
    if radius <= 0:
        raise ContractError("landscape radius must be positive")
    d1, d2 = landscape_directions(objective, theta, seed)
    half = steps // 2
    axis = radius * (np.arange(steps) - half) / half if half else np.zeros(1)

    points = [(i, j) for i in range(steps) for j in range(steps)]

    def evaluate(point: Tuple[int, int]) -> float:
        i, j = point
        if i == half and j == half:
            return objective.loss(theta)
        return objective.loss(theta + axis[i] * d1 + axis[j] * d2)

    workers = threads or worker_threads()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(evaluate, points))
    else:
        values = [evaluate(p) for p in points]
    losses = np.array(values).reshape(steps, steps)
    logger.info(f"Landscape {steps}x{steps} (radius {radius}): center {losses[half, half]:.6f}, "
                f"max {losses.max():.6f}")
    return LandscapeGrid(d1=d1, d2=d2, alphas=axis.copy(), betas=axis.copy(), losses=losses)


# --- Masked deviation penalty ---

@dataclass
class MaskedDelta:
    theta: np.ndarray
    theta0: np.ndarray
    mask: np.ndarray  # diagonal of M; 1 marks an active coordinate

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        self.theta0 = np.asarray(self.theta0, dtype=np.float64).reshape(-1)
        self.mask = np.asarray(self.mask, dtype=np.float64).reshape(-1)
        if not (self.theta.shape == self.theta0.shape == self.mask.shape):
            raise ShapeError(f"theta {self.theta.shape}, theta0 {self.theta0.shape} and mask {self.mask.shape} "
                             f"must have the same length")
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise ShapeError("mask entries must be 0 or 1")

    @property
    def rank(self) -> int:
        return int(self.mask.sum())


def reg_penalty(delta: MaskedDelta) -> float:
    return float(np.sum(((1.0 - delta.mask) * (delta.theta - delta.theta0)) ** 2))


def penalty_names(params: ModelParams) -> List[str]:
    return params.adapter_names() + list(HEAD_PARAMS)


def masked_delta_for(params: ModelParams, initial: ModelParams) -> MaskedDelta:
    """Adapter factors and head of ``params`` against ``initial``; M keeps active adapters and the head."""
    if params.config != initial.config:
        raise ShapeError("model and initial parameters come from different configs")
    active = set(params.trainable_names())
    names = penalty_names(params)
    theta = np.concatenate([params.arrays[n].reshape(-1) for n in names])
    theta0 = np.concatenate([initial.arrays[n].reshape(-1) for n in names])
    mask = np.concatenate([np.full(params.arrays[n].size, 1.0 if n in active else 0.0) for n in names])
    return MaskedDelta(theta=theta, theta0=theta0, mask=mask)


def adapter_penalty_contributions(params: ModelParams, initial: ModelParams) -> List[float]:
    """Per-layer share of the penalty; active adapters contribute 0."""
    out = []
    for adapter in params.adapters:
        if not adapter.frozen:
            out.append(0.0)
            continue
        out.append(float(sum(np.sum((params.arrays[n] - initial.arrays[n]) ** 2) for n in adapter.names)))
    return out
