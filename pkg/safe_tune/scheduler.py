"""
Selective adapter freezing policy.

Warm-up runs until every adapter's importance moves by less than the tolerance
between consecutive epochs (or the warm-up cap is hit). At that epoch t_w the
adapters with importance below tau_T become freezing candidates; afterwards a
candidate freezes as soon as its importance drops below the cubic threshold
tau_t, which rises from 0 at t_w to tau_T at t_f. Frozen is permanent.
"""
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, FrozenSet, List, Optional, Sequence, Set, Tuple

import numpy as np

from safe_tune.exceptions import ContractError
from safe_tune.models import FreezePolicy, ScheduleConfig

if TYPE_CHECKING:
    from safe_tune.importance import ImportanceRecord

logger = logging.getLogger(__name__)

RELATIVE_EPS = 1e-8
# Relative changes within this of the tolerance count as reaching it (never as below it).
BOUNDARY_SLACK = 1e-9


def cut_layer_for(frozen_mask: Sequence[bool]) -> int:
    """Deepest layer that still trains; len(mask) (the head) when every adapter is frozen."""
    for i, frozen in enumerate(frozen_mask):
        if not frozen:
            return i
    return len(frozen_mask)


def threshold(t: int, tau_target: float, warmup_epoch: Optional[int], final_epoch: int) -> float:
    if warmup_epoch is None or t < warmup_epoch:
        return 0.0
    if t >= final_epoch:
        return tau_target
    progress = (t - warmup_epoch) / (final_epoch - warmup_epoch)
    return tau_target - tau_target * (1.0 - progress) ** 3


def adapter_converged(prev: float, cur: float, tolerance: float = 0.05, eps: float = RELATIVE_EPS) -> bool:
    """
    True when |cur - prev| / max(prev, eps) < tolerance.

    The comparison is made against tolerance - BOUNDARY_SLACK: the slack only ever
    tightens the rule, so a change of exactly the tolerance (0.20 -> 0.21 computes
    to 0.0499999...) still counts as not converged.
    """
    delta = abs(cur - prev)
    if delta < eps:
        return True
    return delta / max(prev, eps) < tolerance - BOUNDARY_SLACK


def warmup_converged(history: Sequence["ImportanceRecord"], tolerance: float = 0.05) -> bool:
    if len(history) < 2:
        return False
    prev, cur = history[-2].scores, history[-1].scores
    return all(adapter_converged(p, c, tolerance) for p, c in zip(prev, cur))


def select_candidates(scores: Sequence[float], tau_target: float) -> FrozenSet[int]:
    return frozenset(i for i, s in enumerate(scores) if s < tau_target)


@dataclass
class FreezeEvent:
    epoch: int
    adapter: int
    importance: float
    tau: float


@dataclass
class FreezeState:
    n_adapters: int
    frozen: List[bool] = field(default_factory=list)
    freeze_epoch: List[Optional[int]] = field(default_factory=list)
    candidates: Optional[FrozenSet[int]] = None
    warmup_epoch: Optional[int] = None
    events: List[FreezeEvent] = field(default_factory=list)

    def __post_init__(self):
        if not self.frozen:
            self.frozen = [False] * self.n_adapters
            self.freeze_epoch = [None] * self.n_adapters

    @property
    def cut_layer(self) -> int:
        return cut_layer_for(self.frozen)

    @property
    def frozen_set(self) -> Set[int]:
        return {i for i, f in enumerate(self.frozen) if f}

    def set_candidates(self, candidates: FrozenSet[int]) -> None:
        if self.candidates is not None:
            raise ContractError("freezing candidates were already selected")
        self.candidates = frozenset(candidates)

    def freeze(self, adapter: int, epoch: int, importance: float, tau: float) -> None:
        if self.candidates is None or adapter not in self.candidates:
            raise ContractError(f"adapter {adapter} is not a freezing candidate")
        if self.frozen[adapter]:
            raise ContractError(f"adapter {adapter} is already frozen")
        self.frozen[adapter] = True
        self.freeze_epoch[adapter] = epoch
        self.events.append(FreezeEvent(epoch, adapter, importance, tau))


@dataclass
class FreezeDecision:
    epoch: int
    tau: float
    newly_frozen: Tuple[int, ...]
    cut_layer: int


def apply_freezing(t: int, scores: Sequence[float], state: FreezeState, tau: float,
                   to_freeze: Optional[Sequence[int]] = None) -> FreezeDecision:
    """
    Freezes every active candidate whose importance is below tau (or exactly the
    adapters in ``to_freeze`` when a policy picks them itself).
    """
    if to_freeze is None:
        to_freeze = [i for i in sorted(state.candidates or ()) if not state.frozen[i] and scores[i] < tau]
    for i in to_freeze:
        state.freeze(i, t, float(scores[i]), tau)
    return FreezeDecision(epoch=t, tau=tau, newly_frozen=tuple(to_freeze), cut_layer=state.cut_layer)


class FreezeScheduler:
    """Epoch-boundary state machine driving one run's freezing decisions."""

    def __init__(self, config: ScheduleConfig, n_adapters: int):
        self.config = config
        self.state = FreezeState(n_adapters=n_adapters)
        if config.warmup != "auto":
            self.state.warmup_epoch = int(config.warmup)
        self.final_epoch = config.resolved_final_epoch
        self.warmup_cap = config.resolved_warmup_cap

    @property
    def warmup_epoch(self) -> Optional[int]:
        return self.state.warmup_epoch

    def threshold(self, t: int) -> float:
        return threshold(t, self.config.tau_target, self.state.warmup_epoch, self.final_epoch)

    def _resolve_warmup(self, epoch: int, history: Sequence["ImportanceRecord"]) -> None:
        if self.state.warmup_epoch is not None:
            return
        if warmup_converged(history, self.config.warmup_tolerance):
            self.state.warmup_epoch = epoch
            logger.info(f"Warm-up converged at epoch {epoch}")
        elif epoch >= self.warmup_cap:
            self.state.warmup_epoch = epoch
            logger.info(f"Warm-up capped at epoch {epoch}")

    def step(self, epoch: int, history: Sequence["ImportanceRecord"]) -> FreezeDecision:
        """
        Decides freezing at the start of ``epoch``; ``history[-1]`` is this epoch's record.
        Undefined importances arrive as 1.0 and therefore never freeze anything.
        """
        record = history[-1]
        # Frozen adapters keep being probed for the logs but never drive decisions.
        scores = list(record.scores)
        self._resolve_warmup(epoch, history)
        t_w = self.state.warmup_epoch
        policy = self.config.policy

        if t_w is not None and epoch == t_w and self.state.candidates is None:
            if policy == FreezePolicy.SAFE:
                self.state.set_candidates(select_candidates(scores, self.config.tau_target))
            elif policy == FreezePolicy.RANDOM:
                rng = np.random.default_rng(self.config.random_seed)
                count = int(round(self.config.random_rate * self.state.n_adapters))
                picked = sorted(int(i) for i in rng.choice(self.state.n_adapters, size=count, replace=False))
                self.state.set_candidates(frozenset(picked))
                logger.info(f"Random policy freezes adapters {picked} at epoch {epoch}")
                return apply_freezing(epoch, scores, self.state, 0.0, to_freeze=picked)
            else:
                self.state.set_candidates(frozenset())
            logger.info(f"Freezing candidates at epoch {epoch}: {sorted(self.state.candidates)}")

        if policy != FreezePolicy.SAFE or t_w is None or epoch < t_w:
            return FreezeDecision(epoch=epoch, tau=self.threshold(epoch), newly_frozen=(),
                                  cut_layer=self.state.cut_layer)

        tau = self.threshold(epoch)
        decision = apply_freezing(epoch, scores, self.state, tau)
        for i in decision.newly_frozen:
            logger.info(f"Froze adapter {i} at epoch {epoch} (importance {scores[i]:.4f} < tau {tau:.4f})")
        return decision
