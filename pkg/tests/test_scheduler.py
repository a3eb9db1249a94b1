import numpy as np
import pytest

from safe_tune.exceptions import ContractError
from safe_tune.importance import ImportanceRecord
from safe_tune.models import ScheduleConfig
from safe_tune.scheduler import (
    FreezeScheduler,
    FreezeState,
    adapter_converged,
    apply_freezing,
    cut_layer_for,
    select_candidates,
    threshold,
    warmup_converged,
)


def _record(epoch, scores):
    return ImportanceRecord(epoch=epoch, scores=tuple(scores), cka=tuple(1.0 - s for s in scores),
                            undefined=tuple(False for _ in scores), relative_change=tuple(None for _ in scores))


@pytest.mark.parametrize("t, expected", [(3, 0.0), (5, 0.0), (10, 0.0875), (15, 0.1), (40, 0.1)])
def test_threshold_examples(t, expected):
    assert threshold(t, 0.1, warmup_epoch=5, final_epoch=15) == pytest.approx(expected, abs=1e-15)


def test_threshold_terminal_branch_is_exact():
    for t in (15, 16, 100):
        assert threshold(t, 0.37, 5, 15) == 0.37


def test_threshold_midpoint_and_monotone():
    tau = 0.3
    assert threshold(10, tau, 5, 15) == pytest.approx(0.875 * tau)
    values = [threshold(t, tau, 5, 15) for t in range(30)]
    assert all(b >= a for a, b in zip(values, values[1:]))


def test_threshold_is_zero_before_warmup_resolves():
    assert threshold(20, 0.1, None, 15) == 0.0


def test_warmup_examples():
    assert warmup_converged([_record(0, [0.50, 0.20]), _record(1, [0.51, 0.205])])
    assert not warmup_converged([_record(0, [0.50, 0.20]), _record(1, [0.50, 0.21])])
    assert not warmup_converged([_record(0, [0.5, 0.2])])


def test_warmup_epsilon_floor():
    assert adapter_converged(0.0, 1e-9)
    assert not adapter_converged(0.0, 0.01)


@pytest.mark.parametrize("prev", [0.2, 0.3, 0.37, 0.5, 0.7, 0.9, 0.013])
def test_warmup_boundary_is_strict(prev):
    assert adapter_converged(prev, prev * 1.049)
    assert adapter_converged(prev, prev * 0.951)
    assert not adapter_converged(prev, prev + 0.05 * prev)
    assert not adapter_converged(prev, prev - 0.05 * prev)
    assert not adapter_converged(prev, prev * 1.06)


def test_candidate_examples():
    assert select_candidates([0.02, 0.5, 0.09], 0.1) == {0, 2}
    assert select_candidates([0.2, 0.5], 0.1) == frozenset()
    assert select_candidates([0.1, 0.05], 0.1) == {1}


def test_apply_freezing_example():
    state = FreezeState(n_adapters=3)
    state.set_candidates(frozenset({0, 2}))
    decision = apply_freezing(7, [0.01, 0.7, 0.08], state, tau=0.05)
    assert decision.newly_frozen == (0,)
    assert decision.cut_layer == 1
    assert state.frozen == [True, False, False]
    assert state.events[0].adapter == 0 and state.events[0].tau == 0.05


def test_nothing_freezes_at_threshold_zero():
    state = FreezeState(n_adapters=2)
    state.set_candidates(frozenset({0, 1}))
    assert apply_freezing(5, [0.0, 0.0], state, tau=0.0).newly_frozen == ()


def test_non_candidate_freeze_rejected():
    state = FreezeState(n_adapters=3)
    state.set_candidates(frozenset({0}))
    with pytest.raises(ContractError, match="not a freezing candidate"):
        apply_freezing(7, [0.0, 0.0, 0.0], state, tau=0.5, to_freeze=[1])


def test_candidates_are_selected_once():
    state = FreezeState(n_adapters=2)
    state.set_candidates(frozenset())
    with pytest.raises(ContractError, match="already selected"):
        state.set_candidates(frozenset({0}))


def test_cut_layer():
    assert cut_layer_for([False, False]) == 0
    assert cut_layer_for([True, False, True]) == 1
    assert cut_layer_for([True, True]) == 2


def _drive(config, n_adapters, score_fn):
    scheduler = FreezeScheduler(config, n_adapters)
    history, frozen_sets = [], []
    for epoch in range(config.total_epochs):
        history.append(_record(epoch, score_fn(epoch)))
        scheduler.step(epoch, history)
        frozen_sets.append(set(scheduler.state.frozen_set))
    return scheduler, frozen_sets


def test_safe_policy_freezes_candidates_by_final_epoch():
    config = ScheduleConfig(tau_target=0.1, total_epochs=20, final_epoch=10, warmup=2)
    scheduler, frozen_sets = _drive(config, 4, lambda e: [0.01, 0.5, 0.05, 0.09])
    assert scheduler.state.candidates == {0, 2, 3}
    assert frozen_sets[2] == set()
    assert frozen_sets[config.resolved_final_epoch] == {0, 2, 3}
    assert all(a <= b for a, b in zip(frozen_sets, frozen_sets[1:]))
    assert 1 not in frozen_sets[-1]
    for event in scheduler.state.events:
        assert event.importance < event.tau


def test_auto_warmup_resolves_on_stable_scores():
    config = ScheduleConfig(tau_target=0.1, total_epochs=20, final_epoch=12)
    scores = {0: [0.3, 0.3], 1: [0.2, 0.05]}
    scheduler, _ = _drive(config, 2, lambda e: scores.get(e, [0.2, 0.05]))
    assert scheduler.warmup_epoch == 2
    assert scheduler.state.candidates == {1}


def test_auto_warmup_hits_the_cap():
    config = ScheduleConfig(tau_target=0.1, total_epochs=10, final_epoch=6, warmup_cap=3)
    scheduler, _ = _drive(config, 1, lambda e: [0.05 * (e + 1)])
    assert scheduler.warmup_epoch == 3


def test_policy_none_never_freezes():
    config = ScheduleConfig(policy="none", tau_target=0.5, total_epochs=10, final_epoch=5, warmup=1)
    scheduler, frozen_sets = _drive(config, 3, lambda e: [0.0, 0.0, 0.0])
    assert all(not s for s in frozen_sets)
    assert scheduler.state.candidates == frozenset()


def test_random_policy_freezes_fixed_fraction_once():
    config = ScheduleConfig(policy="random", total_epochs=10, final_epoch=5, warmup=2,
                            random_rate=0.5, random_seed=7)
    scheduler, frozen_sets = _drive(config, 4, lambda e: [0.9] * 4)
    assert frozen_sets[1] == set()
    assert len(frozen_sets[2]) == 2
    assert all(s == frozen_sets[2] for s in frozen_sets[2:])
    expected = sorted(int(i) for i in np.random.default_rng(7).choice(4, size=2, replace=False))
    assert sorted(frozen_sets[-1]) == expected


def test_undefined_importance_never_freezes():
    config = ScheduleConfig(tau_target=0.1, total_epochs=10, final_epoch=5, warmup=1)
    _, frozen_sets = _drive(config, 2, lambda e: [1.0, 0.01])
    assert frozen_sets[-1] == {1}


def test_schedule_config_validation():
    with pytest.raises(ValueError, match="final_epoch"):
        ScheduleConfig(total_epochs=5, final_epoch=6)
    with pytest.raises(ValueError, match="warmup"):
        ScheduleConfig(total_epochs=10, final_epoch=4, warmup=4)
    assert ScheduleConfig(total_epochs=40).resolved_final_epoch == 24
