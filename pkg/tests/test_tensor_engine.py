import numpy as np
import pytest

from safe_tune.exceptions import ContractError, EngineError, NumericError, ShapeError
from safe_tune.scheduler import cut_layer_for
from safe_tune.tensor_engine import (
    BYTES_PER_ELEMENT,
    PRIMITIVES,
    OptimizerState,
    Tape,
    Tensor,
    adamw_step,
    all_finite,
    retention_table,
)
from safe_tune.transformer import forward

from conftest import random_batch, trained_like

FD_STEP = 1e-6
N_CLASSES = 3


def _readout(tape, z, rng_state):
    """Scalar loss from a 2-D activation: fixed projection then cross-entropy."""
    C, labels = rng_state
    return tape.cross_entropy_mean(tape.matmul(z, Tensor(C)), labels)


def _case(name, rng):
    n = int(rng.integers(2, 5))
    d = int(rng.choice([2, 4]))
    C = rng.normal(size=(d, N_CLASSES))
    labels = rng.integers(0, N_CLASSES, size=n)
    head = (C, labels)
    x = rng.normal(size=(n, d))

    if name == "matmul":
        w = rng.normal(size=(d, d))
        return {"x": x, "w": w}, lambda t, p: _readout(t, t.matmul(p["x"], p["w"]), head), False
    if name == "add":
        return {"x": x, "y": rng.normal(size=(n, d))}, lambda t, p: _readout(t, t.add(p["x"], p["y"]), head), False
    if name == "add_bias":
        return {"x": x, "b": rng.normal(size=(d,))}, lambda t, p: _readout(t, t.add(p["x"], p["b"]), head), False
    if name == "scale":
        return {"x": x}, lambda t, p: _readout(t, t.scale(p["x"], 1.7), head), False
    if name == "transpose":
        sq = rng.normal(size=(d, d))
        return {"x": sq}, lambda t, p: _readout(t, t.transpose(p["x"]), (C, labels[:1].repeat(d))), False
    if name == "row_softmax":
        return {"x": x}, lambda t, p: _readout(t, t.row_softmax(p["x"]), head), False
    if name == "layer_norm":
        params = {"x": x, "gamma": rng.normal(size=(d,)), "beta": rng.normal(size=(d,))}
        return params, lambda t, p: _readout(t, t.layer_norm(p["x"], p["gamma"], p["beta"]), head), False
    if name == "gelu":
        return {"x": x}, lambda t, p: _readout(t, t.gelu(p["x"]), head), False
    if name == "embedding_lookup":
        vocab = 5
        ids = rng.integers(0, vocab, size=n)
        return ({"table": rng.normal(size=(vocab, d))},
                lambda t, p: _readout(t, t.embedding_lookup(p["table"], ids), head), False)
    if name == "cross_entropy_mean":
        return {"z": rng.normal(size=(n, N_CLASSES))}, lambda t, p: t.cross_entropy_mean(p["z"], labels), False
    if name == "dropout":
        return {"x": x}, lambda t, p: _readout(t, t.dropout(p["x"], 0.3, key=4), head), True
    if name == "attention":
        batch, heads = 2, 2
        seq = int(rng.integers(1, 4))
        params = {"q": rng.normal(size=(batch * seq, d)), "k": rng.normal(size=(batch * seq, d)),
                  "v": rng.normal(size=(batch * seq, d))}
        labels = rng.integers(0, N_CLASSES, size=batch * seq)

        def build(t, p):
            qh, kh, vh = (t.split_heads(p[k], batch, heads) for k in ("q", "k", "v"))
            probs = t.row_softmax(t.scale(t.matmul(qh, t.transpose(kh)), 0.5))
            return _readout(t, t.merge_heads(t.matmul(probs, vh), batch, heads), (C, labels))
        return params, build, False
    raise KeyError(name)


def _loss(build, arrays, training, grad):
    tape = Tape(grad_enabled=grad, training=training, seed=11, step=3)
    leaves = {k: Tensor(v, requires_grad=True, name=k, is_param=True) for k, v in arrays.items()}
    return tape, build(tape, leaves)


CASES = ["matmul", "add", "add_bias", "scale", "transpose", "row_softmax", "layer_norm", "gelu",
         "embedding_lookup", "cross_entropy_mean", "dropout", "attention"]


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("case", CASES)
def test_gradients_match_finite_differences(case, seed):
    rng = np.random.default_rng(1000 + seed)
    arrays, build, training = _case(case, rng)
    tape, loss = _loss(build, arrays, training, grad=True)
    grads = tape.backward(loss)

    for name, value in arrays.items():
        numeric = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            plus = {k: v.copy() for k, v in arrays.items()}
            minus = {k: v.copy() for k, v in arrays.items()}
            plus[name][idx] += FD_STEP
            minus[name][idx] -= FD_STEP
            numeric[idx] = (_loss(build, plus, training, False)[1].item()
                            - _loss(build, minus, training, False)[1].item()) / (2 * FD_STEP)
        analytic = grads[name]
        denom = max(np.linalg.norm(numeric) + np.linalg.norm(analytic), 1e-12)
        assert np.linalg.norm(numeric - analytic) / denom < 1e-5, f"{case}: gradient of {name}"


def test_every_primitive_has_a_table_row():
    rows = retention_table()
    assert {r["primitive"] for r in rows} == set(PRIMITIVES)
    by_kind = {r["primitive"]: r["retains"] for r in rows}
    assert by_kind["add"] == "nothing"
    assert "probs" in by_kind["cross_entropy_mean"]


def test_matmul_retains_only_what_weight_gradient_needs():
    tape = Tape()
    x = Tensor(np.ones((4, 3)))
    w = Tensor(np.ones((3, 2)), requires_grad=True, name="w", is_param=True)
    tape.matmul(x, w)
    # x is kept for dW; w is a parameter so keeping it costs nothing.
    assert tape.retained_bytes == 4 * 3 * BYTES_PER_ELEMENT


def test_no_grad_inputs_record_nothing_retained():
    tape = Tape()
    a = Tensor(np.ones((2, 2)))
    out = tape.gelu(tape.matmul(a, Tensor(np.eye(2))))
    assert not out.requires_grad
    assert tape.retained_bytes == 0
    assert all(not any(node.needs) for node in tape.nodes)


def test_symbolic_tensors_follow_the_same_table():
    real, meta = Tape(), Tape()
    data = np.random.default_rng(0).normal(size=(3, 4))
    for tape, x in ((real, Tensor(data, requires_grad=True, name="x", is_param=True)),
                    (meta, Tensor.meta((3, 4), requires_grad=True, name="x", is_param=True))):
        h = tape.gelu(tape.layer_norm(x, Tensor(np.ones(4)) if tape is real else Tensor.meta((4,)),
                                      Tensor(np.zeros(4)) if tape is real else Tensor.meta((4,))))
        tape.row_softmax(h)
    assert real.retained_bytes == meta.retained_bytes > 0
    assert real.forward_flops == meta.forward_flops


def test_recording_trainable_node_below_cut_is_rejected():
    tape = Tape(cut_layer=1)
    w = Tensor(np.ones((2, 2)), requires_grad=True, name="w", is_param=True)
    with tape.layer(0):
        with pytest.raises(EngineError, match="below cut layer"):
            tape.matmul(Tensor(np.ones((2, 2))), w)


def test_backward_contract_errors():
    w = Tensor(np.ones((2, 2)), requires_grad=True, name="w", is_param=True)
    labels = np.array([0, 1])

    tape = Tape(grad_enabled=False)
    loss = tape.cross_entropy_mean(tape.matmul(Tensor(np.eye(2)), w), labels)
    with pytest.raises(EngineError, match="without grad tracking"):
        tape.backward(loss)

    tape = Tape()
    out = tape.matmul(Tensor(np.eye(2)), w)
    with pytest.raises(ShapeError, match="scalar"):
        tape.backward(out)

    tape = Tape()
    loss = tape.cross_entropy_mean(Tensor.meta((2, 2), requires_grad=True, name="z", is_param=True), None)
    with pytest.raises(EngineError, match="symbolically"):
        tape.backward(loss)


def test_non_finite_forward_is_an_error():
    tape = Tape()
    with np.errstate(over="ignore"):
        with pytest.raises(NumericError):
            tape.matmul(Tensor(np.full((1, 2), 1e200)), Tensor(np.full((2, 1), 1e200)))


def test_shape_mismatch_rejected():
    tape = Tape()
    with pytest.raises(ShapeError):
        tape.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        tape.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2,))))


def test_dropout_is_replayable_and_identity_at_eval():
    x = Tensor(np.ones((4, 6)))
    a = Tape(training=True, seed=3, step=7).dropout(x, 0.5, key=2)
    b = Tape(training=True, seed=3, step=7).dropout(x, 0.5, key=2)
    c = Tape(training=True, seed=3, step=8).dropout(x, 0.5, key=2)
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)
    assert Tape(training=False).dropout(x, 0.5, key=2) is x


def test_flop_hook_sees_every_counted_flop(tiny_params, tiny_config):
    seen = {"forward": 0, "backward": 0}
    batch = random_batch(tiny_config, 2, 4)
    result = forward(tiny_params, batch, (False, False), training=True)
    result.tape.flop_hook = lambda phase, kind, flops: seen.__setitem__(phase, seen[phase] + flops)
    result.tape.backward(result.loss)
    assert seen["backward"] == result.tape.backward_flops == result.tape.modeled_backward_flops


@pytest.mark.parametrize("mask", [(True, False), (True, True), (False, True)])
def test_cut_backward_matches_full_backward(tiny_params, tiny_config, mask):
    params = trained_like(tiny_params)
    batch = random_batch(tiny_config, 3, 5, seed=2)
    full = forward(params, batch, (False, False), seed=5, step=1, training=True)
    full_grads = full.tape.backward(full.loss)
    cut = forward(params, batch, mask, seed=5, step=1, training=True)
    cut_grads = cut.tape.backward(cut.loss, cut_layer=cut_layer_for(mask))

    expected = set(params.trainable_names(mask))
    assert set(cut_grads) == expected
    for name in expected:
        assert np.array_equal(cut_grads[name], full_grads[name]), name
    for node in cut.tape.nodes:
        if node.layer_tag is not None and node.layer_tag < cut.tape.cut_layer:
            assert node.retained_bytes == 0


def test_adamw_single_step_matches_hand_computation():
    state = OptimizerState(lr=0.1, weight_decay=0.01)
    state.sync({"w": (1,)})
    params = {"w": np.array([1.0])}
    adamw_step(state, params, {"w": np.array([0.5])})
    # m_hat = 0.5, v_hat = 0.25 -> step 0.1 * 0.5 / (0.5 + 1e-8); decay 1 - 0.1 * 0.01.
    np.testing.assert_allclose(params["w"], [1.0 * 0.999 - 0.1 * 0.5 / (0.5 + 1e-8)], rtol=1e-12)
    assert state.step == 1


def test_adamw_rejects_untracked_gradient_and_sync_drops_buffers():
    state = OptimizerState(lr=0.1)
    state.sync({"a": (2, 2), "b": (3,)})
    assert state.buffer_bytes == 2 * BYTES_PER_ELEMENT * 7
    state.sync({"b": (3,)})
    assert set(state.exp_avg) == {"b"}
    params = {"a": np.zeros((2, 2)), "b": np.zeros(3)}
    with pytest.raises(ContractError, match="not a trainable parameter"):
        adamw_step(state, params, {"a": np.ones((2, 2))})


def test_adamw_leaves_untouched_parameters_bit_identical():
    state = OptimizerState(lr=0.05, weight_decay=0.1)
    state.sync({"b": (3,)})
    frozen = np.array([[1.0, 2.0], [3.0, 4.0]])
    params = {"a": frozen, "b": np.ones(3)}
    adamw_step(state, params, {"b": np.ones(3)})
    assert params["a"] is frozen
    assert params["a"].tobytes() == np.array([[1.0, 2.0], [3.0, 4.0]]).tobytes()


def test_adamw_zero_gradient_without_decay_changes_nothing():
    state = OptimizerState(lr=0.1, weight_decay=0.0)
    state.sync({"w": (2, 3)})
    w = np.random.default_rng(0).normal(size=(2, 3))
    params = {"w": w.copy()}
    for _ in range(3):
        adamw_step(state, params, {"w": np.zeros((2, 3))})
    assert params["w"].tobytes() == w.tobytes()


def test_adamw_zero_gradient_applies_decay_only():
    state = OptimizerState(lr=0.1, weight_decay=0.5)
    state.sync({"w": (3,)})
    params = {"w": np.array([1.0, -2.0, 4.0])}
    adamw_step(state, params, {"w": np.zeros(3)})
    np.testing.assert_array_equal(params["w"], np.array([1.0, -2.0, 4.0]) * (1.0 - 0.1 * 0.5))


def test_adamw_first_step_moves_by_learning_rate():
    state = OptimizerState(lr=0.1)
    state.sync({"w": (1,)})
    params = {"w": np.array([0.0])}
    adamw_step(state, params, {"w": np.array([1.0])})
    assert params["w"][0] == pytest.approx(-0.1, rel=1e-6)


def test_all_finite():
    assert all_finite(np.ones((3, 4)))
    # the sum overflows but every entry is finite
    assert all_finite(np.full(4, 1e308))
    assert not all_finite(np.array([1.0, np.nan]))
    assert not all_finite(np.array([np.inf, -np.inf]))
    assert not all_finite(np.array([[0.0], [-np.inf]]))


def test_gelu_values_and_input_untouched():
    x = np.array([[0.0, 10.0, -10.0, 1.0]])
    original = x.copy()
    out = Tape().gelu(Tensor(x)).data
    expected = 0.5 * original * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (original + 0.044715 * original ** 3)))
    np.testing.assert_allclose(out, expected, rtol=1e-14, atol=1e-300)
    assert out[0, 0] == 0.0
    assert out[0, 1] == pytest.approx(10.0)
    assert out[0, 2] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_array_equal(x, original)
