"""
Post-LN transformer encoder classifier with LoRA adapters on the query and value
projections of every layer.

Base weights never train. Adapter i (the q and v factor pairs of layer i) trains
unless the frozen mask says otherwise; the classification head always trains.
Forward builds fresh leaf tensors from the stored arrays, so the frozen mask of a
call decides what requires grad without mutating the parameters.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from safe_tune.exceptions import ContractError, ShapeError
from safe_tune.models import ModelConfig
from safe_tune.scheduler import cut_layer_for
from safe_tune.tensor_engine import Tape, Tensor

logger = logging.getLogger(__name__)

ADAPTER_TARGETS = ("q", "v")
PAD_ID = 0
MASKED_SCORE = -1e9
EMBED_TAG = -1

BASE_LAYER_PARAMS = (
    ("attn.wq", "dd"), ("attn.bq", "d"), ("attn.wk", "dd"), ("attn.bk", "d"),
    ("attn.wv", "dd"), ("attn.bv", "d"), ("attn.wo", "dd"), ("attn.bo", "d"),
    ("ln1.gamma", "d"), ("ln1.beta", "d"),
    ("ff.w1", "df"), ("ff.b1", "f"), ("ff.w2", "fd"), ("ff.b2", "d"),
    ("ln2.gamma", "d"), ("ln2.beta", "d"),
)
HEAD_PARAMS = ("head.w", "head.b")


class AdapterStatus(str, Enum):
    ACTIVE = "active"
    FROZEN = "frozen"


def adapter_param_names(layer: int) -> Tuple[str, ...]:
    return tuple(f"layers.{layer}.lora_{t}.{f}" for t in ADAPTER_TARGETS for f in ("A", "B"))


@dataclass
class AdapterState:
    """Per-layer adapter record: both LoRA pairs share one status."""
    layer: int
    status: AdapterStatus = AdapterStatus.ACTIVE
    freeze_epoch: Optional[int] = None
    importance_history: List[float] = field(default_factory=list)

    @property
    def names(self) -> Tuple[str, ...]:
        return adapter_param_names(self.layer)

    @property
    def frozen(self) -> bool:
        return self.status == AdapterStatus.FROZEN


@dataclass
class ModelParams:
    config: ModelConfig
    arrays: Dict[str, np.ndarray]
    adapters: List[AdapterState]
    shapes: Dict[str, Tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.shapes:
            self.shapes = {name: tuple(arr.shape) for name, arr in self.arrays.items()}

    @property
    def symbolic(self) -> bool:
        return not self.arrays

    def frozen_mask(self) -> Tuple[bool, ...]:
        return tuple(a.frozen for a in self.adapters)

    def trainable_names(self, frozen_mask: Optional[Sequence[bool]] = None) -> List[str]:
        mask = self.frozen_mask() if frozen_mask is None else tuple(frozen_mask)
        names = [n for a, f in zip(self.adapters, mask) if not f for n in a.names]
        return names + list(HEAD_PARAMS)

    def adapter_names(self) -> List[str]:
        return [n for a in self.adapters for n in a.names]

    def freeze(self, layer: int, epoch: int) -> None:
        adapter = self.adapters[layer]
        if adapter.frozen:
            raise ContractError(f"adapter {layer} is already frozen (since epoch {adapter.freeze_epoch})")
        adapter.status = AdapterStatus.FROZEN
        adapter.freeze_epoch = epoch

    def leaf(self, name: str, trainable: bool = False) -> Tensor:
        data = None if self.symbolic else self.arrays[name]
        return Tensor(data, shape=self.shapes[name], requires_grad=trainable, name=name, is_param=True)

    def clone(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            arrays={n: a.copy() for n, a in self.arrays.items()},
            adapters=[AdapterState(a.layer, a.status, a.freeze_epoch, list(a.importance_history))
                      for a in self.adapters],
            shapes=dict(self.shapes),
        )


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d, f, r = config.d_model, config.d_ff, config.lora_rank
    dims = {"d": d, "f": f}
    shapes: Dict[str, Tuple[int, ...]] = {
        "embed.tok": (config.vocab_size, d),
        "embed.pos": (config.max_seq, d),
    }
    for i in range(config.n_layers):
        for name, spec in BASE_LAYER_PARAMS:
            shapes[f"layers.{i}.{name}"] = tuple(dims[c] for c in spec)
        for t in ADAPTER_TARGETS:
            shapes[f"layers.{i}.lora_{t}.A"] = (d, r)
            shapes[f"layers.{i}.lora_{t}.B"] = (r, d)
    shapes["head.w"] = (d, config.n_classes)
    shapes["head.b"] = (config.n_classes,)
    return shapes


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """
    Base weights ~ N(0, init_std); LayerNorm gains 1; biases 0; adapter A ~ N(0, 1/d_model),
    adapter B = 0 so the initial adapter update is exactly zero.
    """
    rng = np.random.default_rng(seed)
    arrays: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "A":
            arrays[name] = rng.normal(0.0, 1.0 / math.sqrt(config.d_model), size=shape)
        elif leaf == "B":
            arrays[name] = np.zeros(shape)
        elif leaf == "gamma":
            arrays[name] = np.ones(shape)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.normal(0.0, config.init_std, size=shape)
    adapters = [AdapterState(layer=i) for i in range(config.n_layers)]
    logger.info(f"Initialized model with {sum(a.size for a in arrays.values())} parameters (seed={seed})")
    return ModelParams(config=config, arrays=arrays, adapters=adapters)


def meta_parameters(config: ModelConfig) -> ModelParams:
    """Shape-only parameters for symbolic tracing."""
    return ModelParams(
        config=config,
        arrays={},
        adapters=[AdapterState(layer=i) for i in range(config.n_layers)],
        shapes=parameter_shapes(config),
    )


@dataclass
class Batch:
    """Right-padded token batch; ids/labels/lengths are None when tracing symbolically."""
    batch_size: int
    seq_len: int
    ids: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    lengths: Optional[np.ndarray] = None

    @classmethod
    def symbolic(cls, batch_size: int, seq_len: int) -> "Batch":
        return cls(batch_size=batch_size, seq_len=seq_len)

    @classmethod
    def from_sequences(cls, sequences: Sequence[Sequence[int]], labels: Optional[Sequence[int]] = None,
                       seq_len: Optional[int] = None) -> "Batch":
        if not sequences:
            raise ShapeError("cannot build an empty batch")
        lengths = np.array([len(s) for s in sequences], dtype=np.int64)
        width = int(seq_len if seq_len is not None else lengths.max())
        if lengths.max() > width:
            raise ShapeError(f"sequence of length {lengths.max()} does not fit padded width {width}")
        ids = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
        for row, seq in enumerate(sequences):
            ids[row, :len(seq)] = seq
        label_arr = None if labels is None else np.asarray(labels, dtype=np.int64)
        return cls(batch_size=len(sequences), seq_len=width, ids=ids, labels=label_arr, lengths=lengths)

    @property
    def is_symbolic(self) -> bool:
        return self.ids is None

    def valid_rows(self) -> np.ndarray:
        """Boolean (B*S,) selector of non-padding (sample, position) rows."""
        return (np.arange(self.seq_len)[None, :] < self.lengths[:, None]).reshape(-1)


@dataclass
class ForwardResult:
    logits: Tensor
    loss: Optional[Tensor]
    tape: Tape
    layer_outputs: List[Tensor]
    layer_inputs: List[Tensor]


@dataclass
class ForwardTrace:
    """Per-layer block outputs with all adapters (X) and with only that layer's adapter removed (Y)."""
    X: List[np.ndarray]
    Y: List[np.ndarray]


def _constants(config: ModelConfig, batch: Batch) -> Tuple[Tensor, Tensor]:
    B, S, h = batch.batch_size, batch.seq_len, config.n_heads
    if batch.is_symbolic:
        return Tensor.meta((B * h, S, S)), Tensor.meta((B, B * S))
    valid = np.arange(S)[None, :] < batch.lengths[:, None]
    key_bias = np.where(valid, 0.0, MASKED_SCORE)
    key_mask = np.broadcast_to(key_bias[:, None, None, :], (B, h, S, S)).reshape(B * h, S, S)
    pool = np.zeros((B, B * S))
    for b, length in enumerate(batch.lengths):
        pool[b, b * S:b * S + int(length)] = 1.0 / float(length)
    return Tensor(key_mask), Tensor(pool)


def _lora(tape: Tape, params: ModelParams, layer: int, target: str, hidden: Tensor, trainable: bool) -> Tensor:
    config = params.config
    prefix = f"layers.{layer}.lora_{target}"
    x = tape.dropout(hidden, config.lora_dropout, key=2 * layer + ADAPTER_TARGETS.index(target))
    down = tape.matmul(x, params.leaf(f"{prefix}.A", trainable))
    up = tape.matmul(down, params.leaf(f"{prefix}.B", trainable))
    return tape.scale(up, config.lora_scaling)


def _block(tape: Tape, params: ModelParams, layer: int, hidden: Tensor, batch: Batch,
           key_mask: Tensor, trainable: bool, with_adapter: bool = True) -> Tensor:
    config = params.config
    B, heads = batch.batch_size, config.n_heads
    p = lambda name: params.leaf(f"layers.{layer}.{name}")

    q = tape.add(tape.matmul(hidden, p("attn.wq")), p("attn.bq"))
    if with_adapter:
        q = tape.add(q, _lora(tape, params, layer, "q", hidden, trainable))
    k = tape.add(tape.matmul(hidden, p("attn.wk")), p("attn.bk"))
    v = tape.add(tape.matmul(hidden, p("attn.wv")), p("attn.bv"))
    if with_adapter:
        v = tape.add(v, _lora(tape, params, layer, "v", hidden, trainable))

    qh = tape.split_heads(q, B, heads)
    kh = tape.split_heads(k, B, heads)
    vh = tape.split_heads(v, B, heads)
    scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), 1.0 / math.sqrt(config.head_dim))
    probs = tape.row_softmax(tape.add(scores, key_mask))
    context = tape.merge_heads(tape.matmul(probs, vh), B, heads)
    attn = tape.add(tape.matmul(context, p("attn.wo")), p("attn.bo"))
    h1 = tape.layer_norm(tape.add(hidden, attn), p("ln1.gamma"), p("ln1.beta"))

    ff = tape.gelu(tape.add(tape.matmul(h1, p("ff.w1")), p("ff.b1")))
    ff = tape.add(tape.matmul(ff, p("ff.w2")), p("ff.b2"))
    return tape.layer_norm(tape.add(h1, ff), p("ln2.gamma"), p("ln2.beta"))


def _embed(tape: Tape, params: ModelParams, batch: Batch) -> Tensor:
    B, S = batch.batch_size, batch.seq_len
    if batch.is_symbolic:
        tok = tape.embedding_lookup(params.leaf("embed.tok"), (B, S))
        pos = tape.embedding_lookup(params.leaf("embed.pos"), (B, S))
    else:
        tok = tape.embedding_lookup(params.leaf("embed.tok"), batch.ids)
        pos = tape.embedding_lookup(params.leaf("embed.pos"), np.tile(np.arange(S), (B, 1)))
    return tape.add(tok, pos)


def _check_batch(config: ModelConfig, batch: Batch) -> None:
    if batch.seq_len > config.max_seq:
        raise ShapeError(f"sequence length {batch.seq_len} exceeds max_seq {config.max_seq}")
    if batch.is_symbolic:
        return
    if batch.ids.min() < 0 or batch.ids.max() >= config.vocab_size:
        raise ShapeError(f"token ids must lie in [0, {config.vocab_size})")
    if batch.lengths.min() < 1:
        raise ShapeError("every sequence needs at least one token")


def forward(params: ModelParams, batch: Batch, frozen_mask: Sequence[bool], *, seed: int = 0, step: int = 0,
            training: bool = True, track_grad: bool = True,
            disabled_adapter: Optional[int] = None) -> ForwardResult:
    """
    Runs the classifier and records a tape.

    Args:
        params: model parameters (concrete or symbolic)
        batch: padded batch; labels may be None for inference
        frozen_mask: one flag per layer; True marks a frozen adapter
        seed, step: key the dropout generator so a step is replayable
        training: enables adapter dropout
        track_grad: records nodes for backward
        disabled_adapter: layer whose adapter contribution is removed entirely

    Returns:
        ForwardResult with logits, loss (None without labels), tape and per-layer activations
    """
    config = params.config
    mask = tuple(bool(m) for m in frozen_mask)
    if len(mask) != config.n_layers:
        raise ShapeError(f"frozen mask has {len(mask)} entries for {config.n_layers} layers")
    _check_batch(config, batch)

    cut = cut_layer_for(mask)
    tape = Tape(cut_layer=cut if track_grad else None, grad_enabled=track_grad,
                training=training, seed=seed, step=step)
    key_mask, pool = _constants(config, batch)

    with tape.layer(EMBED_TAG):
        hidden = _embed(tape, params, batch)
    inputs: List[Tensor] = []
    outputs: List[Tensor] = []
    for i in range(config.n_layers):
        inputs.append(hidden)
        with tape.layer(i):
            hidden = _block(tape, params, i, hidden, batch, key_mask,
                            trainable=not mask[i], with_adapter=disabled_adapter != i)
        outputs.append(hidden)

    with tape.layer(config.n_layers):
        pooled = tape.matmul(pool, hidden)
        logits = tape.add(tape.matmul(pooled, params.leaf("head.w", True)), params.leaf("head.b", True))
        loss = None
        if batch.labels is not None or (batch.is_symbolic and track_grad):
            loss = tape.cross_entropy_mean(logits, batch.labels)
    return ForwardResult(logits=logits, loss=loss, tape=tape, layer_outputs=outputs, layer_inputs=inputs)


def dual_forward(params: ModelParams, probe_batch: Batch) -> ForwardTrace:
    """
    Probe pass without tape or dropout. X_i is layer i's block output with every adapter
    live; Y_i recomputes layer i from the same input with only its own adapter removed.
    Padding rows are dropped, so rows are the batch's valid (sample, position) pairs.
    """
    config = params.config
    mask = params.frozen_mask()
    full = forward(params, probe_batch, mask, training=False, track_grad=False)
    rows = probe_batch.valid_rows()
    key_mask, _ = _constants(config, probe_batch)
    X, Y = [], []
    for i in range(config.n_layers):
        tape = Tape(grad_enabled=False)
        y = _block(tape, params, i, full.layer_inputs[i], probe_batch, key_mask,
                   trainable=False, with_adapter=False)
        X.append(full.layer_outputs[i].data[rows])
        Y.append(y.data[rows])
    return ForwardTrace(X=X, Y=Y)


def lora_contribution(params: ModelParams, layer: int, target: str, hidden: np.ndarray) -> np.ndarray:
    """The adapter term scaling * (x A) B added to a projection, without dropout."""
    tape = Tape(grad_enabled=False)
    return _lora(tape, params, layer, target, Tensor(hidden), trainable=False).data


def predict(params: ModelParams, batch: Batch) -> np.ndarray:
    result = forward(params, batch, params.frozen_mask(), training=False, track_grad=False)
    return result.logits.data.argmax(axis=-1)
