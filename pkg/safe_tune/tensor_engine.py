"""
Dense float64 tensor math with reverse-mode differentiation on an explicit tape.

The tape is rebuilt every step (define-by-run). Each primitive declares, in one
table, which tensors it keeps for backward and how many FLOPs it costs; the
engine uses that table when recording nodes and resource_model uses the same
table when it traces a step symbolically, so measured and modeled bytes agree
by construction.

Tensors whose ``data`` is None are symbolic: they carry a shape only and flow
through the same primitives without any arithmetic.
"""
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from safe_tune.exceptions import ContractError, EngineError, NumericError, ShapeError

logger = logging.getLogger(__name__)

BYTES_PER_ELEMENT = 8
Shape = Tuple[int, ...]


def numel(shape: Shape) -> int:
    return int(math.prod(shape))


def all_finite(a: np.ndarray) -> bool:
    """One summation pass; the elementwise scan only runs when the sum is not finite."""
    with np.errstate(over="ignore", invalid="ignore"):
        if np.isfinite(np.add.reduce(a, axis=None)):
            return True
    return bool(np.all(np.isfinite(a)))


class Tensor:
    """Row-major float64 array with grad-tracking metadata."""

    __slots__ = ("data", "shape", "requires_grad", "name", "is_param", "node", "_tape")

    def __init__(self, data: Optional[np.ndarray], *, shape: Optional[Shape] = None,
                 requires_grad: bool = False, name: Optional[str] = None, is_param: bool = False):
        if data is not None:
            data = np.asarray(data, dtype=np.float64)
            shape = tuple(data.shape)
        elif shape is None:
            raise ShapeError("symbolic tensor needs an explicit shape")
        if any(int(s) <= 0 for s in shape):
            raise ShapeError(f"tensor extents must be positive, got {tuple(shape)}")
        self.data = data
        self.shape: Shape = tuple(int(s) for s in shape)
        self.requires_grad = requires_grad
        self.name = name
        self.is_param = is_param
        self.node: Optional[int] = None
        self._tape: Optional["Tape"] = None

    @classmethod
    def meta(cls, shape: Shape, **kwargs) -> "Tensor":
        return cls(None, shape=tuple(shape), **kwargs)

    @property
    def is_meta(self) -> bool:
        return self.data is None

    @property
    def numel(self) -> int:
        return numel(self.shape)

    @property
    def nbytes(self) -> int:
        return self.numel * BYTES_PER_ELEMENT

    def item(self) -> float:
        if self.data is None or self.numel != 1:
            raise ShapeError(f"item() needs a concrete single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        kind = "meta" if self.is_meta else "data"
        return f"Tensor({kind}, shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"


# --- Retention / FLOP table ---

@dataclass(frozen=True)
class Slot:
    """
    A tensor a primitive keeps for backward.

    when:   index of the input whose gradient needs this slot, or "any".
    shape:  "in<i>" (shape of input i), "out", or "rows<i>" (input i without its last axis).
    alias:  index of the input the slot holds verbatim; parameters cost no activation bytes.
    """
    name: str
    when: Union[int, str]
    shape: str
    alias: Optional[int] = None

    def active(self, needs: Sequence[bool]) -> bool:
        if self.when == "any":
            return any(needs)
        return bool(needs[int(self.when)])

    def resolve_shape(self, in_shapes: Sequence[Shape], out_shape: Shape) -> Shape:
        if self.shape == "out":
            return out_shape
        if self.shape.startswith("rows"):
            return tuple(in_shapes[int(self.shape[4:])][:-1])
        return tuple(in_shapes[int(self.shape[2:])])


FlopFn = Callable[[Sequence[Shape], Shape], int]
BackwardFlopFn = Callable[[Sequence[Shape], Shape, Sequence[bool]], int]


@dataclass(frozen=True)
class Primitive:
    kind: str
    arity: int
    shape_fn: Callable[[Sequence[Shape], Dict[str, Any]], Shape]
    forward_fn: Callable[..., Tuple[np.ndarray, Dict[str, np.ndarray]]]
    backward_fn: Callable[..., Tuple[Optional[np.ndarray], ...]]
    slots: Tuple[Slot, ...]
    forward_flops: FlopFn
    backward_flops: BackwardFlopFn
    note: str = ""


def retained_nbytes(prim: Primitive, in_shapes: Sequence[Shape], out_shape: Shape,
                    needs: Sequence[bool], in_is_param: Sequence[bool]) -> int:
    total = 0
    for slot in prim.slots:
        if not slot.active(needs):
            continue
        if slot.alias is not None and in_is_param[slot.alias]:
            continue
        total += numel(slot.resolve_shape(in_shapes, out_shape)) * BYTES_PER_ELEMENT
    return total


def _matmul_dims(a: Shape, b: Shape) -> Tuple[int, int, int, int]:
    groups = a[0] if len(a) == 3 else 1
    return groups, a[-2], a[-1], b[-1]


def _matmul_shape(shapes, attrs):
    a, b = shapes
    if len(a) != len(b) or len(a) not in (2, 3):
        raise ShapeError(f"matmul needs two 2-D or two 3-D operands, got {a} and {b}")
    if len(a) == 3 and a[0] != b[0]:
        raise ShapeError(f"matmul batch extents differ: {a} vs {b}")
    if a[-1] != b[-2]:
        raise ShapeError(f"matmul inner extents differ: {a} vs {b}")
    return tuple(a[:-1]) + (b[-1],)


def _matmul_forward(arrays, attrs):
    a, b = arrays
    return a @ b, {"lhs": a, "rhs": b}


def _matmul_backward(g, saved, needs, attrs):
    ga = g @ np.swapaxes(saved["rhs"], -1, -2) if needs[0] else None
    gb = np.swapaxes(saved["lhs"], -1, -2) @ g if needs[1] else None
    return ga, gb


def _matmul_bwd_flops(shapes, out, needs):
    g, m, k, n = _matmul_dims(shapes[0], shapes[1])
    return sum(2 * g * m * k * n for need in needs if need)


def _add_shape(shapes, attrs):
    a, b = shapes
    if a == b or (len(b) == 1 and b[0] == a[-1]):
        return a
    raise ShapeError(f"add needs equal shapes or a trailing bias vector, got {a} and {b}")


def _add_forward(arrays, attrs):
    a, b = arrays
    return a + b, {}


def _add_backward(g, saved, needs, attrs):
    ga = g if needs[0] else None
    gb = None
    if needs[1]:
        gb = g if attrs["_shapes"][1] == tuple(g.shape) else g.reshape(-1, g.shape[-1]).sum(axis=0)
    return ga, gb


def _add_bwd_flops(shapes, out, needs):
    broadcast = shapes[0] != shapes[1]
    return numel(out) if needs[1] and broadcast else 0


def _identity_shape(shapes, attrs):
    return shapes[0]


def _scale_forward(arrays, attrs):
    return arrays[0] * attrs["factor"], {}


def _scale_backward(g, saved, needs, attrs):
    return (g * attrs["factor"] if needs[0] else None,)


def _transpose_shape(shapes, attrs):
    a = shapes[0]
    if len(a) not in (2, 3):
        raise ShapeError(f"transpose needs a 2-D or 3-D operand, got {a}")
    return tuple(a[:-2]) + (a[-1], a[-2])


def _transpose_forward(arrays, attrs):
    return np.swapaxes(arrays[0], -1, -2), {}


def _transpose_backward(g, saved, needs, attrs):
    return (np.swapaxes(g, -1, -2) if needs[0] else None,)


def _split_heads_shape(shapes, attrs):
    x = shapes[0]
    batch, heads = attrs["batch"], attrs["heads"]
    if len(x) != 2 or x[0] % batch != 0 or x[1] % heads != 0:
        raise ShapeError(f"split_heads cannot split {x} into batch={batch}, heads={heads}")
    seq = x[0] // batch
    return (batch * heads, seq, x[1] // heads)


def _split_heads_forward(arrays, attrs):
    x = arrays[0]
    batch, heads = attrs["batch"], attrs["heads"]
    seq, dh = x.shape[0] // batch, x.shape[1] // heads
    out = x.reshape(batch, seq, heads, dh).transpose(0, 2, 1, 3).reshape(batch * heads, seq, dh)
    return out, {}


def _split_heads_backward(g, saved, needs, attrs):
    if not needs[0]:
        return (None,)
    batch, heads = attrs["batch"], attrs["heads"]
    seq, dh = g.shape[1], g.shape[2]
    return (g.reshape(batch, heads, seq, dh).transpose(0, 2, 1, 3).reshape(batch * seq, heads * dh),)


def _merge_heads_shape(shapes, attrs):
    x = shapes[0]
    batch, heads = attrs["batch"], attrs["heads"]
    if len(x) != 3 or x[0] != batch * heads:
        raise ShapeError(f"merge_heads expects ({batch * heads}, seq, head_dim), got {x}")
    return (batch * x[1], heads * x[2])


def _merge_heads_forward(arrays, attrs):
    x = arrays[0]
    batch, heads = attrs["batch"], attrs["heads"]
    seq, dh = x.shape[1], x.shape[2]
    return x.reshape(batch, heads, seq, dh).transpose(0, 2, 1, 3).reshape(batch * seq, heads * dh), {}


def _merge_heads_backward(g, saved, needs, attrs):
    if not needs[0]:
        return (None,)
    batch, heads = attrs["batch"], attrs["heads"]
    seq, dh = g.shape[0] // batch, g.shape[1] // heads
    return (g.reshape(batch, seq, heads, dh).transpose(0, 2, 1, 3).reshape(batch * heads, seq, dh),)


def _softmax_forward(arrays, attrs):
    z = arrays[0]
    y = z - z.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)
    return y, {"out": y}


def _softmax_backward(g, saved, needs, attrs):
    y = saved["out"]
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


LAYER_NORM_EPS = 1e-5


def _layer_norm_shape(shapes, attrs):
    x, gamma, beta = shapes
    if len(x) != 2 or gamma != (x[1],) or beta != (x[1],):
        raise ShapeError(f"layer_norm expects x (n, d) with gamma/beta (d,), got {x}, {gamma}, {beta}")
    return x


def _layer_norm_forward(arrays, attrs):
    x, gamma, beta = arrays
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = (x - mu) * rstd
    return xhat * gamma + beta, {"xhat": xhat, "rstd": rstd[:, 0], "gamma": gamma}


def _layer_norm_backward(g, saved, needs, attrs):
    xhat = saved["xhat"]
    gx = ggamma = gbeta = None
    if needs[0]:
        rstd = saved["rstd"][:, None]
        gxhat = g * saved["gamma"]
        d = xhat.shape[-1]
        gx = (rstd / d) * (d * gxhat - gxhat.sum(axis=-1, keepdims=True)
                           - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
    if needs[1]:
        ggamma = (g * xhat).sum(axis=0)
    if needs[2]:
        gbeta = g.sum(axis=0)
    return gx, ggamma, gbeta


def _layer_norm_bwd_flops(shapes, out, needs):
    n = numel(shapes[0])
    return (9 * n if needs[0] else 0) + (2 * n if needs[1] else 0) + (n if needs[2] else 0)


GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


def _gelu_tanh(x: np.ndarray) -> np.ndarray:
    inner = x * x
    inner *= GELU_K
    inner += 1.0
    inner *= x
    inner *= GELU_C
    return np.tanh(inner, out=inner)


def _gelu_forward(arrays, attrs):
    x = arrays[0]
    out = _gelu_tanh(x)
    out += 1.0
    out *= x
    out *= 0.5
    return out, {"x": x}


def _gelu_backward(g, saved, needs, attrs):
    # only x is retained (see the gelu slot), so tanh is recomputed here
    x = saved["x"]
    t = _gelu_tanh(x)
    dt = t * t
    np.subtract(1.0, dt, out=dt)
    x2 = x * x
    x2 *= 3.0 * GELU_K
    x2 += 1.0
    dt *= x2
    dt *= GELU_C * 0.5
    dt *= x
    t += 1.0
    t *= 0.5
    t += dt
    t *= g
    return (t,)


def _embedding_shape(shapes, attrs):
    table = shapes[0]
    ids_shape = attrs["ids_shape"]
    if len(table) != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table}")
    return (numel(ids_shape), table[1])


def _embedding_forward(arrays, attrs):
    table = arrays[0]
    ids = attrs["ids"]
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ShapeError(f"embedding ids must lie in [0, {table.shape[0]}), got range [{ids.min()}, {ids.max()}]")
    return table[ids.reshape(-1)], {}


def _embedding_backward(g, saved, needs, attrs):
    if not needs[0]:
        return (None,)
    grad = np.zeros(attrs["_shapes"][0])
    np.add.at(grad, attrs["ids"].reshape(-1), g)
    return (grad,)


def _cross_entropy_shape(shapes, attrs):
    logits = shapes[0]
    if len(logits) != 2:
        raise ShapeError(f"cross_entropy_mean expects (batch, classes) logits, got {logits}")
    labels_shape = attrs.get("labels_shape")
    if labels_shape is not None and tuple(labels_shape) != (logits[0],):
        raise ShapeError(f"labels shape {tuple(labels_shape)} does not match logits {logits}")
    return (1,)


def _cross_entropy_forward(arrays, attrs):
    z = arrays[0]
    labels = attrs["labels"]
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise ShapeError(f"labels must lie in [0, {z.shape[1]})")
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(z.shape[0]), labels].mean()
    return np.array([loss]), {"probs": np.exp(logp)}


def _cross_entropy_backward(g, saved, needs, attrs):
    probs = saved["probs"]
    labels = attrs["labels"]
    grad = probs.copy()
    grad[np.arange(probs.shape[0]), labels] -= 1.0
    return (grad * (g.reshape(-1)[0] / probs.shape[0]),)


def _dropout_forward(arrays, attrs):
    x = arrays[0]
    p = attrs["p"]
    u = attrs["rng"].random(x.shape)
    mask = (u >= p).astype(np.float64) / (1.0 - p)
    return x * mask, {"mask": mask}


def _dropout_backward(g, saved, needs, attrs):
    return (g * saved["mask"],)


def _elementwise(k: int) -> FlopFn:
    return lambda shapes, out: k * numel(out)


def _elementwise_bwd(k: int) -> BackwardFlopFn:
    return lambda shapes, out, needs: k * numel(out) if needs[0] else 0


def _zero(*_args) -> int:
    return 0


PRIMITIVES: Dict[str, Primitive] = {p.kind: p for p in (
    Primitive("matmul", 2, _matmul_shape, _matmul_forward, _matmul_backward,
              (Slot("lhs", when=1, shape="in0", alias=0), Slot("rhs", when=0, shape="in1", alias=1)),
              lambda s, o: 2 * math.prod(_matmul_dims(s[0], s[1])), _matmul_bwd_flops,
              "2-D or batched 3-D"),
    Primitive("add", 2, _add_shape, _add_forward, _add_backward, (),
              _elementwise(1), _add_bwd_flops, "equal shapes or trailing bias"),
    Primitive("scale", 1, _identity_shape, _scale_forward, _scale_backward, (),
              _elementwise(1), _elementwise_bwd(1)),
    Primitive("transpose", 1, _transpose_shape, _transpose_forward, _transpose_backward, (),
              _zero, _zero, "swaps the last two axes"),
    Primitive("split_heads", 1, _split_heads_shape, _split_heads_forward, _split_heads_backward, (),
              _zero, _zero, "(B*S, d) -> (B*h, S, d/h)"),
    Primitive("merge_heads", 1, _merge_heads_shape, _merge_heads_forward, _merge_heads_backward, (),
              _zero, _zero, "(B*h, S, d/h) -> (B*S, d)"),
    Primitive("row_softmax", 1, _identity_shape, _softmax_forward, _softmax_backward,
              (Slot("out", when="any", shape="out"),),
              _elementwise(5), _elementwise_bwd(4)),
    Primitive("layer_norm", 3, _layer_norm_shape, _layer_norm_forward, _layer_norm_backward,
              (Slot("xhat", when="any", shape="in0"), Slot("rstd", when="any", shape="rows0"),
               Slot("gamma", when=0, shape="in1", alias=1)),
              _elementwise(8), _layer_norm_bwd_flops),
    Primitive("gelu", 1, _identity_shape, _gelu_forward, _gelu_backward,
              (Slot("x", when="any", shape="in0", alias=0),),
              _elementwise(10), _elementwise_bwd(14), "tanh approximation"),
    Primitive("embedding_lookup", 1, _embedding_shape, _embedding_forward, _embedding_backward, (),
              _zero, _elementwise_bwd(1), "ids travel as attributes"),
    Primitive("cross_entropy_mean", 1, _cross_entropy_shape, _cross_entropy_forward, _cross_entropy_backward,
              (Slot("probs", when="any", shape="in0"),),
              lambda s, o: 6 * numel(s[0]), lambda s, o, n: 3 * numel(s[0]) if n[0] else 0,
              "fused log-softmax; labels travel as attributes"),
    Primitive("dropout", 1, _identity_shape, _dropout_forward, _dropout_backward,
              (Slot("mask", when="any", shape="in0"),),
              _elementwise(1), _elementwise_bwd(1), "counter-based mask keyed on (seed, step, key)"),
)}


def retention_table() -> List[Dict[str, str]]:
    """Rows describing what each primitive keeps for backward and what it costs."""
    rows = []
    for prim in PRIMITIVES.values():
        kept = ", ".join(
            f"{s.name}[{s.shape}] if {'any input' if s.when == 'any' else f'input {s.when}'} needs grad"
            + (f" (free when input {s.alias} is a parameter)" if s.alias is not None else "")
            for s in prim.slots
        ) or "nothing"
        rows.append({"primitive": prim.kind, "retains": kept, "note": prim.note})
    return rows


# --- Tape ---

@dataclass
class Node:
    index: int
    kind: str
    parents: Tuple[int, ...]
    layer_tag: Optional[int]
    needs: Tuple[bool, ...]
    retained: bool
    retained_bytes: int
    forward_flops: int
    modeled_backward_flops: int
    inputs: Tuple[Tensor, ...]
    in_shapes: Tuple[Shape, ...]
    out_shape: Shape
    attrs: Dict[str, Any] = field(default_factory=dict)
    saved: Dict[str, np.ndarray] = field(default_factory=dict)


class Tape:
    """
    Ordered record of the operations of one step.

    cut_layer marks the deepest layer that still trains; nodes tagged below it must
    not depend on anything trainable, so they never retain activations.
    """

    def __init__(self, *, cut_layer: Optional[int] = None, grad_enabled: bool = True,
                 training: bool = False, seed: int = 0, step: int = 0,
                 flop_hook: Optional[Callable[[str, str, int], None]] = None):
        self.cut_layer = cut_layer
        self.grad_enabled = grad_enabled
        self.training = training
        self.seed = seed
        self.step = step
        self.flop_hook = flop_hook
        self.nodes: List[Node] = []
        self.current_layer: Optional[int] = None
        self.forward_flops = 0
        self.backward_flops = 0

    @contextmanager
    def layer(self, index: int) -> Iterator[None]:
        previous = self.current_layer
        self.current_layer = index
        try:
            yield
        finally:
            self.current_layer = previous

    # --- accounting views ---

    @property
    def retained_bytes(self) -> int:
        return sum(node.retained_bytes for node in self.nodes)

    def retained_bytes_by_layer(self) -> Dict[Optional[int], int]:
        totals: Dict[Optional[int], int] = {}
        for node in self.nodes:
            totals[node.layer_tag] = totals.get(node.layer_tag, 0) + node.retained_bytes
        return totals

    @property
    def modeled_backward_flops(self) -> int:
        return sum(node.modeled_backward_flops for node in self.nodes)

    def _count(self, phase: str, kind: str, flops: int) -> None:
        if phase == "forward":
            self.forward_flops += flops
        else:
            self.backward_flops += flops
        if self.flop_hook is not None and flops:
            self.flop_hook(phase, kind, flops)

    # --- recording ---

    def apply(self, kind: str, *inputs: Tensor, **attrs: Any) -> Tensor:
        """Runs one primitive and records it (primitive_forward)."""
        prim = PRIMITIVES.get(kind)
        if prim is None:
            raise EngineError(f"unknown primitive '{kind}'")
        if len(inputs) != prim.arity:
            raise EngineError(f"{kind} takes {prim.arity} inputs, got {len(inputs)}")
        for t in inputs:
            if t._tape is not None and t._tape is not self:
                raise EngineError(f"{kind}: operand was produced by a different tape")

        in_shapes = tuple(t.shape for t in inputs)
        attrs["_shapes"] = in_shapes
        out_shape = tuple(prim.shape_fn(in_shapes, attrs))
        needs = tuple(self.grad_enabled and t.requires_grad for t in inputs)
        out_requires_grad = any(needs)
        symbolic = any(t.is_meta for t in inputs)

        saved: Dict[str, np.ndarray] = {}
        if symbolic:
            out = Tensor.meta(out_shape, requires_grad=out_requires_grad)
        else:
            out_data, candidates = prim.forward_fn(tuple(t.data for t in inputs), attrs)
            if not all_finite(out_data):
                raise NumericError(f"{kind} produced non-finite values (input shapes {in_shapes})")
            out = Tensor(out_data, requires_grad=out_requires_grad)
            saved = {s.name: candidates[s.name] for s in prim.slots if s.active(needs)}

        fwd = prim.forward_flops(in_shapes, out_shape)
        self._count("forward", kind, fwd)
        if not self.grad_enabled:
            return out

        layer_tag = self.current_layer
        if (out_requires_grad and self.cut_layer is not None and layer_tag is not None
                and layer_tag < self.cut_layer):
            raise EngineError(
                f"{kind} at layer {layer_tag} depends on a trainable tensor below cut layer {self.cut_layer}"
            )
        in_is_param = tuple(t.is_param for t in inputs)
        nbytes = retained_nbytes(prim, in_shapes, out_shape, needs, in_is_param)
        node = Node(
            index=len(self.nodes),
            kind=kind,
            parents=tuple(t.node if t.node is not None else -1 for t in inputs),
            layer_tag=layer_tag,
            needs=needs,
            retained=nbytes > 0,
            retained_bytes=nbytes,
            forward_flops=fwd,
            modeled_backward_flops=prim.backward_flops(in_shapes, out_shape, needs),
            inputs=inputs,
            in_shapes=in_shapes,
            out_shape=out_shape,
            attrs=attrs,
            saved=saved,
        )
        self.nodes.append(node)
        out.node = node.index
        out._tape = self
        return out

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("matmul", a, b)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        return self.apply("add", a, b)

    def scale(self, a: Tensor, factor: float) -> Tensor:
        return self.apply("scale", a, factor=float(factor))

    def transpose(self, a: Tensor) -> Tensor:
        return self.apply("transpose", a)

    def split_heads(self, x: Tensor, batch: int, heads: int) -> Tensor:
        return self.apply("split_heads", x, batch=batch, heads=heads)

    def merge_heads(self, x: Tensor, batch: int, heads: int) -> Tensor:
        return self.apply("merge_heads", x, batch=batch, heads=heads)

    def row_softmax(self, a: Tensor) -> Tensor:
        return self.apply("row_softmax", a)

    def layer_norm(self, x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
        return self.apply("layer_norm", x, gamma, beta)

    def gelu(self, x: Tensor) -> Tensor:
        return self.apply("gelu", x)

    def embedding_lookup(self, table: Tensor, ids: Union[np.ndarray, Shape]) -> Tensor:
        """ids is an integer array, or just its shape when tracing symbolically."""
        if isinstance(ids, np.ndarray):
            return self.apply("embedding_lookup", table, ids=ids, ids_shape=tuple(ids.shape))
        return self.apply("embedding_lookup", table, ids=None, ids_shape=tuple(ids))

    def cross_entropy_mean(self, logits: Tensor, labels: Optional[np.ndarray]) -> Tensor:
        labels_shape = None if labels is None else tuple(labels.shape)
        return self.apply("cross_entropy_mean", logits, labels=labels, labels_shape=labels_shape)

    def dropout(self, x: Tensor, p: float, key: int) -> Tensor:
        """Identity outside training or when p == 0; otherwise a replayable mask."""
        if not self.training or p <= 0.0:
            return x
        rng = None
        if not x.is_meta:
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, self.step, key])))
        return self.apply("dropout", x, p=float(p), key=key, rng=rng)

    # --- backward ---

    def backward(self, loss: Tensor, cut_layer: Optional[int] = None) -> Dict[str, np.ndarray]:
        """
        Reverse pass over the tape.

        Args:
            loss: scalar tensor recorded on this tape
            cut_layer: optional check that the caller agrees with the recorded cut

        Returns:
            Gradient map keyed by trainable parameter name
        """
        if not self.grad_enabled:
            raise EngineError("backward on a tape recorded without grad tracking")
        if loss.is_meta:
            raise EngineError("backward needs concrete tensors; this tape was traced symbolically")
        if loss.numel != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if cut_layer is not None and cut_layer != self.cut_layer:
            raise EngineError(f"backward cut layer {cut_layer} differs from the recorded cut {self.cut_layer}")
        if loss._tape is not self or loss.node is None or not loss.requires_grad:
            raise EngineError("loss does not depend on any trainable parameter on this tape")

        pending: Dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
        param_grads: Dict[str, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = pending.pop(node.index, None)
            if g is None:
                continue
            prim = PRIMITIVES[node.kind]
            in_grads = prim.backward_fn(g, node.saved, node.needs, node.attrs)
            self._count("backward", node.kind, prim.backward_flops(node.in_shapes, node.out_shape, node.needs))
            for t, need, grad in zip(node.inputs, node.needs, in_grads):
                if not need:
                    continue
                if t.node is not None:
                    prev = pending.get(t.node)
                    pending[t.node] = grad if prev is None else prev + grad
                else:
                    if t.name is None:
                        raise EngineError(f"trainable leaf feeding {node.kind} has no parameter name")
                    prev = param_grads.get(t.name)
                    param_grads[t.name] = grad if prev is None else prev + grad

        for name, grad in param_grads.items():
            if not all_finite(grad):
                raise NumericError(f"non-finite gradient for {name}")
        return param_grads


# --- AdamW ---

@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)

    def sync(self, trainable: Dict[str, Shape]) -> None:
        """Keeps moment buffers for exactly the currently trainable parameters."""
        for name in list(self.exp_avg):
            if name not in trainable:
                del self.exp_avg[name]
                del self.exp_avg_sq[name]
        for name, shape in trainable.items():
            if name not in self.exp_avg:
                self.exp_avg[name] = np.zeros(shape)
                self.exp_avg_sq[name] = np.zeros(shape)

    @property
    def buffer_bytes(self) -> int:
        return sum(b.nbytes for b in self.exp_avg.values()) + sum(b.nbytes for b in self.exp_avg_sq.values())


def adamw_step(state: OptimizerState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
    """Decoupled-weight-decay Adam update of ``params`` in place for every key of ``grads``."""
    for name in grads:
        if name not in state.exp_avg:
            raise ContractError(f"gradient for '{name}', which is not a trainable parameter")
    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for name in sorted(grads):
        g = grads[name]
        m = state.exp_avg[name] = state.beta1 * state.exp_avg[name] + (1.0 - state.beta1) * g
        v = state.exp_avg_sq[name] = state.beta2 * state.exp_avg_sq[name] + (1.0 - state.beta2) * g * g
        theta = params[name] * (1.0 - state.lr * state.weight_decay)
        params[name] = theta - state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
