"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops only record onto a tape when one is active::

    with Tape() as tape:
        loss = cross_entropy(matmul(x, w), targets)
    backward(loss)          # accumulates into w.grad

Outside a tape the same functions just compute values, which is what
evaluation code relies on.
"""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError, DimensionError

_ids = itertools.count()
_local = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "id", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable ops; replayed in reverse by ``gradients``."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, kind, inputs, output, backward_fn) -> None:
        output._tape = self
        output.requires_grad = True
        self.records.append(_Record(kind, tuple(inputs), output, backward_fn))

    def gradients(self, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
        """Return ``{leaf id: d loss / d leaf}`` without touching any ``.grad`` slot.

        Only leaves reachable from ``loss`` appear. When ``wrt`` is given the
        result is restricted to those tensors (missing ones map to zeros).
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        pending = {loss.id: np.ones_like(loss.data)}
        leaves: dict[int, np.ndarray] = {}
        for rec in reversed(self.records):
            g = pending.pop(rec.output.id, None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                target = leaves if inp.is_leaf else pending
                if inp.id in target:
                    target[inp.id] = target[inp.id] + gi
                else:
                    target[inp.id] = gi
        if wrt is None:
            return leaves
        return {t.id: leaves.get(t.id, np.zeros_like(t.data)) for t in wrt}


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _leaves_of(tape: Tape) -> dict[int, Tensor]:
    out = {}
    for rec in tape.records:
        for inp in rec.inputs:
            if inp.is_leaf and inp.requires_grad:
                out[inp.id] = inp
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d leaf into each reachable leaf's ``grad`` slot."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss is not recorded on any tape")
    tape = loss._tape
    grads = tape.gradients(loss)
    leaves = _leaves_of(tape)
    for lid, g in grads.items():
        leaf = leaves[lid]
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _emit(kind: str, value: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out.requires_grad = False
    out.id = next(_ids)
    out.name = None
    out._tape = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(kind, inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- forward ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        value = a.data @ b.data
    except ValueError as exc:
        raise DimensionError("matmul", str(exc)) from None

    def grad(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.data.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", value, (a, b), grad)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.data + b.data
    except ValueError:
        raise DimensionError("add", f"cannot broadcast {a.shape} with {b.shape}") from None
    if value.shape != a.shape and value.shape != b.shape:
        raise DimensionError("add", f"broadcast of {a.shape} and {b.shape} widens both operands")
    return _emit("add", value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError("mul", f"shapes differ: {a.shape} vs {b.shape}")
    return _emit("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    return _emit("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    value = 0.5 * x * (1.0 + t)

    def grad(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit("gelu", value, (a,), grad)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    y = _softmax(a.data)

    def grad(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", y, (a,), grad)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-10) -> Tensor:
    n = a.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError("layer_norm", f"gain/bias must be ({n},), got {gain.shape}/{bias.shape}")
    x = a.data
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    value = xhat * gain.data + bias.data

    def grad(g):
        axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _emit("layer_norm", value, (a, gain, bias), grad)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise DataError("embedding_lookup: indices must be integers")
    if table.data.ndim != 2:
        raise DimensionError("embedding_lookup", f"table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DataError(f"embedding_lookup: index out of range [0, {table.shape[0]})")

    def grad(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _emit("embedding_lookup", table.data[idx], (table,), grad)


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention with a causal mask; inputs are (..., T, d)."""
    if not (q.shape == k.shape == v.shape) or q.data.ndim < 2:
        raise DimensionError("causal_attention", f"q/k/v shapes must match: {q.shape}, {k.shape}, {v.shape}")
    T, d = q.shape[-2], q.shape[-1]
    s = 1.0 / math.sqrt(d)
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * s
    future = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores = np.where(future, -np.inf, scores)
    p = _softmax(scores)
    value = p @ v.data

    def grad(g):
        dv = np.swapaxes(p, -1, -2) @ g
        dp = g @ np.swapaxes(v.data, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * s
        dq = ds @ k.data
        dk = np.swapaxes(ds, -1, -2) @ q.data
        return dq, dk, dv

    return _emit("causal_attention", value, (q, k, v), grad)


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean next-token cross-entropy over rows whose target is not ``ignore_index``."""
    t = np.asarray(targets)
    if logits.data.ndim != 2 or t.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy", f"logits {logits.shape} vs targets {t.shape}")
    V = logits.shape[1]
    keep = np.ones(t.shape, dtype=bool) if ignore_index is None else t != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ContractError("cross_entropy: no target positions to score")
    tk = t[keep]
    if tk.min() < 0 or tk.max() >= V:
        raise DataError(f"cross_entropy: target out of vocabulary range [0, {V})")
    x = logits.data[keep]
    z = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    value = np.array((logz - z[rows, tk]).sum() / n)

    def grad(g):
        p = np.exp(z - logz[:, None])
        p[rows, tk] -= 1.0
        out = np.zeros_like(logits.data)
        out[keep] = p * (float(g) / n)
        return (out,)

    return _emit("cross_entropy", value, (logits,), grad)


# --------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    try:
        value = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError("reshape", str(exc)) from None
    return _emit("reshape", value, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[..., start:stop]``."""
    if not 0 <= start < stop <= a.shape[-1]:
        raise DimensionError("slice_last", f"bad range [{start}, {stop}) for last dim {a.shape[-1]}")

    def grad(g):
        out = np.zeros_like(a.data)
        out[..., start:stop] = g
        return (out,)

    return _emit("slice_last", a.data[..., start:stop], (a,), grad)


# ------------------------------------------------------- parameter groups


@dataclass
class ParameterGroup:
    """Named unit of trainable parameters; the granularity of masks and cancellation scores."""

    id: int
    name: str
    params: list[Tensor] = field(default_factory=list)

    @property
    def size(self) -> int:
        return sum(p.size for p in self.params)


@dataclass
class FlatGradient:
    """Concatenated gradient of the selected parameter groups.

    ``offsets[i]`` is where group ``group_ids[i]`` starts inside ``values``.
    ``full_size`` is the length the vector would have with no mask.
    """

    values: np.ndarray
    group_ids: tuple[int, ...]
    offsets: tuple[int, ...]
    sizes: tuple[int, ...]
    full_size: int
    all_group_ids: tuple[int, ...] = ()
    all_sizes: tuple[int, ...] = ()

    def __len__(self) -> int:
        return self.values.size

    def segment(self, group_id: int) -> np.ndarray:
        i = self.group_ids.index(group_id)
        return self.values[self.offsets[i]:self.offsets[i] + self.sizes[i]]

    def restrict(self, mask: Iterable[int] | None) -> FlatGradient:
        """Drop every group not in ``mask``; segments are copied bit-for-bit."""
        if mask is None:
            return self
        keep = set(mask)
        unknown = keep - set(self.group_ids)
        if unknown:
            raise ContractError(f"mask references groups not present: {sorted(unknown)}")
        ids, offsets, sizes, parts = [], [], [], []
        pos = 0
        for gid, off, n in zip(self.group_ids, self.offsets, self.sizes):
            if gid in keep:
                ids.append(gid)
                offsets.append(pos)
                sizes.append(n)
                parts.append(self.values[off:off + n])
                pos += n
        values = np.concatenate(parts) if parts else np.zeros(0)
        return FlatGradient(values, tuple(ids), tuple(offsets), tuple(sizes),
                            self.full_size, self.all_group_ids, self.all_sizes)

    def with_values(self, values: np.ndarray) -> FlatGradient:
        if values.shape != self.values.shape:
            raise ContractError(f"expected {self.values.shape}, got {values.shape}")
        return FlatGradient(values, self.group_ids, self.offsets, self.sizes,
                            self.full_size, self.all_group_ids, self.all_sizes)

    def expand(self) -> np.ndarray:
        """Full-length vector with zeros in the masked-out segments."""
        if len(self.values) == self.full_size:
            return self.values
        out = np.zeros(self.full_size)
        pos = 0
        starts = {}
        for gid, n in zip(self.all_group_ids, self.all_sizes):
            starts[gid] = pos
            pos += n
        for gid, off, n in zip(self.group_ids, self.offsets, self.sizes):
            out[starts[gid]:starts[gid] + n] = self.values[off:off + n]
        return out


def _as_groups(params) -> list[ParameterGroup]:
    groups = []
    for i, p in enumerate(params):
        if isinstance(p, ParameterGroup):
            groups.append(p)
        else:
            groups.append(ParameterGroup(i, p.name or f"param{i}", [p]))
    return groups


def flatten_gradients(params, mask: Iterable[int] | None = None,
                      grads: dict[int, np.ndarray] | None = None) -> FlatGradient:
    """Concatenate gradients in declared order.

    ``params`` is a sequence of :class:`ParameterGroup` or bare tensors (each
    bare tensor is its own group, id = position). Gradients come from the
    tensors' ``grad`` slots unless a ``{tensor id: array}`` map is passed.
    """
    groups = _as_groups(params)
    valid = {g.id for g in groups}
    keep = valid if mask is None else set(mask)
    if not keep <= valid:
        raise ContractError(f"mask references unknown groups: {sorted(keep - valid)}")
    ids, offsets, sizes, parts = [], [], [], []
    pos = 0
    for g in groups:
        if g.id not in keep:
            continue
        for p in g.params:
            gv = grads.get(p.id) if grads is not None else p.grad
            if gv is None:
                raise ContractError(f"no gradient for parameter {p.name or p.id} in group {g.name!r}")
            parts.append(np.asarray(gv, dtype=np.float64).reshape(-1))
        ids.append(g.id)
        offsets.append(pos)
        sizes.append(g.size)
        pos += g.size
    values = np.concatenate(parts) if parts else np.zeros(0)
    return FlatGradient(values, tuple(ids), tuple(offsets), tuple(sizes),
                        sum(g.size for g in groups),
                        tuple(g.id for g in groups), tuple(g.size for g in groups))
