"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Tensors are immutable value carriers. Every primitive applied while a
:class:`Tape` is active is appended to that tape; :func:`backward` then sweeps
the tape in reverse and returns a :class:`GradientSet` holding gradients for
every leaf (parameters, inputs) and every node registered as a probe.
Interior gradients that nobody asked for are dropped as soon as they have been
propagated.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Mapping

import numpy as np

_ids = itertools.count(1)
_local = threading.local()


class NumericFault(FloatingPointError):
    """A primitive produced NaN or Inf."""

    def __init__(self, kind: str, detail: str = ""):
        self.kind = kind
        msg = f"numeric fault in primitive '{kind}': non-finite output"
        super().__init__(msg + (f" ({detail})" if detail else ""))


class ShapeError(ValueError):
    pass


# -- precision -----------------------------------------------------------------


def default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors (float32 or float64)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    prev = default_dtype()
    _local.dtype = dtype
    try:
        yield
    finally:
        _local.dtype = prev


# -- tensors -------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "node_id")

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else default_dtype())
        arr.flags.writeable = False
        self.data = arr
        self.node_id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t.node_id = next(_ids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, id={self.node_id})"

    # operator sugar
    def __add__(self, other):
        return forward_primitive("add", self, other)

    def __radd__(self, other):
        return forward_primitive("add", other, self)

    def __sub__(self, other):
        return forward_primitive("sub", self, other)

    def __rsub__(self, other):
        return forward_primitive("sub", other, self)

    def __mul__(self, other):
        return forward_primitive("mul", self, other)

    def __rmul__(self, other):
        return forward_primitive("mul", other, self)

    def __neg__(self):
        return forward_primitive("mul", self, -1.0)

    def __matmul__(self, other):
        return forward_primitive("matmul", self, other)


# -- primitive registry --------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    # backward(grad_out, ctx, needs) -> tuple of input grads (None where not needed)
    backward: Callable[..., tuple]


PRIMITIVES: dict[str, Primitive] = {}


def register(name: str):
    def deco(cls):
        PRIMITIVES[name] = Primitive(name, cls.forward, cls.backward)
        return cls

    return deco


# -- tape ------------------------------------------------------------------------


@dataclass
class Record:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict
    output: int
    ctx: Any
    in_shapes: tuple[tuple[int, ...], ...]
    out_shape: tuple[int, ...]


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)
    probes: set[int] = field(default_factory=set)
    leaves: dict[int, np.ndarray] = field(default_factory=dict)
    _produced: dict[int, tuple[int, ...]] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def probe(self, t: Tensor) -> Tensor:
        """Retain the gradient of ``t`` through backward. Forward is untouched."""
        self.probes.add(t.node_id)
        return t

    def shape_of(self, node_id: int) -> tuple[int, ...]:
        if node_id in self._produced:
            return self._produced[node_id]
        return self.leaves[node_id].shape

    def _record(self, kind, inputs: Iterable[Tensor], attrs, out: Tensor, ctx) -> None:
        ins = tuple(inputs)
        for t in ins:
            if t.node_id not in self._produced and t.node_id not in self.leaves:
                self.leaves[t.node_id] = t.data
        self.records.append(
            Record(
                kind,
                tuple(t.node_id for t in ins),
                dict(attrs),
                out.node_id,
                ctx,
                tuple(t.shape for t in ins),
                out.shape,
            )
        )
        self._produced[out.node_id] = out.shape

    def replay(self, overrides: Mapping[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
        """Re-run every recorded primitive from the leaf values (optionally overridden)."""
        values: dict[int, np.ndarray] = dict(self.leaves)
        if overrides:
            values.update(overrides)
        for rec in self.records:
            out, _ = PRIMITIVES[rec.kind].forward(*(values[i] for i in rec.inputs), **rec.attrs)
            values[rec.output] = out
        return values


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Evaluate without recording (inference, evaluation)."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack[:] = saved


# -- forward / backward --------------------------------------------------------


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def forward_primitive(kind: str, *inputs, **attrs) -> Tensor:
    """Apply primitive ``kind`` and record it on the active tape, if any."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive '{kind}'") from None
    dtype = next((t.dtype for t in inputs if isinstance(t, Tensor)), None)
    tensors = [as_tensor(x, dtype) for x in inputs]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out, ctx = prim.forward(*(t.data for t in tensors), **attrs)
    if not np.isfinite(out).all():
        raise NumericFault(kind, f"output shape {out.shape}")
    result = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None:
        tape._record(kind, tensors, attrs, result, ctx)
    return result


class GradientSet(dict):
    """Mapping node id -> gradient array. Also indexable by :class:`Tensor`."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return dict.__getitem__(self, key)

    def __contains__(self, key) -> bool:
        if isinstance(key, Tensor):
            key = key.node_id
        return dict.__contains__(self, key)

    def get(self, key, default=None):
        if isinstance(key, Tensor):
            key = key.node_id
        return dict.get(self, key, default)


def backward(tape: Tape, output: Tensor, wrt: Iterable[Tensor | int] | None = None) -> GradientSet:
    """Gradients of scalar ``output`` for every leaf and probe on ``tape``.

    ``wrt`` narrows the leaves of interest (probes are always returned); it only
    saves work, values are the same.
    """
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    shapes: dict[int, tuple[int, ...]] = {}
    if wrt is None:
        wanted = set(tape.leaves) | tape.probes
    else:
        wanted = set(tape.probes)
        for w in wrt:
            if isinstance(w, Tensor):
                shapes[w.node_id] = w.shape
                wanted.add(w.node_id)
            else:
                wanted.add(int(w))

    # forward sweep: which nodes lie downstream of something we want
    live: set[int] = {i for i in wanted if i in tape.leaves or i in tape.probes}
    for rec in tape.records:
        if any(i in live for i in rec.inputs):
            live.add(rec.output)

    grads: dict[int, np.ndarray] = {}
    if output.node_id in live:
        grads[output.node_id] = np.ones(output.shape, dtype=output.dtype)

    kept: dict[int, np.ndarray] = {}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None)
        if rec.output in wanted and g is not None:
            kept[rec.output] = g
        if g is None:
            continue
        needs = tuple(i in live for i in rec.inputs)
        if not any(needs):
            continue
        in_grads = PRIMITIVES[rec.kind].backward(g, rec.ctx, needs, **rec.attrs)
        for nid, need, gi in zip(rec.inputs, needs, in_grads):
            if not need or gi is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi

    out = GradientSet()
    for nid in wanted:
        if nid in kept:
            out[nid] = kept[nid]
        elif nid in grads:
            out[nid] = grads[nid]
        elif nid in tape.leaves or nid in tape._produced:
            out[nid] = np.zeros(tape.shape_of(nid), dtype=output.dtype)
        elif nid in shapes:
            out[nid] = np.zeros(shapes[nid], dtype=output.dtype)
    return out


def stop_gradient(t: Tensor) -> Tensor:
    """Forward identity; contributes nothing to the gradients of ``t``'s ancestors."""
    return forward_primitive("stop_gradient", t)
