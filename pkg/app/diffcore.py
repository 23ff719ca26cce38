"""
Reverse-mode automatic differentiation over dense float64 arrays.

Operations executed while a GradientTape is open are recorded on it (define-by-run).
Outside a tape, or inside no_grad(), tensors are plain values with no graph node.
Only a leading batch dimension may broadcast; anything else is a ShapeError.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from app.errors import BackwardError, ShapeError

# vjp(upstream_grad, needs) -> one gradient (or None) per parent
VJP = Callable[[np.ndarray, tuple[bool, ...]], tuple[np.ndarray | None, ...]]

_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> GradientTape | None:
    stack = _stack()
    return stack[-1] if stack else None


class Node:
    __slots__ = ("op", "parents", "vjp", "index", "tape")

    def __init__(self, op: str, parents: tuple[Tensor, ...], vjp: VJP, index: int, tape: GradientTape):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.index = index
        self.tape = tape

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, index={self.index})"


class Tensor:
    """A float64 array, optionally attached to a differentiation graph."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def on(self, tape: GradientTape | None) -> bool:
        """Whether gradients can flow into this tensor on `tape`."""
        if tape is None:
            return False
        return self.requires_grad or (self.node is not None and self.node.tape is tape)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.node is None:
            raise BackwardError("backward() called on a tensor that is detached from any tape")
        self.node.tape.backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, reciprocal(as_tensor(other)))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, index):
        return take(self, index)


class GradientTape:
    """Ordered record of executed operations; backward runs once per tape."""

    def __init__(self):
        self.records: list[Node] = []
        self.grads: dict[int, np.ndarray] = {}
        self._consumed = False

    def __enter__(self) -> GradientTape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, out: Tensor, op: str, parents: tuple[Tensor, ...], vjp: VJP) -> Tensor:
        out.node = Node(op, parents, vjp, len(self.records), self)
        self.records.append(out.node)
        return out

    def _check(self, loss: Tensor) -> None:
        if loss.node is None or loss.node.tape is not self:
            raise BackwardError("loss was not recorded on this tape (detached tensor)")
        if loss.size != 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise BackwardError("backward already ran on this tape; record a new tape")

    def _run(self, loss: Tensor, targets: set[int] | None) -> dict[int, tuple[Tensor, np.ndarray]]:
        self._check(loss)
        upto = self.records[: loss.node.index + 1]

        def wanted(t: Tensor) -> bool:
            return t.requires_grad and (targets is None or id(t) in targets)

        # forward sweep: which nodes lead to a wanted leaf
        reaches: dict[int, bool] = {}
        for node in upto:
            reaches[id(node)] = any(
                (p.node is not None and p.node.tape is self and reaches.get(id(p.node), False))
                or (p.node is None and wanted(p))
                for p in node.parents
            )

        pending: dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.data)}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        for node in reversed(upto):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            needs = tuple(
                (p.node is not None and p.node.tape is self and reaches[id(p.node)])
                or (p.node is None and wanted(p))
                for p in node.parents
            )
            if not any(needs):
                continue
            for parent, need, pg in zip(node.parents, needs, node.vjp(g, needs)):
                if not need or pg is None:
                    continue
                if parent.node is not None and parent.node.tape is self:
                    key = id(parent.node)
                    pending[key] = pending[key] + pg if key in pending else pg
                else:
                    key = id(parent)
                    if key in leaves:
                        leaves[key] = (parent, leaves[key][1] + pg)
                    else:
                        leaves[key] = (parent, pg)
        self._consumed = True
        self.grads = {key: g for key, (_, g) in leaves.items()}
        return leaves

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients into `.grad` of every trainable leaf reachable from `loss`."""
        for tensor, g in self._run(loss, None).values():
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of `loss` w.r.t. `sources` without touching `.grad` (zeros if unreachable)."""
        leaves = self._run(loss, {id(s) for s in sources})
        return [leaves[id(s)][1] if id(s) in leaves else np.zeros_like(s.data) for s in sources]

    def reachable_leaves(self, loss: Tensor) -> list[Tensor]:
        """Trainable leaves that `loss` depends on through recorded operations."""
        seen: dict[int, Tensor] = {}
        stack = [loss]
        visited: set[int] = set()
        while stack:
            t = stack.pop()
            if t.node is None or t.node.tape is not self:
                if t.requires_grad:
                    seen[id(t)] = t
                continue
            if id(t.node) in visited:
                continue
            visited.add(id(t.node))
            stack.extend(t.node.parents)
        return list(seen.values())


@contextmanager
def no_grad() -> Iterator[None]:
    """Detached mode: operations inside are not recorded."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data.copy(), requires_grad=False, name=x.name)


def _make(value: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp: VJP) -> Tensor:
    out = Tensor(value)
    tape = current_tape()
    if tape is not None and any(p.on(tape) for p in parents):
        tape.record(out, op, parents, vjp)
    return out


def apply(op: str, parents: Sequence[Tensor], value: np.ndarray, vjp: VJP) -> Tensor:
    """Record a user-defined primitive given its value and vector-Jacobian product."""
    return _make(np.asarray(value, dtype=np.float64), op, tuple(parents), vjp)


def _broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if a.ndim == b.ndim + 1 and a.shape[1:] == b.shape:
        return a.shape
    if b.ndim == a.ndim + 1 and b.shape[1:] == a.shape:
        return b.shape
    raise ShapeError(
        f"{op}: shapes {a.shape} and {b.shape} do not conform "
        "(only a leading batch dimension may broadcast)"
    )


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return g if g.shape == shape else g.sum(axis=0)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def add(a, b) -> Tensor:
    if _is_scalar(b):
        return shift(as_tensor(a), float(b))
    if _is_scalar(a):
        return shift(as_tensor(b), float(a))
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b, "add")

    def vjp(g, needs):
        return (_reduce_to(g, a.shape) if needs[0] else None, _reduce_to(g, b.shape) if needs[1] else None)

    return _make(a.data + b.data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return shift(as_tensor(a), -float(b))
    if _is_scalar(a):
        return shift(scale(as_tensor(b), -1.0), float(a))
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b, "sub")

    def vjp(g, needs):
        return (_reduce_to(g, a.shape) if needs[0] else None, -_reduce_to(g, b.shape) if needs[1] else None)

    return _make(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(as_tensor(a), float(b))
    if _is_scalar(a):
        return scale(as_tensor(b), float(a))
    a, b = as_tensor(a), as_tensor(b)
    _broadcast(a, b, "mul")

    def vjp(g, needs):
        return (
            _reduce_to(g * b.data, a.shape) if needs[0] else None,
            _reduce_to(g * a.data, b.shape) if needs[1] else None,
        )

    return _make(a.data * b.data, "mul", (a, b), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, "scale", (x,), lambda g, needs: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    return _make(x.data + c, "shift", (x,), lambda g, needs: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            if b.ndim == 2:
                ga = g @ b.data.T
            elif a.ndim == 2:
                ga = np.outer(g, b.data)
            else:
                ga = g * b.data
        if needs[1]:
            if a.ndim == 2:
                gb = a.data.T @ g
            elif b.ndim == 2:
                gb = np.outer(a.data, g)
            else:
                gb = g * a.data
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(x.data * s, "silu", (x,), lambda g, needs: (g * s * (1.0 + x.data * (1.0 - s)),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, "exp", (x,), lambda g, needs: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), "log", (x,), lambda g, needs: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, "square", (x,), lambda g, needs: (2.0 * g * x.data,))


def reciprocal(x: Tensor) -> Tensor:
    y = 1.0 / x.data
    return _make(y, "reciprocal", (x,), lambda g, needs: (-g * y * y,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    keep = x.data > floor
    return _make(np.where(keep, x.data, floor), "clamp_min", (x,), lambda g, needs: (g * keep,))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    def vjp(g, needs):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(x.data.sum(axis=axis), "sum", (x,), vjp)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / count)


def sqnorm(x: Tensor) -> Tensor:
    """Squared Euclidean norm over the last axis (one scalar per batch row)."""
    return _make((x.data * x.data).sum(axis=-1), "sqnorm", (x,), lambda g, needs: (2.0 * x.data * g[..., None],))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g, needs: (g.reshape(x.shape),))


def take(x: Tensor, index) -> Tensor:
    def vjp(g, needs):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], "take", (x,), vjp)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    rest = {p.shape[:axis] + p.shape[axis + 1 :] for p in parts}
    if len(rest) != 1:
        raise ShapeError(f"concat: shapes {[p.shape for p in parts]} differ off axis {axis}")
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), "concat", parts, vjp)
