"""Dense tensors and tape-based reverse-mode differentiation.

Operations only record onto a tape while one is active::

    with GradTape() as tape:
        loss = ops.sum(ops.sigmoid(x))
    backward(loss, tape)

Outside a ``GradTape`` block forward ops run without bookkeeping, which is
what inference uses.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _tape_stack() -> list["GradTape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


class Tensor:
    """N-d array of reals with an optional gradient buffer.

    Float64 input is kept as float64 (``grad_check`` relies on it); anything
    else is stored as float32.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float64:
            arr = arr.astype(DEFAULT_DTYPE, copy=False)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # thin operator sugar; the real work lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def sum(self):
        from . import ops
        return ops.sum(self)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradTape:
    """Ordered log of executed differentiable operations.

    A tape is bound to the thread that entered it and must not be shared.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Attach ``backward`` to ``out`` on the active tape, if it matters.

    ``backward(grad_out)`` must return one array (or None) per input.
    """
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(out, tuple(inputs), backward))
    return out


def backward(loss: Tensor, tape: GradTape, retain_intermediate: bool = False) -> None:
    """Propagate d(loss)/d(.) back through ``tape``.

    Gradients accumulate (``+=``) into ``.grad`` of every leaf tensor that
    requires grad; intermediates receive ``.grad`` only with
    ``retain_intermediate``. The tape is emptied afterwards.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(r.out) for r in tape.records}
    if id(loss) not in produced:
        if not tape.records and loss.requires_grad:
            _accumulate(loss, np.ones_like(loss.data))
            return
        raise ValueError("loss is not produced by any operation recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        if retain_intermediate:
            _accumulate(rec.out, g)
        in_grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ShapeError(f"backward produced grad of shape {gi.shape} for input {inp.shape}")
            key = id(inp)
            if key in produced:
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            else:
                _accumulate(inp, gi)
    tape.records.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-4,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` maps the tensor(s) in ``x`` to a scalar tensor. Every checked tensor
    is promoted to float64 for the duration of the check; the per-entry error
    is ``|ga - gfd| / max(1e-8, |ga| + |gfd|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.data, t.requires_grad, t.grad) for t in xs]
    try:
        for t in xs:
            t.data = np.array(t.data, dtype=np.float64)
            t.requires_grad = True
            t.grad = None

        with GradTape() as tape:
            out = f(*xs)
        backward(out, tape)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

        worst = 0.0
        for t, ga in zip(xs, analytic):
            flat = t.data.reshape(-1)
            gfd = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*xs).item()
                flat[i] = orig - eps
                fm = f(*xs).item()
                flat[i] = orig
                gfd[i] = (fp - fm) / (2.0 * eps)
            ga = ga.reshape(-1)
            rel = np.abs(ga - gfd) / np.maximum(1e-8, np.abs(ga) + np.abs(gfd))
            if rel.size:
                worst = max(worst, float(rel.max()))
        return worst
    finally:
        for t, (data, rg, grad) in zip(xs, saved):
            t.data, t.requires_grad, t.grad = data, rg, grad


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
