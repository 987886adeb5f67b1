"""Dense float tensors with a dynamic reverse-mode tape.

Values live in contiguous row-major numpy arrays; image-like data uses
NCHW order. Gradient tracking is opt-in: an operation records a node on
the currently open :class:`Tape` only when at least one input requires
gradients. Nodes are appended in forward order, so the list itself is a
topological order and `Tape.backward` simply walks it in reverse.

Training and inference run in float32; verification (finite-difference
gradient checking) runs in float64.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_debug_checks = False


class NonFiniteError(ArithmeticError):
    """A tensor holds NaN or Inf where finite values are required."""


def set_debug_checks(flag: bool) -> None:
    """Validate every op output for NaN/Inf (slow; tests/debugging only)."""
    global _debug_checks
    _debug_checks = bool(flag)


def debug_checks_enabled() -> bool:
    return _debug_checks


class Tensor:
    """N-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self.tape: Optional["Tape"] = None
        if _debug_checks and not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor constructed with non-finite values")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of {self.data.size} elements")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} != value shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar is installed by codlab.tensor.ops at import time


class Node:
    """One recorded op: a name plus a closure that propagates grads."""

    __slots__ = ("op", "run", "out")

    def __init__(self, op: str, run: Callable[[], None], out):
        self.op = op
        self.run = run
        self.out = out  # Tensor or tuple of Tensors


_active_tape: Optional["Tape"] = None


class Tape:
    """Ordered record of ops from one forward pass.

    Usable as a context manager; only one tape may be open at a time
    (tensors and tapes are confined to a single worker).
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a tape is already active")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def record(self, op: str, out, run: Callable[[], None]) -> None:
        node = Node(op, run, out)
        outs = out if isinstance(out, tuple) else (out,)
        for t in outs:
            t.node_id = len(self.nodes)
            t.tape = self
        self.nodes.append(node)

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
        """Reverse-topological gradient accumulation from a scalar loss.

        Parameters listed in `params` that the loss never touched end up
        with an explicit zero gradient rather than None.
        """
        if loss.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        if loss.tape is not self or loss.node_id is None:
            raise ValueError("loss is not recorded on this tape")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            outs = node.out if isinstance(node.out, tuple) else (node.out,)
            if all(t.grad is None for t in outs):
                continue
            node.run()
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


def active_tape() -> Optional[Tape]:
    return _active_tape


def record_op(op: str, out, inputs: Sequence[Tensor], run: Callable[[], None]):
    """Mark `out` as requiring grad and push a node if a tape is open."""
    tape = _active_tape
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    outs = out if isinstance(out, tuple) else (out,)
    for t in outs:
        t.requires_grad = True
    tape.record(op, out, run)
    return out


def check_finite(arr: np.ndarray, what: str) -> None:
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")
