"""Dense tensors and a reverse-mode gradient tape.

Activations and parameters are dense numpy arrays; 4-D activations use
row-major (batch, height, width, channel) layout. Ops in
:mod:`hybridcnn.ops` record their backward rules on the active
:class:`GradTape`; :func:`backward` replays the tape in strict reverse
execution order and accumulates a gradient for every trainable parameter.

Training math runs in float32. Gradient-check code builds float64 tensors
and every op preserves the wider dtype, so the same primitives can be
verified against central finite differences at full precision.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericsError

__all__ = ["Tensor", "GradTape", "Gradients", "active_tape", "backward", "ensure_finite"]


def ensure_finite(arr: np.ndarray, context: str) -> np.ndarray:
    """Raise NumericsError if `arr` contains NaN or Inf. Returns `arr`."""
    if not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values produced by {context}")
    return arr


class Tensor:
    """A dense n-dimensional array of 32- or 64-bit reals.

    Tensors are value-like: ops never mutate their inputs, and a tensor
    produced by an op is owned by the tape that recorded it. Parameters are
    the only tensors mutated in place (by the optimizer and by batch-norm
    moving statistics), which is why a model under training needs exclusive
    access.
    """

    __slots__ = ("data", "trainable", "name", "softmax_src")

    def __init__(self, data, dtype=None, trainable: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.trainable = trainable
        self.name = name
        # Set by ops.softmax so the cross-entropy loss can fuse its gradient
        # straight onto the pre-softmax logits.
        self.softmax_src: "Tensor | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{label})"


# Backward rule: maps the upstream gradient to one gradient per op input
# (None for inputs that need no gradient, e.g. batch-norm moving stats).
BackwardRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _TapeEntry:
    __slots__ = ("output", "inputs", "rule", "op_name")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], rule: BackwardRule, op_name: str):
        self.output = output
        self.inputs = inputs
        self.rule = rule
        self.op_name = op_name


_ACTIVE_TAPE: "GradTape | None" = None


def active_tape() -> "GradTape | None":
    return _ACTIVE_TAPE


class GradTape:
    """Ordered record of executed primitive ops.

    Single-writer: one tape is active per thread of execution, tapes do not
    nest, and a tape must not be shared across concurrent training steps.

    Usage::

        with GradTape() as tape:
            probs = ops.softmax(ops.dense(x, w, b))
            loss = training.cross_entropy(probs, labels)
        grads = backward(tape, loss)
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []

    def __enter__(self) -> "GradTape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a GradTape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def record(self, output: Tensor, inputs: Iterable[Tensor], rule: BackwardRule, op_name: str) -> None:
        self._entries.append(_TapeEntry(output, tuple(inputs), rule, op_name))

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> list[_TapeEntry]:
        return self._entries


class Gradients:
    """Gradient lookup produced by :func:`backward`.

    Parameters that never influenced the loss get zero gradients of the
    parameter's own shape and dtype.
    """

    def __init__(self, store: dict[int, np.ndarray]):
        self._store = store

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._store.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._store


def backward(tape: GradTape, loss: Tensor) -> Gradients:
    """Replay `tape` in reverse and return gradients of `loss`.

    `loss` must be a scalar tensor produced by an op recorded on `tape`;
    anything else is a detached graph and a hard error.
    """
    if loss.size != 1:
        raise NumericsError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(e.output) for e in tape.entries}
    if id(loss) not in produced:
        raise NumericsError("loss is not connected to this tape (detached graph)")

    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g_out = acc.get(id(entry.output))
        if g_out is None:
            continue
        grads = entry.rule(g_out)
        for t, g in zip(entry.inputs, grads):
            if g is None:
                continue
            ensure_finite(g, f"backward of {entry.op_name}")
            prev = acc.get(id(t))
            acc[id(t)] = g if prev is None else prev + g
    return Gradients(acc)
