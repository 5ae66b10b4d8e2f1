"""Tensor type and a tape-based reverse-mode differentiation engine.

Ops executed inside ``with Tape():`` are recorded in order; :func:`backward`
replays them in reverse. A tensor consumed by several recorded ops (a tied
kernel applied at several timesteps, say) receives the sum of the
contributions, accumulated in tape order so results are deterministic.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import ShapeError, TapeError

_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))
_ACTIVE: List["Tape"] = []


def _as_float_array(data, dtype=None) -> np.ndarray:
    if dtype is None:
        keep = isinstance(data, (np.ndarray, np.generic)) and data.dtype in _FLOATS
        dtype = data.dtype if keep else np.float32
    arr = np.asarray(data, dtype=dtype)
    # ascontiguousarray would promote 0-d scalars to shape (1,)
    return arr if arr.flags.c_contiguous else arr.copy(order="C")


class Tensor:
    """Dense array participating in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_float_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named leaf tensor. Frozen parameters (``trainable=False``) never get gradients."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable

    def freeze(self):
        self.trainable = False
        self.requires_grad = False
        return self

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def detach(t: Tensor) -> Tensor:
    return Tensor(t.data)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of the differentiable ops run while the tape is active."""

    def __init__(self):
        self.nodes: Optional[List[_Node]] = []

    @property
    def consumed(self) -> bool:
        return self.nodes is None

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return 0 if self.nodes is None else len(self.nodes)


def current_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def make_output(data: np.ndarray, inputs: Sequence[Tensor],
                backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap an op result and record it on the active tape when any input needs a gradient.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    """
    out = Tensor(data)
    tape = current_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    if tape.consumed:
        raise TapeError("cannot record on a tape that has already been consumed by backward()")
    out.requires_grad = True
    out._tape = tape
    tape.nodes.append(_Node(out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor) -> Dict[str, np.ndarray]:
    """Reverse sweep from a scalar loss.

    Every leaf that required a gradient gets ``.grad`` set (zeros when the
    loss does not depend on it). Returns ``{parameter name: gradient}`` for
    trainable parameters seen on the tape.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not recorded on a tape (run the forward pass inside `with Tape():`)")
    if tape.consumed:
        raise TapeError("backward() called twice on the same tape")

    nodes = tape.nodes
    tape.nodes = None
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for node in reversed(nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is None:
                leaves[id(inp)] = inp
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for node in nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp._tape is None:
                leaves.setdefault(id(inp), inp)

    named: Dict[str, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        if isinstance(leaf, Parameter) and leaf.trainable:
            named[leaf.name] = leaf.grad
    return named
