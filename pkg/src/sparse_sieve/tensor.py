"""Dense float64 tensors with a define-by-run tape for reverse-mode gradients.

Operations record themselves on the tape that is active in the current
thread (see :class:`Tape`). Outside a tape they simply compute values, which
keeps inference cheap.

    with Tape() as tape:
        w = Tensor(np.ones(3))
        loss = (w * w).sum()
    grads = tape.backward(loss)
    grads[w]  # -> array([2., 2., 2.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "ShapeError",
    "MomentumState",
    "backward",
    "record",
    "matmul",
    "conv2d",
    "max_pool2d",
    "relu",
    "sign",
    "softmax_cross_entropy",
    "sgd_momentum_step",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeError(RuntimeError):
    """Misuse of a tape: reused after backward, or non-scalar output."""


def _check_finite(arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise FloatingPointError("tensor contains NaN or Inf")
    return arr


class Tensor:
    """An n-d float64 array. Hashes by identity so it can key gradient maps."""

    __slots__ = ("data", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data) -> None:
        arr = np.array(data, dtype=np.float64)
        self.data = _check_finite(arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = _check_finite(np.asarray(arr, dtype=np.float64))
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={np.array2string(self.data, threshold=8)})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records primitive operations executed inside its ``with`` block.

    A tape supports exactly one :meth:`backward` call.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeError("tape already consumed")
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        if self._consumed:
            raise TapeError("tape already consumed")
        self.nodes.append(_Node(out, inputs, vjp))
        self._produced.add(id(out))

    def backward(self, output: Tensor, seed: float = 1.0) -> dict[Tensor, np.ndarray]:
        """Gradient of ``seed * output`` with respect to every leaf tensor."""
        if self._consumed:
            raise TapeError("tape already consumed")
        if output.size != 1:
            raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(output): np.full(output.shape, float(seed))}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None:
                    continue
                key = id(inp)
                if key not in self._produced:
                    leaves[key] = inp
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        if id(output) not in self._produced:
            leaves[id(output)] = output
        self.nodes.clear()
        return {t: _check_finite(grads.get(k, np.zeros(t.shape))) for k, t in leaves.items()}


def backward(tape: Tape, output: Tensor, seed: float = 1.0) -> dict[Tensor, np.ndarray]:
    return tape.backward(output, seed)


def record(value: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``value`` as the output of a custom primitive.

    ``vjp`` maps the upstream gradient to one gradient (or None) per input.
    Used by callers that need a primitive with a non-standard backward rule,
    e.g. a step function with a surrogate derivative.
    """
    out = Tensor._wrap(value)
    tape = _active_tape()
    if tape is not None:
        tape._record(out, tuple(inputs), vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(out, (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def relu(t: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = t.data > 0
    return record(np.where(mask, t.data, 0.0), (t,), lambda g: (g * mask,))


def sign(t: Tensor) -> Tensor:
    """Elementwise sign with sign(0) = 0. Not differentiated through."""
    return Tensor._wrap(np.sign(t.data))


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an (N, C, H, W) batch with (O, C, kh, kw) kernels.

    A 3-d (C, H, W) input is treated as a batch of one and returned 3-d.
    """
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OCkk kernels, got {x.shape}, {kernels.shape}")
    n, c, h, w = xd.shape
    o, kc, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernels {kc}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    oh, ow = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv2d output extent would be non-positive")

    xp = _pad(xd, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # im2col: rows are output positions, columns are (c, kh, kw) taps
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    kmat = kernels.data.reshape(o, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def vjp(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        gk = (gmat.T @ cols).reshape(kernels.shape)
        gcols = (gmat @ kmat).reshape(n, oh, ow, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx[0] if single else gx), gk

    return record(out[0] if single else out, (x, kernels), vjp)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the trailing two axes.

    Extents must be divisible by ``size``. Gradient goes to the first maximum
    in each window.
    """
    *lead, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"spatial extents {(h, w)} not divisible by pool size {size}")
    oh, ow = h // size, w // size
    blocks = x.data.reshape(*lead, oh, size, ow, size)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, oh, ow, size * size)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(*lead, oh, ow, size, size)
        return (np.moveaxis(gb, -2, -3).reshape(x.shape),)

    return record(out, (x,), vjp)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of class scores against integer labels.

    ``logits`` is a (k,) vector with a scalar label, or an (n, k) batch with
    n labels. ``reduction`` is "mean", "sum", or "none" (batch only).
    """
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    if z2.ndim != 2:
        raise ShapeError(f"logits must be 1-d or 2-d, got {logits.shape}")
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = z2.shape[1]
    if lab.shape != (z2.shape[0],):
        raise ShapeError(f"{lab.shape[0]} labels for {z2.shape[0]} logit rows")
    if (lab < 0).any() or (lab >= k).any():
        raise IndexError(f"label out of range for {k} classes")
    logp = _log_softmax(z2)
    rows = np.arange(len(lab))
    per = -logp[rows, lab]
    if reduction == "none":
        out, scale = per, None
    elif reduction == "sum":
        out, scale = per.sum(), 1.0
    elif reduction == "mean":
        out, scale = per.mean(), 1.0 / len(lab)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    if single and reduction == "none":
        out = per[0]

    def vjp(g):
        grad = np.exp(logp)
        grad[rows, lab] -= 1.0
        if scale is None:
            grad *= np.reshape(g, (-1, 1))
        else:
            grad *= g * scale
        return (grad[0] if single else grad,)

    return record(np.asarray(out), (logits,), vjp)


@dataclass
class MomentumState:
    lr: float
    momentum: float = 0.9
    velocity: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_momentum_step(param: np.ndarray, grad: np.ndarray, state: MomentumState) -> np.ndarray:
    """``v <- mu*v + grad``; return ``param - lr*v``. Updates ``state`` in place."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise ShapeError(f"param {param.shape} and grad {grad.shape} differ")
    if state.velocity is None:
        state.velocity = np.zeros_like(param)
    elif state.velocity.shape != param.shape:
        raise ShapeError(f"velocity {state.velocity.shape} does not match param {param.shape}")
    state.velocity = state.momentum * state.velocity + grad
    return param - state.lr * state.velocity
