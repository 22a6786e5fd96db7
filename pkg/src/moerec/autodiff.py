"""Dense float64 tensors with a record-replay tape for reverse-mode differentiation.

Ops compute eagerly with numpy and, while a Tape is active, record a backward
rule. ``backward(loss, tape)`` replays the records in reverse and accumulates
gradients into every tensor that requires them. Tensors written by an op are
treated as immutable afterwards.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A float64 ndarray plus gradient metadata.

    Leaf tensors created with ``requires_grad=True`` get a zero-filled ``grad``
    buffer immediately, so parameters never touched by a backward pass report
    an all-zero gradient rather than ``None``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_ACTIVE_TAPE: Optional["Tape"] = None


class Tape:
    """Ordered record of operations; inputs are always recorded before use.

    One backward traversal walks the records exactly once, in reverse
    recording order, which is a valid reverse-topological order by
    construction.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
    """Append a backward rule if a tape is active and the op is differentiable."""
    if _ACTIVE_TAPE is not None and out.requires_grad:
        _ACTIVE_TAPE._records.append((out, inputs, backward_fn))


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` for every requires_grad tensor reachable from ``loss``.

    Gradients accumulate (+=) into existing buffers; tensors not reachable
    from the loss keep whatever their buffer already holds (zeros for fresh
    parameters).
    """
    if loss.data.shape != ():
        raise ContractError(
            f"backward expects a scalar loss, got shape {loss.data.shape}"
        )
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, backward_fn in reversed(tape._records):
        g = adjoints.pop(id(out), None)
        if g is None:
            continue
        for tensor, contrib in zip(inputs, backward_fn(g)):
            if contrib is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in adjoints:
                adjoints[key] = adjoints[key] + contrib
            else:
                adjoints[key] = contrib
                touched[key] = tensor
    for key, g in adjoints.items():
        t = touched[key]
        if t.grad is None:
            t.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            t.grad += g
    if loss.grad is None:
        loss.grad = np.ones((), dtype=np.float64)
    else:
        loss.grad += 1.0


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._from_op(a.data + b.data, a.requires_grad or b.requires_grad)
    _record(out, (a, b), lambda g: (_reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._from_op(a.data - b.data, a.requires_grad or b.requires_grad)
    _record(out, (a, b), lambda g: (_reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._from_op(a.data * b.data, a.requires_grad or b.requires_grad)
    _record(
        out,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)),
    )
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._from_op(a.data / b.data, a.requires_grad or b.requires_grad)

    def _bwd(g):
        return (
            _reduce_to(g / b.data, a.data.shape),
            _reduce_to(-g * a.data / (b.data * b.data), b.data.shape),
        )

    _record(out, (a, b), _bwd)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor._from_op(a.data * s, a.requires_grad)
    _record(out, (a,), lambda g: (g * s,))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with stacked leading batch dimensions.

    Operands must have ndim >= 2; 2-D weights broadcast against batched
    activations the way ``np.matmul`` does.
    """
    if a.ndim < 2 or b.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}") from e
    out = Tensor._from_op(data, a.requires_grad or b.requires_grad)

    def _bwd(g):
        # skip the side that does not require gradients (e.g. constant inputs)
        ga = (_reduce_to(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
              if a.requires_grad else None)
        gb = (_reduce_to(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
              if b.requires_grad else None)
        return ga, gb

    _record(out, (a, b), _bwd)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor._from_op(a.data.reshape(shape), a.requires_grad)
    _record(out, (a,), lambda g: (g.reshape(a.data.shape),))
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor._from_op(a.data.transpose(axes), a.requires_grad)
    _record(out, (a,), lambda g: (g.transpose(inv),))
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = Tensor._from_op(
        np.concatenate(datas, axis=axis), any(t.requires_grad for t in tensors)
    )
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]
    _record(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor._from_op(
        np.stack([t.data for t in tensors], axis=axis),
        any(t.requires_grad for t in tensors),
    )

    def _bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    _record(out, tuple(tensors), _bwd)
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad)

    def _bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    _record(out, (a,), _bwd)
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    out = Tensor._from_op(np.maximum(a.data, 0.0), a.requires_grad)
    _record(out, (a,), lambda g: (g * (a.data > 0.0),))
    return out


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor._from_op(x * cdf, a.requires_grad)

    def _bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    _record(out, (a,), _bwd)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax; outputs are positive and sum to 1 along ``axis``."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._from_op(y, a.requires_grad)

    def _bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    _record(out, (a,), _bwd)
    return out


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    d = a.data.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs a last dimension >= 2, got {d}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = Tensor._from_op(
        xhat * gain.data + bias.data,
        a.requires_grad or gain.requires_grad or bias.requires_grad,
    )

    def _bwd(g):
        dgain = _reduce_to(g * xhat, gain.data.shape)
        dbias = _reduce_to(g, bias.data.shape)
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return _reduce_to(dx, a.data.shape), dgain, dbias

    _record(out, (a, gain, bias), _bwd)
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    ``labels`` is an integer array of class indices in [0, n_classes).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"cross_entropy expects (batch, classes) logits and (batch,) labels, "
            f"got {logits.data.shape} and {labels.shape}"
        )
    n, c = logits.data.shape
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= c:
        raise IndexError(f"label out of range [0, {c})")
    zmax = logits.data.max(axis=1, keepdims=True)
    ez = np.exp(logits.data - zmax)
    lse = np.log(ez.sum(axis=1)) + zmax[:, 0]
    picked = logits.data[np.arange(n), labels]
    out = Tensor._from_op(np.mean(lse - picked), logits.requires_grad)

    def _bwd(g):
        p = ez / ez.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    _record(out, (logits,), _bwd)
    return out


def conv1d(x: Tensor, w: Tensor, bias: Tensor, padding: int) -> Tensor:
    """1-d convolution, stride 1: x (b, c_in, L) * w (c_out, c_in, K) -> (b, c_out, L').

    With padding = (K - 1) / 2 the length is preserved.
    """
    b, cin, L = x.data.shape
    cout, cin_w, K = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv1d channel mismatch: input {x.data.shape}, kernel {w.data.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    # cols: (b, L_out, c_in, K)
    cols = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2).transpose(0, 2, 1, 3)
    l_out = cols.shape[1]
    flat = cols.reshape(b, l_out, cin * K)
    y = np.matmul(flat, w.data.reshape(cout, cin * K).T) + bias.data
    out = Tensor._from_op(np.ascontiguousarray(y.transpose(0, 2, 1)), x.requires_grad or w.requires_grad or bias.requires_grad)

    def _bwd(g):
        gl = g.transpose(0, 2, 1)  # (b, L_out, c_out)
        dw = np.einsum("blik,blo->oik", cols, gl)
        dbias = gl.sum(axis=(0, 1))
        dflat = np.matmul(gl, w.data.reshape(cout, cin * K))
        dxp = np.zeros_like(xp)
        dcols = dflat.reshape(b, l_out, cin, K)
        for k in range(K):
            dxp[:, :, k : k + l_out] += dcols[:, :, :, k].transpose(0, 2, 1)
        dx = dxp[:, :, padding : padding + L] if padding else dxp
        return dx, dw, dbias

    _record(out, (x, w, bias), _bwd)
    return out
