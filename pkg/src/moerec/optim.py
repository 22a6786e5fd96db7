"""Adam optimizer with bias-corrected moment estimates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ShapeError

try:
    from numba import njit, prange

    @njit(parallel=True, cache=True)
    def _fused_update(p, g, m, v, beta1, beta2, lr, eps, c1, c2):
        # identical IEEE ops to the numpy path, one memory pass
        for i in prange(p.shape[0]):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
            p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)

except ImportError:  # pragma: no cover
    _fused_update = None


@dataclass
class AdamState:
    """Per-parameter moment buffers plus the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    _scratch: list = field(default_factory=list, repr=False)


def init_adam(params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
        _scratch=[(np.empty_like(p.data), np.empty_like(p.data)) for p in params],
    )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """One Adam update, in place on the parameters (no per-step allocation).

    The step counter is incremented before bias correction, so the first call
    uses t = 1. The elementwise expression is
    ``p -= lr * (m / c1) / (sqrt(v / c2) + eps)``; the fused kernel used by
    the Adam wrapper evaluates the identical expression tree.
    """
    if len(params) != len(state.m):
        raise ShapeError(f"adam_step got {len(params)} params for state of size {len(state.m)}")
    if not state._scratch:
        state._scratch = [(np.empty_like(p.data), np.empty_like(p.data)) for p in params]
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m, v = state.m[i], state.v[i]
        buf, buf2 = state._scratch[i]
        m *= state.beta1
        np.multiply(g, 1.0 - state.beta1, out=buf)
        m += buf
        v *= state.beta2
        np.multiply(g, g, out=buf)
        buf *= 1.0 - state.beta2
        v += buf
        np.divide(v, c2, out=buf)
        np.sqrt(buf, out=buf)
        buf += state.eps
        np.divide(m, c1, out=buf2)
        np.divide(buf2, buf, out=buf2)
        buf2 *= state.lr
        p.data -= buf2


class Adam:
    """Adam bound to a fixed parameter list.

    Parameters and their gradient buffers are repacked into one flat float64
    array each (the tensors' ``data``/``grad`` become views into it), so a
    step is a handful of large vectorized updates instead of hundreds of
    small ones. Elementwise updates are unchanged bit for bit.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        sizes = [p.data.size for p in self.params]
        self._flat = np.empty(sum(sizes), dtype=np.float64)
        self._flat_grad = np.zeros_like(self._flat)
        offset = 0
        for p, size in zip(self.params, sizes):
            shape = p.data.shape
            self._flat[offset : offset + size] = p.data.reshape(-1)
            p.data = self._flat[offset : offset + size].reshape(shape)
            if p.grad is not None:
                self._flat_grad[offset : offset + size] = p.grad.reshape(-1)
            p.grad = self._flat_grad[offset : offset + size].reshape(shape)
            offset += size
        self._packed = Tensor.__new__(Tensor)
        self._packed.data = self._flat
        self._packed.requires_grad = True
        self._packed.grad = self._flat_grad
        self.state = init_adam([self._packed], lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        if _fused_update is not None:
            self.state.t += 1
            _fused_update(
                self._flat, self._flat_grad, self.state.m[0], self.state.v[0],
                self.state.beta1, self.state.beta2, self.state.lr, self.state.eps,
                1.0 - self.state.beta1 ** self.state.t,
                1.0 - self.state.beta2 ** self.state.t,
            )
        else:  # pragma: no cover
            adam_step([self._packed], [self._flat_grad], self.state)

    def zero_grad(self) -> None:
        self._flat_grad.fill(0.0)
