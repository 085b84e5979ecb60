"""Optimizers with explicit, serializable state."""

from __future__ import annotations

import math
from typing import Dict, List, Sequence

import numpy as np

from .autodiff import Tensor


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params: List[Tensor] = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def load_state_arrays(self, state: Dict[str, np.ndarray]) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """Heavy-ball SGD with coupled L2 weight decay (``g + wd * p``)."""

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, buf in zip(self.params, self.buffers):
            if p.grad is None:
                continue
            d = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            if self.momentum:
                buf *= self.momentum
                buf += d
                d = buf
            p.data = (p.data - self.lr * d).astype(p.data.dtype)

    def state_arrays(self):
        return {f"m{i}": b for i, b in enumerate(self.buffers)}

    def load_state_arrays(self, state):
        self.buffers = [np.array(state[f"m{i}"]) for i in range(len(self.params))]


class Adam(Optimizer):
    """Adam with coupled L2 weight decay, as used for architecture weights."""

    def __init__(self, params, lr: float, betas=(0.5, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - self.lr * update).astype(p.data.dtype)

    def state_arrays(self):
        state = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            state[f"m{i}"], state[f"v{i}"] = m, v
        return state

    def load_state_arrays(self, state):
        self.t = int(state["t"])
        self.m = [np.array(state[f"m{i}"]) for i in range(len(self.params))]
        self.v = [np.array(state[f"v{i}"]) for i in range(len(self.params))]


def cosine_lr(base: float, epoch: int, total: int, minimum: float = 0.0) -> float:
    if total <= 0:
        return base
    return minimum + 0.5 * (base - minimum) * (1 + math.cos(math.pi * epoch / total))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.float32(scale)
    return total
