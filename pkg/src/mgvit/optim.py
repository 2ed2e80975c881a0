"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


class AdamW:
    """AdamW over a named set of parameter tensors.

    Weight decay is applied to the parameter directly (``p *= 1 - lr * wd``)
    before the bias-corrected Adam update; it never enters the moment buffers.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        grads = {k: p.grad for k, p in self.params.items()}
        adamw_update(self, self.params, grads, lr)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            self.m[k] = np.array(arrays[f"m.{k}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"v.{k}"], dtype=np.float64)
        self.step_count = int(step_count)


def adamw_update(state: AdamW, params: Mapping[str, Tensor],
                 grads: Mapping[str, np.ndarray | None], lr: float) -> None:
    """One AdamW step, in place.  A missing gradient counts as zero."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ShapeError(f"gradient for {k!r} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then half-cosine decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))
