"""Adam with bias correction and a reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Per-parameter moment buffers and step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            m=np.zeros_like(param), v=np.zeros_like(param),
            beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(params: dict, grads: dict, state: dict[str, AdamState], lr: float) -> dict:
    """One Adam update over named parameter arrays, in place.

    Only parameters present in `grads` are touched; each parameter keeps its
    own step counter so sparsely-updated parameters stay bias-corrected.
    """
    for name, grad in grads.items():
        if grad is None:
            continue
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
        p = params[name]
        st = state[name]
        st.step += 1
        st.m = st.beta1 * st.m + (1.0 - st.beta1) * grad
        st.v = st.beta2 * st.v + (1.0 - st.beta2) * grad * grad
        mhat = st.m / (1.0 - st.beta1**st.step)
        vhat = st.v / (1.0 - st.beta2**st.step)
        p -= (lr * mhat / (np.sqrt(vhat) + st.eps)).astype(p.dtype)
    return params


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for name, g in grads.items():
            if g is not None:
                grads[name] = g * g.dtype.type(factor)
    return norm


@dataclass
class PlateauScheduler:
    """Halve the learning rate after `patience` consecutive non-improving epochs."""

    lr: float
    factor: float = 0.5
    patience: int = 5
    best: float = field(default=float("inf"))
    since_best: int = 0

    def step(self, metric: float) -> float:
        if metric < self.best:
            self.best = metric
            self.since_best = 0
        else:
            self.since_best += 1
            if self.since_best >= self.patience:
                self.lr *= self.factor
                self.since_best = 0
        return self.lr
