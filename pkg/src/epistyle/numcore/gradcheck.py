"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def grad_check(fn, inputs, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of a scalar function against central
    differences; returns the max elementwise relative error.

    `fn` takes len(inputs) Tensors and returns a scalar Tensor. Inputs are
    promoted to float64 so the finite differences stay meaningful at eps=1e-5.
    """
    if isinstance(inputs, (Tensor, np.ndarray)):
        inputs = [inputs]
    arrays = [
        (t.data if isinstance(t, Tensor) else np.asarray(t)).astype(np.float64)
        for t in inputs
    ]

    def run(arrs) -> tuple[float, list[Tensor]]:
        ts = [Tensor(a.copy(), requires_grad=True) for a in arrs]
        out = fn(*ts)
        val = float(out.data)
        if not np.isfinite(val):
            raise FloatingPointError(f"grad_check: non-finite output {val}")
        return val, ts, out

    _, leaves, out = run(arrays)
    out.backward()
    analytic = [
        np.zeros_like(a) if t.grad is None else t.grad.astype(np.float64)
        for a, t in zip(arrays, leaves)
    ]

    max_err = 0.0
    for i, base in enumerate(arrays):
        flat = base.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp, _, _ = run(arrays)
            flat[j] = orig - eps
            fm, _, _ = run(arrays)
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[i].ravel()[j]
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise FloatingPointError("grad_check: non-finite gradient entry")
            denom = max(abs(a), abs(numeric), 1e-8)
            max_err = max(max_err, abs(a - numeric) / denom)
    return max_err
