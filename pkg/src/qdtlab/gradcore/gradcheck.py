from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, Tensor, backward


def grad_check(f: Callable[..., Tensor], point, step: float = 1e-5) -> float:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    ``point`` is one Tensor/array or a sequence of them; ``f`` receives them as
    positional arguments.  Returns max |analytic - numeric| / max(1, |analytic|)
    over every coordinate of every input.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(point, (Tensor, np.ndarray)) or np.isscalar(point):
        points = [point]
    else:
        points = list(point)
    leaves = [Tensor(getattr(p, "data", p), requires_grad=True) for p in points]

    out = f(*leaves)
    if out.size != 1 or out.ndim != 0:
        raise ContractError(f"grad_check: f must return a scalar, got shape {out.shape}")
    backward(out)
    analytic = [leaf.grad.copy() for leaf in leaves]

    def evaluate() -> float:
        return float(f(*[Tensor(leaf.data) for leaf in leaves]).data)

    worst = 0.0
    for leaf, ga in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = evaluate()
            flat[i] = orig - step
            fm = evaluate()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            err = abs(gflat[i] - num) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst


def numeric_grad(f: Callable[..., Tensor], points: Sequence[np.ndarray], step: float = 1e-5):
    """Central-difference gradient of scalar ``f`` for each input array."""
    arrays = [np.array(p, dtype=np.float64) for p in points]
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(*[Tensor(a) for a in arrays]).data)
            flat[i] = orig - step
            fm = float(f(*[Tensor(a) for a in arrays]).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads
