"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NonDeterministicError
from .tensor import Tensor


def finite_difference_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    scales: float | Sequence[float] = 1.0,
) -> float:
    """Worst relative discrepancy between tape and numeric gradients.

    ``fn`` must rebuild the graph on every call and return a scalar tensor.
    The numeric gradient of each parameter is multiplied by its entry in
    ``scales`` before comparison, which lets a caller state that the tape
    gradient is expected to be, e.g., negated by a gradient reversal.
    Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if np.isscalar(scales):
        scales = [float(scales)] * len(params)

    for p in params:
        p.grad = None
    out = fn()
    base = float(out.data)
    if float(fn().data) != base:
        raise NonDeterministicError("function under check is not deterministic")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a, scale in zip(params, analytic, scales):
        flat = p.data.reshape(-1)
        a = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = float(fn().data)
            flat[i] = orig - eps
            minus = float(fn().data)
            flat[i] = orig
            numeric = scale * (plus - minus) / (2 * eps)
            denom = max(abs(a[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a[i] - numeric) / denom)
    for p in params:
        p.grad = None
    return worst
