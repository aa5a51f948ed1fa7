"""Finite-difference verification of analytic gradients.

Central differences at float64 with per-coordinate step h = eps * (1 + |w|),
sampling at most a fixed number of coordinates per parameter.  The relative
error metric is |analytic - numeric| / max(floor, |analytic| + |numeric|).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .params import Parameter
from .tensor import Tensor, no_grad, leaf_gradients

__all__ = ["finite_difference_check"]

# Denominator floor for coordinates whose true derivative is zero (a
# constant shift of attention keys, say, cancels inside softmax).  There
# the comparison sees pure numerical noise: central differences quantize
# to ulp(loss) / 2h, around 1e-10 at the default step, and the reverse
# sweep's accumulated roundoff is smaller still.  With the usual 1e-5
# gate this floor admits only absolute disagreements below 1e-9, far
# under any real gradient defect, while leaving coordinates of ordinary
# magnitude to the plain relative test.
_FLOOR = 1e-4


def finite_difference_check(
    fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-6,
    max_coords: int = 64,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and numeric gradients.

    ``fn`` evaluates the scalar loss from the current parameter values and
    must be deterministic.  Parameters must be float64; float32 has too
    little headroom for a 1e-5 tolerance.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng or np.random.default_rng(0)
    for p in params:
        if p.value.dtype != np.float64:
            raise TypeError(f"finite_difference_check requires float64 parameters, {p.name} is {p.value.dtype}")

    loss = fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    grads = leaf_gradients(loss)

    worst = 0.0
    for p in params:
        analytic = grads.get(id(p.value))
        if analytic is None:
            analytic = np.zeros_like(p.value.data)
        flat = p.value.data.reshape(-1)
        n = flat.size
        if n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = np.arange(n)
        aflat = analytic.reshape(-1)
        for idx in coords:
            w = flat[idx]
            h = eps * (1.0 + abs(w))
            flat[idx] = w + h
            with no_grad():
                up = float(fn().data)
            flat[idx] = w - h
            with no_grad():
                down = float(fn().data)
            flat[idx] = w
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("loss is not finite during differencing")
            numeric = (up - down) / (2.0 * h)
            a = float(aflat[idx])
            err = abs(a - numeric) / max(_FLOOR, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst
