"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NumericsError, ShapeError
from .tensor import Tensor, backward, no_grad, strict


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise ShapeError(f"gradient_check needs a scalar function, got shape {value.shape}")
    v = float(value.data.reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericsError("non-finite function value during gradient check")
    return v


def gradient_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-4,
    max_components: int | None = None,
    seed: int = 0,
) -> float:
    """Compare the tape gradient of scalar ``f`` with central differences.

    ``f`` is called as ``f(*xs)``; the tensors in ``xs`` are perturbed in place,
    so ``f`` may also close over them instead of using its arguments.  Returns
    ``max |analytic - numeric| / max(1, |analytic|)`` over the checked
    components.  ``max_components`` subsamples each tensor (randomly, seeded)
    to bound the cost on large parameter sets.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad) for t in xs]
    rng = np.random.default_rng(seed)
    try:
        for t in xs:
            t.requires_grad = True
            t.grad = None
            t.data = np.ascontiguousarray(t.data)  # so the flat view below aliases it
        with strict():
            _scalar(out := f(*xs))
            backward(out)
        worst = 0.0
        for t in xs:
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            if not np.all(np.isfinite(analytic)):
                raise NumericsError("non-finite analytic gradient")
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_components is not None and flat.size > max_components:
                idx = np.sort(rng.choice(flat.size, max_components, replace=False))
            ga = analytic.reshape(-1)
            for i in idx:
                orig = flat[i]
                with no_grad(), strict():
                    flat[i] = orig + step
                    fp = _scalar(f(*xs))
                    flat[i] = orig - step
                    fm = _scalar(f(*xs))
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * step)
                err = abs(ga[i] - numeric) / max(1.0, abs(ga[i]))
                worst = max(worst, err)
        return worst
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = g
