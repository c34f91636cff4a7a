from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from ..errors import ContractError, NumericError
from .core import Tensor, no_grad


def gradcheck(f: Callable[..., Tensor], inputs: Union[Tensor, Sequence[Tensor]], eps: float = 1e-6,
              max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` with central differences.

    Returns ``max |analytic - numeric| / max(1, |numeric|)`` over the checked
    coordinates.  With ``max_coords`` only a seeded random subset of each
    input's coordinates is perturbed.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ContractError("gradcheck requires f64 inputs")
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ContractError(f"gradcheck needs a scalar function, got shape {out.shape}")
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                hi = f(*inputs).item()
                flat[i] = orig - eps
                lo = f(*inputs).item()
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            a = analytic.reshape(-1)[i]
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise NumericError(f"non-finite gradient at coordinate {i}")
            worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst
