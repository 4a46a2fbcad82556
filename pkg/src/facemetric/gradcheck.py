"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .tensor import Tensor, backward


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Largest ``|analytic - numeric| / max(1, |analytic|)`` over checked coordinates.

    ``f`` is called as ``f(x)`` and must return a scalar tensor.  ``x`` may be
    one tensor or a list of them; each is perturbed in place and restored.
    With ``max_coords`` set, at most that many coordinates per tensor are
    sampled (without replacement) instead of checking all of them.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    tensors = [x] if isinstance(x, Tensor) else list(x)
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    backward(f(x))
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        gflat = ga.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = f(x).item()
            flat[i] = orig - eps
            down = f(x).item()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            worst = max(worst, abs(gflat[i] - numeric) / max(1.0, abs(gflat[i])))
    for t in tensors:
        t.grad = None
    return worst
