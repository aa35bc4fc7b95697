"""Central finite-difference checks for the reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int
    failures: list[tuple[tuple[int, ...], float, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def numerical_grad(fn: Callable[[], float], arr: np.ndarray, idx: tuple[int, ...], eps: float) -> float:
    orig = arr[idx]
    arr[idx] = orig + eps
    f_plus = fn()
    arr[idx] = orig - eps
    f_minus = fn()
    arr[idx] = orig
    return (f_plus - f_minus) / (2 * eps)


def _rel_error(analytic: float, numeric: float, abs_floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[tuple[str, Tensor]],
    *,
    eps: float = 1e-4,
    rtol: float = 1e-3,
    abs_floor: float = 1e-6,
    samples: int | None = 20,
    rng: np.random.Generator | None = None,
) -> list[GradCheckResult]:
    """Compare analytic and central-difference gradients.

    ``loss_fn`` must rebuild the scalar loss from scratch on every call. For
    each named tensor, ``samples`` random coordinates are checked (all of them
    when ``samples`` is None or exceeds the tensor size). A coordinate fails
    when ``|a - n| > rtol * max(|a|, |n|, abs_floor)``.
    """
    rng = rng or np.random.default_rng(0)
    for _, t in tensors:
        t.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in tensors}

    def value() -> float:
        with no_grad():
            return float(loss_fn().data)

    results = []
    for name, t in tensors:
        n = t.size
        if samples is None or samples >= n:
            flat = np.arange(n)
        else:
            flat = rng.choice(n, size=samples, replace=False)
        res = GradCheckResult(name, 0.0, len(flat))
        for f in flat:
            idx = np.unravel_index(int(f), t.shape)
            num = numerical_grad(value, t.data, idx, eps)
            ana = float(analytic[name][idx])
            err = _rel_error(ana, num, abs_floor)
            res.max_rel_error = max(res.max_rel_error, err)
            if err > rtol:
                res.failures.append((tuple(int(i) for i in idx), ana, num))
        results.append(res)
    return results
