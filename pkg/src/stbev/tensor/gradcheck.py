from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import Tensor, backward, no_grad

# Relative error denominator floor, so coordinates whose true gradient is zero
# are judged on absolute error instead of dividing round-off by round-off.
REL_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    worst: tuple[int, int] | None  # (param position, flat index)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)


def finite_diff_check(f: Callable[[], Tensor], params: Tensor | Sequence[Tensor],
                      eps: float = 1e-3, tol: float = 1e-4, n_coords: int = 50,
                      seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of ``f()`` with central differences.

    ``f`` must rebuild its graph from the current values of ``params`` on every
    call.  Parameters are promoted to float64 for the duration of the check.
    Up to ``n_coords`` random coordinates per parameter tensor are probed.
    """
    params = [params] if isinstance(params, Tensor) else list(params)
    saved = [(p.data, p.requires_grad, p.grad) for p in params]
    rng = np.random.default_rng(seed)
    worst, max_err, n = None, 0.0, 0
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.requires_grad = True
            p.grad = None
        backward(f())
        analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
        with no_grad():
            for pi, p in enumerate(params):
                size = p.data.size
                coords = rng.choice(size, size=min(n_coords, size), replace=False)
                flat = p.data.reshape(-1)
                for c in coords:
                    orig = flat[c]
                    flat[c] = orig + eps
                    fp = f().item()
                    flat[c] = orig - eps
                    fm = f().item()
                    flat[c] = orig
                    num = (fp - fm) / (2 * eps)
                    err = float(relative_error(analytic[pi].reshape(-1)[c], num))
                    n += 1
                    if err > max_err or worst is None:
                        max_err, worst = max(err, max_err), (pi, int(c))
    finally:
        for p, (d, rg, g) in zip(params, saved):
            p.data, p.requires_grad, p.grad = d, rg, g
    return GradCheckReport(max_err, tol, n, worst)
