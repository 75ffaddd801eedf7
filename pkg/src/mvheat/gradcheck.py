"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, precision

__all__ = ["GradCheckReport", "grad_check"]


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    passed: bool
    message: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.message})" if self.message else ""
        return f"{status}  {self.name:<28s} max_rel_err={self.max_rel_error:.3e}  tol={self.tolerance:.0e}{extra}"


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor] | Tensor,
               tolerance: float = 1e-4, h: float = 1e-5, name: str | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare backprop gradients of ``fn`` with central differences.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element contributes.  The error is the largest absolute deviation
    divided by the largest gradient magnitude, taken over all inputs.
    Runs at 64-bit precision.
    """
    name = name or getattr(fn, "__name__", "op")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    with precision(64):
        leaves = [Tensor(np.asarray(t.data, dtype=np.float64), requires_grad=True) for t in inputs]
        out = fn(*leaves)
        proj = np.random.default_rng(seed).normal(size=out.shape)

        def scalar(*args):
            return float((fn(*args).data * proj).sum())

        loss = (out * Tensor(proj)).sum()
        loss.backward()
        worst = 0.0
        for idx, leaf in enumerate(leaves):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            if not np.all(np.isfinite(analytic)):
                return GradCheckReport(name, float("inf"), tolerance, False, "non-finite analytic gradient")
            numeric = np.zeros_like(leaf.data)
            base = [Tensor(l.data.copy()) for l in leaves]
            flat = base[idx].data.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                up = scalar(*base)
                flat[k] = orig - h
                down = scalar(*base)
                flat[k] = orig
                numeric.reshape(-1)[k] = (up - down) / (2 * h)
            if not np.all(np.isfinite(numeric)):
                return GradCheckReport(name, float("inf"), tolerance, False, "non-finite numeric gradient")
            worst = max(worst, _rel_error(analytic, numeric))
    return GradCheckReport(name, worst, tolerance, worst < tolerance)
