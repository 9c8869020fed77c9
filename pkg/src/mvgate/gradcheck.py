"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward


class NonDeterministicForward(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    per_param: dict = field(default_factory=dict)

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_err <= tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(forward: Callable[[], Tensor], params: Mapping[str, Tensor],
               step: float = 1e-5) -> GradCheckReport:
    """Compare backprop gradients against central differences.

    ``forward`` is a zero-argument closure that rebuilds the graph from the
    tensors in ``params`` and returns a scalar loss. Parameters with
    ``requires_grad=False`` are skipped. All tensors should be float64;
    the step is too small for float32 round-off.
    """
    first = forward()
    second = forward()
    if first.data.tobytes() != second.data.tobytes():
        raise NonDeterministicForward(
            f"forward returned {first.item()!r} then {second.item()!r}; disable dropout/sampling")

    live = {name: p for name, p in params.items() if p.requires_grad}
    for p in live.values():
        p.grad = None
    backward(second, leaves=list(live.values()))

    per_param = {}
    worst, worst_name = 0.0, ""
    for name, p in live.items():
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = forward().item()
            flat[i] = orig - step
            down = forward().item()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * step)
        err = float(relative_error(analytic, numeric).max()) if numeric.size else 0.0
        per_param[name] = err
        if err >= worst:
            worst, worst_name = err, name
    return GradCheckReport(max_rel_err=worst, worst_param=worst_name, per_param=per_param)
