"""Central finite-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping

import numpy as np

from .tensor import Tensor, backward, no_grad, precision


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_input: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def grad_check(
    fn: Callable[[Dict[str, Tensor]], Tensor],
    inputs: Mapping[str, np.ndarray],
    tolerance: float = 1e-3,
    eps: float = 1e-6,
    dtype=np.float64,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` receives a dict of tensors (one per entry of ``inputs``) and must
    return a scalar loss. The per-element error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.

    The graph is evaluated in ``dtype`` (float64 by default). In float32 a
    central difference carries rounding noise of roughly
    ``eps32 * |loss| / eps`` which swamps a 1e-4 relative tolerance.
    """
    with precision(dtype):
        tensors = {k: Tensor(np.array(v, dtype=dtype), requires_grad=True) for k, v in inputs.items()}
        loss = fn(tensors)
        backward(loss)
        per_input = {}
        worst = 0.0
        step = dtype(eps)
        for name, t in tensors.items():
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            numeric = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                with no_grad():
                    up = float(fn(tensors).data)
                flat[i] = orig - step
                with no_grad():
                    down = float(fn(tensors).data)
                flat[i] = orig
                numeric.reshape(-1)[i] = (up - down) / (2 * float(step))
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
            err = float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
            per_input[name] = err
            worst = max(worst, err)
    return GradCheckReport(worst, tolerance, per_input)
