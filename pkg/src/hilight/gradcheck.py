"""Central-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_input: int
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err <= self.tolerance)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|analytic - numeric| relative to the numeric estimate (floored near zero)."""
    return abs(analytic - numeric) / max(abs(numeric), floor)


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    coordinates: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f()`` against central differences.

    ``f`` closes over ``inputs``; their ``.data`` is perturbed in place and
    restored. With ``coordinates`` set, that many coordinates are drawn at
    random across all inputs instead of checking every one.
    """
    for t in inputs:
        t.grad = None
    loss = f()
    if loss.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {loss.shape}")
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    sites = [(i, idx) for i, t in enumerate(inputs) for idx in np.ndindex(t.shape)]
    if coordinates is not None and coordinates < len(sites):
        rng = rng or np.random.default_rng(0)
        chosen = rng.choice(len(sites), size=coordinates, replace=False)
        sites = [sites[k] for k in sorted(chosen)]

    worst = (-1.0, -1, (), 0.0, 0.0)
    for i, idx in sites:
        data = inputs[i].data
        original = data[idx]
        data[idx] = original + step
        up = float(f().data)
        data[idx] = original - step
        down = float(f().data)
        data[idx] = original
        numeric = (up - down) / (2 * step)
        a = float(analytic[i][idx])
        err = relative_error(a, numeric, floor)
        if err > worst[0]:
            worst = (err, i, idx, a, numeric)
    return GradCheckReport(
        max_rel_err=worst[0],
        worst_input=worst[1],
        worst_index=tuple(int(v) for v in worst[2]),
        analytic=worst[3],
        numeric=worst[4],
        checked=len(sites),
        tolerance=tolerance,
    )
