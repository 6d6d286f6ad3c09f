"""Central finite-difference verification of autodiff gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor
from .errors import GradCheckError
from .params import ParamStore


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.max_rel_error.values())

    @property
    def failures(self) -> list[str]:
        return [n for n, err in self.max_rel_error.items() if not err < self.tolerance]

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)``; the floor keeps near-zero gradients
    from turning rounding noise into huge ratios."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def finite_difference_check(
    fn: Callable[[ParamStore], Tensor],
    params: ParamStore,
    tolerance: float = 1e-6,
    h: float = 1e-5,
    names: list[str] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare ``params.gradients(fn(params))`` against central differences.

    ``max_entries`` caps how many coordinates per parameter are probed (chosen
    at random with ``seed``); ``None`` probes all of them.
    """
    first = fn(params)
    second = fn(params)
    if not np.array_equal(first.data, second.data):
        raise GradCheckError("function is not deterministic: two evaluations differ")
    analytic = params.gradients(first)
    rng = np.random.default_rng(seed)

    errors: dict[str, float] = {}
    for name in names or params.names():
        p = params[name]
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn(params).data)
            flat[i] = orig - h
            down = float(fn(params).data)
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        got = analytic[name].reshape(-1)[idx]
        errors[name] = float(relative_error(got, numeric, floor).max()) if idx.size else 0.0
    return GradCheckReport(errors, tolerance)
