"""Time encodings: Time2Vec for visit times, functional encoding for edge indices."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore


@dataclass
class Time2VecParams:
    omega: Tensor  # (d_linear + d_periodic,)
    phi: Tensor
    d_linear: int

    def __post_init__(self):
        if self.omega.shape != self.phi.shape or self.omega.ndim != 1 or self.omega.shape[0] < 1:
            raise ValueError("omega and phi must be matching non-empty vectors")
        if not 0 <= self.d_linear <= self.omega.shape[0]:
            raise ValueError("d_linear out of range")

    @property
    def dim(self) -> int:
        return self.omega.shape[0]

    @property
    def d_periodic(self) -> int:
        return self.dim - self.d_linear

    @classmethod
    def create(cls, store: ParamStore, prefix: str, dim: int, rng: np.random.Generator, linear_fraction: float = 0.5):
        d_linear = int(round(dim * linear_fraction))
        omega = store.add(f"{prefix}.omega", rng.uniform(-1.0, 1.0, dim) * math.pi)
        phi = store.add(f"{prefix}.phi", rng.uniform(-math.pi, math.pi, dim))
        return cls(omega, phi, d_linear)


def _column(t) -> Tensor:
    arr = t if isinstance(t, Tensor) else Tensor(np.atleast_1d(np.asarray(t, dtype=np.float64)))
    return arr.reshape(-1, 1)


def time2vec(t, params: Time2VecParams) -> Tensor:
    """Rows ``[w_i t + p_i]`` for the linear block, ``sin(w_i t + p_i)`` after it."""
    col = _column(t)
    if col.dtype != params.omega.dtype:
        col = Tensor(col.data.astype(params.omega.dtype))
    z = col * params.omega.reshape(1, -1) + params.phi.reshape(1, -1)
    if params.d_linear == params.dim:
        return z
    periodic = ad.sin(z[:, params.d_linear :])
    if params.d_linear == 0:
        return periodic
    return ad.concat([z[:, : params.d_linear], periodic], axis=1)


@dataclass
class FunctionalTimeEncoderParams:
    omega: Tensor  # (d,)
    proj_w: Tensor  # (2d, 1)
    proj_b: Tensor  # (1,)

    @property
    def d(self) -> int:
        return self.omega.shape[0]

    @classmethod
    def create(cls, store: ParamStore, prefix: str, d: int, rng: np.random.Generator):
        if d < 1:
            raise ValueError("functional time encoder needs d >= 1")
        # geometric frequency ladder covering visit indices from 1 to ~100
        omega = store.add(f"{prefix}.omega", 1.0 / 10.0 ** np.linspace(0.0, 2.0, d))
        bound = 1.0 / math.sqrt(2 * d)
        w = store.add(f"{prefix}.proj_w", rng.uniform(-bound, bound, (2 * d, 1)))
        b = store.add(f"{prefix}.proj_b", np.ones(1))
        return cls(omega, w, b)


def functional_time_encode(t, params: FunctionalTimeEncoderParams) -> Tensor:
    """``sqrt(1/d) [cos w_1 t, sin w_1 t, ..., cos w_d t, sin w_d t]`` per row."""
    col = _column(t)
    if col.dtype != params.omega.dtype:
        col = Tensor(col.data.astype(params.omega.dtype))
    n, d = col.shape[0], params.d
    z = col * params.omega.reshape(1, -1)
    pairs = ad.concat([ad.cos(z).reshape(n, d, 1), ad.sin(z).reshape(n, d, 1)], axis=2)
    return pairs.reshape(n, 2 * d) * math.sqrt(1.0 / d)


def time_factor(t, params: FunctionalTimeEncoderParams) -> Tensor:
    """Scalar time factor per index: a linear read-out of the functional encoding."""
    enc = functional_time_encode(t, params)
    return (enc @ params.proj_w + params.proj_b).reshape(-1)


def normalize_visit_times(times) -> np.ndarray:
    """Per-patient min-max scaling to [0, 1]; a zero span maps to all zeros."""
    arr = np.asarray(times, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("need at least one visit time")
    span = arr.max() - arr.min()
    if span <= 0:
        return np.zeros_like(arr)
    return np.clip((arr - arr.min()) / span, 0.0, 1.0)
