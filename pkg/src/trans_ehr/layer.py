"""Temporal heterogeneous message passing: typed attention into visit nodes.

Node table convention: visit rows first, then event rows grouped by type.
Each attention target gets a padded neighbour list (indices into the node
table plus a validity mask); scores are row-softmaxed over valid slots only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, NumericError
from .params import ParamStore

N_NODE_TYPES = 4  # diagnosis, procedure, medication, visit

ACTIVATIONS = {"gelu": ad.gelu, "relu": ad.relu, "tanh": ad.tanh, "identity": ad.identity}


@dataclass
class LayerParams:
    wq: Tensor  # (d, d); head i uses columns i*dh:(i+1)*dh
    wk: Tensor
    wv: Tensor
    w_type: Tensor  # (4, h, dh, dh), one bilinear form per node type and head
    w_out: Tensor  # (h, dh, dh), per-head update map
    b_out: Tensor  # (h, 1, dh)
    n_heads: int
    gamma: float | Tensor = 0.5  # fixed value, or a logit tensor when learnable
    activation: str = "gelu"

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads

    def gate(self):
        return ad.sigmoid(self.gamma) if isinstance(self.gamma, Tensor) else float(self.gamma)

    @classmethod
    def create(
        cls,
        store: ParamStore,
        prefix: str,
        d: int,
        n_heads: int,
        rng: np.random.Generator,
        gamma: float = 0.5,
        learn_gamma: bool = False,
        activation: str = "gelu",
    ) -> "LayerParams":
        if d % n_heads:
            raise DimensionError(f"hidden dim {d} is not divisible by {n_heads} heads")
        if not 0.0 <= gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        dh = d // n_heads
        b = 1.0 / math.sqrt(d)
        bh = 1.0 / math.sqrt(dh)
        eye = np.broadcast_to(np.eye(dh), (N_NODE_TYPES, n_heads, dh, dh))
        g: float | Tensor = gamma
        if learn_gamma:
            g = store.add(f"{prefix}.gamma_logit", np.array([_logit(gamma)]))
        return cls(
            wq=store.add(f"{prefix}.wq", rng.uniform(-b, b, (d, d))),
            wk=store.add(f"{prefix}.wk", rng.uniform(-b, b, (d, d))),
            wv=store.add(f"{prefix}.wv", rng.uniform(-b, b, (d, d))),
            w_type=store.add(f"{prefix}.w_type", eye.copy()),
            w_out=store.add(f"{prefix}.w_out", rng.uniform(-bh, bh, (n_heads, dh, dh))),
            b_out=store.add(f"{prefix}.b_out", np.zeros((n_heads, 1, dh))),
            n_heads=n_heads,
            gamma=g,
            activation=activation,
        )

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str, n_heads: int, gamma: float = 0.5, activation: str = "gelu"):
        g = store[f"{prefix}.gamma_logit"] if f"{prefix}.gamma_logit" in store else gamma
        return cls(
            store[f"{prefix}.wq"], store[f"{prefix}.wk"], store[f"{prefix}.wv"], store[f"{prefix}.w_type"],
            store[f"{prefix}.w_out"], store[f"{prefix}.b_out"], n_heads, g, activation,
        )


def _logit(p: float) -> float:
    p = min(max(p, 1e-6), 1 - 1e-6)
    return math.log(p / (1 - p))


@dataclass
class Neighborhood:
    index: np.ndarray  # (n_targets, M) rows of the node table
    mask: np.ndarray  # (n_targets, M) valid slots
    time: np.ndarray  # (n_targets, M) time-factor slot; -1 means no factor

    @property
    def has_any(self) -> np.ndarray:
        return self.mask.any(axis=1)


@dataclass
class LayerGraph:
    n_visits: int
    type_blocks: Sequence[tuple[int, int, int]]  # (type id, start, stop) over the node table
    visit_nbr: Neighborhood
    event_nbr: Neighborhood | None = None  # only for symmetric event updates


# --------------------------------------------------------------------------
# single-head reference operations


def attention_score(q, k, w, alpha: float, d_head: int) -> float:
    """``alpha * (q W k^T) / sqrt(d_head)`` for one head and one neighbour."""
    q, k, w = (np.asarray(x, dtype=np.float64) for x in (q, k, w))
    return float(alpha * (q @ w @ k) / math.sqrt(d_head))


def aggregate(scores, values):
    """Softmax over neighbour scores, then the weighted sum of value rows.

    An empty neighbourhood yields a zero message (as a plain array).
    """
    if isinstance(scores, Tensor):
        if scores.shape[0] == 0:
            return np.zeros(values.shape[1:])
        w = ad.softmax(scores.reshape(1, -1))
        return (w @ values).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if scores.size == 0:
        return np.zeros(values.shape[1:])
    w = ad.softmax(Tensor(scores.reshape(1, -1))).data
    return (w @ values).reshape(-1)


def update(messages: Tensor, h_prev: Tensor, params: LayerParams, rng=None, dropout: float = 0.0) -> Tensor:
    """Gated update: per head ``g * L(act(m_i)) + (1 - g) * h_prev[i]``, heads concatenated.

    ``messages`` is ``(n, heads, d_head)``; ``h_prev`` is ``(n, d)``.
    """
    n, h, dh = messages.shape
    if h * dh != h_prev.shape[1] or h != params.n_heads:
        raise DimensionError(f"update: messages {messages.shape} vs features {h_prev.shape}")
    m = ad.dropout(messages, dropout, rng)
    act = ACTIVATIONS[params.activation](m)
    mapped = ad.matmul(act.transpose(1, 0, 2), params.w_out) + params.b_out
    mapped = mapped.transpose(1, 0, 2).reshape(n, h * dh)
    g = params.gate()
    return mapped * g + h_prev * (1.0 - g) if isinstance(g, float) else g * mapped + (1.0 - g) * h_prev


# --------------------------------------------------------------------------
# batched layer


def typed_keys(x: Tensor, params: LayerParams, type_blocks) -> Tensor:
    """Per node ``W^{type(node)} k`` for every head, shape ``(N, d)``."""
    n, d = x.shape
    h, dh = params.n_heads, params.d_head
    k = (x @ params.wk).reshape(n, h, dh).transpose(1, 0, 2)
    parts = []
    covered = 0
    for type_id, start, stop in type_blocks:
        if start != covered:
            raise DimensionError("typed_keys: type blocks must tile the node table in order")
        covered = stop
        if stop > start:
            w = params.w_type[type_id].transpose(0, 2, 1)
            parts.append(ad.matmul(k[:, start:stop, :], w))
    if covered != n:
        raise DimensionError(f"typed_keys: blocks cover {covered} of {n} nodes")
    return ad.concat(parts, axis=1).transpose(1, 0, 2).reshape(n, d)


def attend(
    h_target: Tensor,
    keys: Tensor,
    values: Tensor,
    nbr: Neighborhood,
    params: LayerParams,
    alpha: Tensor | None,
) -> tuple[Tensor, Tensor]:
    """Messages ``(n, heads, d_head)`` and attention weights ``(n, heads, M)``."""
    n, m_slots = nbr.index.shape
    h, dh = params.n_heads, params.d_head
    q = (h_target @ params.wq).reshape(n, 1, h, dh)
    kn = ad.take(keys, nbr.index).reshape(n, m_slots, h, dh)
    scores = (q * kn).sum(axis=-1) * (1.0 / math.sqrt(dh))
    if alpha is not None:
        ext = ad.concat([alpha, Tensor(np.ones(1, dtype=alpha.dtype))])
        slot = np.where(nbr.time < 0, alpha.shape[0], nbr.time)
        scores = scores * ad.take(ext, slot).reshape(n, m_slots, 1)
    weights = ad.softmax(scores.transpose(0, 2, 1), mask=nbr.mask[:, None, :])
    vn = ad.take(values, nbr.index).reshape(n, m_slots, h, dh).transpose(0, 2, 1, 3)
    msg = ad.matmul(weights.reshape(n, h, 1, m_slots), vn).reshape(n, h, dh)
    return msg, weights


def _keep_if_no_neighbors(new: Tensor, old: Tensor, has_any: np.ndarray) -> Tensor:
    if has_any.all():
        return new
    keep = has_any.astype(new.dtype)[:, None]
    return new * keep + old * (1.0 - keep)


def layer_forward(
    graph: LayerGraph,
    h_visit: Tensor,
    h_event: Tensor,
    params: LayerParams,
    alpha: Tensor | None = None,
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
    layer_index: int = 0,
    return_weights: bool = False,
):
    """One synchronous layer: every visit reads layer-l features of its neighbours.

    Visits without neighbours keep their features.  Event features pass
    through unchanged unless ``graph.event_nbr`` is set.
    """
    if h_visit.shape[0] != graph.n_visits:
        raise DimensionError(f"layer_forward: {h_visit.shape[0]} visit rows for {graph.n_visits} visits")
    if h_visit.shape[1] != params.d or h_event.shape[1] != params.d:
        raise DimensionError(f"layer_forward: feature width must be {params.d}")
    x = ad.concat([h_visit, h_event], axis=0)
    keys = typed_keys(x, params, graph.type_blocks)
    values = x @ params.wv

    msg, weights = attend(h_visit, keys, values, graph.visit_nbr, params, alpha)
    new_visit = update(msg, h_visit, params, rng, dropout)
    new_visit = _keep_if_no_neighbors(new_visit, h_visit, graph.visit_nbr.has_any)

    new_event = h_event
    if graph.event_nbr is not None:
        emsg, _ = attend(h_event, keys, values, graph.event_nbr, params, alpha)
        new_event = _keep_if_no_neighbors(update(emsg, h_event, params, rng, dropout), h_event, graph.event_nbr.has_any)

    if not (np.all(np.isfinite(new_visit.data)) and np.all(np.isfinite(new_event.data))):
        raise NumericError(f"non-finite features after layer {layer_index}")
    if return_weights:
        return new_visit, new_event, weights
    return new_visit, new_event
