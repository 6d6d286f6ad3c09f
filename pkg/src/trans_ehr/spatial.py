"""Laplacian positional and random-walk structural encodings over meta-paths."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ehr import KINDS
from .errors import DimensionError
from .graph import DEFAULT_METAPATHS, MetaPathAdjacency, PatientGraph, metapath_adjacency

EIG_TOL = 1e-8


@dataclass(frozen=True)
class SpatialEncoding:
    pe: np.ndarray  # (n_events, k)
    se: np.ndarray  # (n_events, k)

    @property
    def k(self) -> int:
        return self.pe.shape[1]

    def features(self) -> np.ndarray:
        return np.concatenate([self.pe, self.se], axis=1)


def _matrix(adjacency) -> np.ndarray:
    a = adjacency.matrix if isinstance(adjacency, MetaPathAdjacency) else adjacency
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"adjacency must be square, got {a.shape}")
    if (a < 0).any():
        raise ValueError("adjacency must be non-negative")
    return a


def _sign_fix(vecs: np.ndarray) -> np.ndarray:
    out = vecs.copy()
    for j in range(out.shape[1]):
        nz = np.flatnonzero(np.abs(out[:, j]) > 1e-10)
        if nz.size and out[nz[0], j] < 0:
            out[:, j] *= -1
    return out


def normalized_laplacian(a: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2``; rows of isolated nodes stay identity rows."""
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    inv_sqrt[deg > 0] = deg[deg > 0] ** -0.5
    return np.eye(a.shape[0]) - inv_sqrt[:, None] * a * inv_sqrt[None, :]


def laplacian_eigenpairs(adjacency, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of the k smallest nonzero eigenvalues, sign-fixed.

    Isolated nodes are excluded from the decomposition (their pe is zero), so
    only structure carried by edges contributes.  Returns ``(values, vectors)``
    with vectors as columns over all nodes; fewer than ``k`` columns when the
    spectrum runs out.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    a = _matrix(adjacency)
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    active = np.flatnonzero(a.sum(axis=1) > 0)
    if active.size == 0:
        return np.zeros(0), np.zeros((n, 0))
    sub = normalized_laplacian(a[np.ix_(active, active)])
    vals, vecs = np.linalg.eigh(sub)
    keep = np.flatnonzero(vals > EIG_TOL)[:k]
    full = np.zeros((n, keep.size))
    full[active] = vecs[:, keep]
    return vals[keep], _sign_fix(full)


def laplacian_pe(adjacency, k: int) -> np.ndarray:
    """Per-node positional encoding ``(n, k)``, zero-padded."""
    n = _matrix(adjacency).shape[0]
    _, vecs = laplacian_eigenpairs(adjacency, k)
    out = np.zeros((n, k))
    out[:, : vecs.shape[1]] = vecs
    return out


def rw_structural_encoding(adjacency, k: int) -> np.ndarray:
    """Return probabilities ``diag(W^i)`` for ``i = 1..k`` with ``W = D^-1 A``."""
    if k <= 0:
        raise ValueError("k must be positive")
    a = _matrix(adjacency)
    deg = a.sum(axis=1)
    inv = np.zeros_like(deg)
    inv[deg > 0] = 1.0 / deg[deg > 0]
    w = inv[:, None] * a
    out = np.zeros((a.shape[0], k))
    power = np.eye(a.shape[0])
    for i in range(k):
        power = power @ w
        out[:, i] = np.diag(power)
    return np.clip(out, 0.0, 1.0)


def spatial_encodings(
    graph: PatientGraph, k: int, metapaths: Mapping | None = None
) -> SpatialEncoding:
    """pe/se for every event node, one meta-path per event kind.

    Nodes whose kind has no meta-path (or no partner nodes) get zeros.
    """
    metapaths = DEFAULT_METAPATHS if metapaths is None else metapaths
    pe = np.zeros((graph.n_events, k))
    se = np.zeros((graph.n_events, k))
    for kind in KINDS:
        spec = metapaths.get(kind)
        if spec is None:
            continue
        adj = metapath_adjacency(graph, spec)
        if not adj.node_ids:
            continue
        rows = list(adj.node_ids)
        pe[rows] = laplacian_pe(adj, k)
        se[rows] = rw_structural_encoding(adj, k)
    return SpatialEncoding(pe, se)


def attach_spatial_encodings(graph: PatientGraph, encodings: SpatialEncoding | None, base_features):
    """``base ⊕ pe ⊕ se`` per event node; ``encodings=None`` leaves base alone."""
    if encodings is None:
        return base_features
    n = graph.n_events
    if encodings.pe.shape[0] != n or encodings.se.shape[0] != n or base_features.shape[0] != n:
        raise DimensionError(
            f"attach_spatial_encodings: {n} event nodes, base {base_features.shape}, "
            f"pe {encodings.pe.shape}, se {encodings.se.shape}"
        )
    if isinstance(base_features, Tensor):
        extra = Tensor(encodings.features().astype(base_features.dtype))
        return ad.concat([base_features, extra], axis=1)
    return np.concatenate([np.asarray(base_features), encodings.features()], axis=1)
