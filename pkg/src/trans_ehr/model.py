"""TRANS end to end: initial features, stacked layers, last-visit predictor."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ehr import KINDS, CodeKind, CodeVocabulary, Sample
from .errors import ConfigError, DimensionError
from .graph import TYPE_ID, PatientGraph, build_patient_graph
from .layer import LayerGraph, LayerParams, Neighborhood, layer_forward
from .params import ParamStore
from .spatial import SpatialEncoding, spatial_encodings
from .temporal import (
    FunctionalTimeEncoderParams,
    Time2VecParams,
    normalize_visit_times,
    time2vec,
    time_factor,
)

SEARCH_SPACE = {
    "lr": (1e-2, 5e-3, 1e-3),
    "batch_size": (64, 128, 256),
    "n_heads": (1, 2, 4, 6, 8),
    "n_layers": (1, 2, 4, 6),
    "hidden_dim": (64, 128, 256),
    "se_dim": (4, 8, 12, 16),
    "te_dim": (8, 16, 32),
}
DROPOUT_RANGE = (0.0, 0.6)


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.1
    se_dim: int = 8
    te_dim: int = 16
    use_se: bool = True
    use_te: bool = True
    use_seq: bool = True
    gamma: float = 0.5
    learn_gamma: bool = False
    activation: str = "gelu"
    vv_time_factor: bool = False
    symmetric_event_updates: bool = False
    n_labels: int = 0
    seed: int = 0
    # optimisation
    lr: float = 5e-3
    batch_size: int = 64
    weight_decay: float = 0.01
    epochs: int = 30
    patience: int = 5
    eval_k: int = 10
    dtype: str = "float32"
    grid_mode: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.hidden_dim <= 0 or self.n_layers < 0 or self.n_heads <= 0:
            raise ConfigError("hidden_dim, n_heads must be positive and n_layers non-negative")
        if self.hidden_dim % self.n_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} is not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.use_se and self.se_dim <= 0:
            raise ConfigError("se_dim must be positive when spatial encoding is on")
        if (self.use_te or self.use_seq) and self.te_dim < 2:
            raise ConfigError("te_dim must be at least 2")
        if self.activation not in ("gelu", "relu", "tanh", "identity"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.grid_mode:
            for key, allowed in SEARCH_SPACE.items():
                if getattr(self, key) not in allowed:
                    raise ConfigError(f"{key}={getattr(self, key)} outside search space {allowed}")
            if not DROPOUT_RANGE[0] <= self.dropout <= DROPOUT_RANGE[1]:
                raise ConfigError("dropout outside search space [0, 0.6]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig.from_dict({**self.to_dict(), **changes})


# --------------------------------------------------------------------------
# per-sample preprocessing and batching


@dataclass
class PreparedSample:
    sample: Sample
    graph: PatientGraph
    event_ids: np.ndarray  # embedding row per event node
    event_types: np.ndarray  # node-type id per event node
    spatial: SpatialEncoding | None
    norm_times: np.ndarray


@dataclass
class Batch:
    size: int
    n_visits: int
    n_events: int
    visit_index: np.ndarray  # index_t per visit row
    visit_roles: np.ndarray  # 0 history visit, 1 current visit
    norm_times: np.ndarray
    last_rows: np.ndarray  # (B,) final visit row per sample
    event_ids: np.ndarray
    event_spatial: np.ndarray | None
    event_origin: np.ndarray  # (E, 2) sample position, local event id
    incidence: np.ndarray  # (V, E) visit contains event
    seq_mask: np.ndarray  # (V, V) same sample and not in the future
    layer_graph: LayerGraph
    max_t: int
    targets: np.ndarray  # (B, C)
    labels: list[tuple[int, ...]]

    def sample_events(self, pos: int) -> np.ndarray:
        """Batch event rows of sample ``pos`` in graph order."""
        rows = np.flatnonzero(self.event_origin[:, 0] == pos)
        return rows[np.argsort(self.event_origin[rows, 1], kind="stable")]


def _neighborhood(lists: list[list[tuple[int, int]]]) -> Neighborhood:
    width = max(1, max((len(x) for x in lists), default=0))
    n = len(lists)
    index = np.zeros((n, width), dtype=np.intp)
    mask = np.zeros((n, width), dtype=bool)
    time = np.full((n, width), -1, dtype=np.intp)
    for i, entries in enumerate(lists):
        for j, (node, t) in enumerate(entries):
            index[i, j] = node
            mask[i, j] = True
            time[i, j] = t
    return Neighborhood(index, mask, time)


class TransModel:
    """Parameters plus the pure functions that turn samples into logits."""

    def __init__(self, config: ModelConfig, vocab: CodeVocabulary, params: ParamStore | None = None):
        if config.n_labels == 0:
            config = config.replace(n_labels=vocab.n_labels)
        if config.n_labels != vocab.n_labels:
            raise ConfigError(f"config has {config.n_labels} labels, vocabulary {vocab.n_labels}")
        self.config = config
        self.vocab = vocab
        self.dtype = np.dtype(config.dtype)
        self.offsets = {}
        start = 0
        for k in KINDS:
            self.offsets[k] = start
            start += vocab.size(k) + 1  # trailing UNK row per kind
        self.n_code_rows = start
        self.unknown_codes: Counter = Counter()
        self.params = params if params is not None else self.init_params()
        if self.params.dtype != self.dtype:
            self.params = self.params.astype(self.dtype)

    # ---- parameters

    @property
    def event_in_dim(self) -> int:
        c = self.config
        return c.hidden_dim + (2 * c.se_dim if c.use_se else 0)

    @property
    def visit_in_dim(self) -> int:
        c = self.config
        return c.hidden_dim + (c.te_dim if c.use_te else 0) + (c.te_dim if c.use_seq else 0)

    def init_params(self) -> ParamStore:
        c = self.config
        rng = np.random.default_rng(c.seed)
        store = ParamStore(self.dtype)
        d = c.hidden_dim

        def linear(name, fan_in, fan_out, bias=True):
            b = 1.0 / math.sqrt(fan_in)
            store.add(f"{name}.w", rng.uniform(-b, b, (fan_in, fan_out)))
            if bias:
                store.add(f"{name}.b", np.zeros(fan_out))

        # unit-variance embeddings: smaller tables stall training at the label prior
        store.add("emb.code", rng.standard_normal((self.n_code_rows, d)))
        store.add("emb.role", rng.standard_normal((2, d)))
        linear("event_proj", self.event_in_dim, d)
        linear("visit_proj", self.visit_in_dim, d)
        if c.use_te:
            Time2VecParams.create(store, "t2v", c.te_dim, rng)
            FunctionalTimeEncoderParams.create(store, "fte", c.te_dim // 2, rng)
        if c.use_seq:
            for name in ("q", "k", "v"):
                linear(f"seq.{name}", d, c.te_dim, bias=False)
        for i in range(c.n_layers):
            LayerParams.create(store, f"layer{i}", d, c.n_heads, rng, c.gamma, c.learn_gamma, c.activation)
        linear("pred.h", d, d)
        linear("pred.out", d, c.n_labels)
        return store

    def layer_params(self, store: ParamStore) -> list[LayerParams]:
        c = self.config
        return [
            LayerParams.from_store(store, f"layer{i}", c.n_heads, c.gamma, c.activation) for i in range(c.n_layers)
        ]

    # ---- preprocessing

    def code_row(self, kind: CodeKind, code: str) -> int:
        idx = self.vocab.lookup(kind, code)
        if idx < 0:
            self.unknown_codes[kind.value] += 1
            idx = self.vocab.size(kind)
        return self.offsets[kind] + idx

    def prepare(self, sample: Sample) -> PreparedSample:
        graph = build_patient_graph(sample)
        ids = np.array([self.code_row(c.kind, c.code) for c in graph.event_nodes], dtype=np.intp)
        types = np.array([TYPE_ID[c.kind] for c in graph.event_nodes], dtype=np.intp)
        spatial = spatial_encodings(graph, self.config.se_dim) if self.config.use_se else None
        times = normalize_visit_times([t for _, t in graph.visit_nodes])
        return PreparedSample(sample, graph, ids, types, spatial, times)

    def prepare_all(self, samples: Sequence[Sample]) -> list[PreparedSample]:
        return [self.prepare(s) for s in samples]

    def collate(self, items: Sequence[PreparedSample]) -> Batch:
        c = self.config
        visit_start = np.cumsum([0] + [p.graph.n_visits for p in items])
        n_visits = int(visit_start[-1])

        # event rows grouped by node type, then by sample
        event_row: list[dict[int, int]] = [dict() for _ in items]
        origin, ids, spatial_rows = [], [], []
        blocks = [(TYPE_ID["visit"], 0, n_visits)]
        row = 0
        for kind in KINDS:
            tid = TYPE_ID[kind]
            start = row
            for pos, p in enumerate(items):
                for e in np.flatnonzero(p.event_types == tid):
                    event_row[pos][int(e)] = row
                    origin.append((pos, int(e)))
                    ids.append(p.event_ids[e])
                    if p.spatial is not None:
                        spatial_rows.append(np.concatenate([p.spatial.pe[e], p.spatial.se[e]]))
                    row += 1
            blocks.append((tid, n_visits + start, n_visits + row))
        n_events = row

        visit_nbrs: list[list[tuple[int, int]]] = [[] for _ in range(n_visits)]
        event_nbrs: list[list[tuple[int, int]]] = [[] for _ in range(n_events)]
        incidence = np.zeros((n_visits, n_events), dtype=self.dtype)
        visit_index = np.zeros(n_visits, dtype=np.intp)
        roles = np.zeros(n_visits, dtype=np.intp)
        times = np.zeros(n_visits, dtype=self.dtype)
        seq_mask = np.zeros((n_visits, n_visits), dtype=bool)
        last_rows = np.zeros(len(items), dtype=np.intp)
        for pos, p in enumerate(items):
            v0 = int(visit_start[pos])
            T = p.graph.n_visits
            for vid, (t, _) in enumerate(p.graph.visit_nodes):
                visit_index[v0 + vid] = t
            roles[v0 + T - 1] = 1
            times[v0 : v0 + T] = p.norm_times
            seq_mask[v0 : v0 + T, v0 : v0 + T] = np.tril(np.ones((T, T), dtype=bool))
            last_rows[pos] = v0 + T - 1
            for e, vid, t in p.graph.ev_edges:
                er = event_row[pos][e]
                visit_nbrs[v0 + vid].append((n_visits + er, t))
                event_nbrs[er].append((v0 + vid, t))
                incidence[v0 + vid, er] = 1.0
            for a, b in p.graph.vv_edges:
                t_edge = p.graph.visit_nodes[a][0] if c.vv_time_factor else -1
                visit_nbrs[v0 + b].append((v0 + a, t_edge))

        layer_graph = LayerGraph(
            n_visits=n_visits,
            type_blocks=blocks,
            visit_nbr=_neighborhood(visit_nbrs),
            event_nbr=_neighborhood(event_nbrs) if c.symmetric_event_updates and n_events else None,
        )
        targets = np.stack([p.sample.target for p in items]).astype(self.dtype)
        return Batch(
            size=len(items),
            n_visits=n_visits,
            n_events=n_events,
            visit_index=visit_index,
            visit_roles=roles,
            norm_times=times,
            last_rows=last_rows,
            event_ids=np.asarray(ids, dtype=np.intp),
            event_spatial=np.asarray(spatial_rows, dtype=self.dtype).reshape(n_events, 2 * c.se_dim) if c.use_se else None,
            event_origin=np.asarray(origin, dtype=np.intp).reshape(n_events, 2),
            incidence=incidence,
            seq_mask=seq_mask,
            layer_graph=layer_graph,
            max_t=int(visit_index.max(initial=0)),
            targets=targets,
            labels=[p.sample.labels for p in items],
        )

    def batch(self, samples: Sequence[Sample]) -> Batch:
        return self.collate(self.prepare_all(samples))

    # ---- forward

    def initial_features(
        self, batch: Batch, params: ParamStore, rng=None, event_mask: Tensor | None = None
    ) -> tuple[Tensor, Tensor]:
        """Project ``embedding ⊕ pe ⊕ se`` (events) and ``role ⊕ T2V ⊕ Seq`` (visits) to d."""
        c = self.config
        p = params
        emb = ad.take(p["emb.code"], batch.event_ids)
        if c.use_se:
            emb_in = ad.concat([emb, Tensor(batch.event_spatial)], axis=1)
        else:
            emb_in = emb
        if emb_in.shape[1] != self.event_in_dim:
            raise DimensionError(f"event features have width {emb_in.shape[1]}, expected {self.event_in_dim}")
        h_event = emb_in @ p["event_proj.w"] + p["event_proj.b"]

        if event_mask is not None:
            if event_mask.shape != (batch.n_events,):
                raise DimensionError(f"event mask shape {event_mask.shape}, expected ({batch.n_events},)")
            col = event_mask.reshape(-1, 1)
            h_event = h_event * col
            emb = emb * col

        blocks = [ad.take(p["emb.role"], batch.visit_roles)]
        if c.use_te:
            t2v = Time2VecParams(p["t2v.omega"], p["t2v.phi"], int(round(c.te_dim * 0.5)))
            blocks.append(time2vec(Tensor(batch.norm_times), t2v))
        if c.use_seq:
            blocks.append(self.sequence_features(batch, emb, p))
        visit_in = ad.concat(blocks, axis=1) if len(blocks) > 1 else blocks[0]
        if visit_in.shape[1] != self.visit_in_dim:
            raise DimensionError(f"visit features have width {visit_in.shape[1]}, expected {self.visit_in_dim}")
        h_visit = visit_in @ p["visit_proj.w"] + p["visit_proj.b"]
        return ad.dropout(h_visit, c.dropout, rng), ad.dropout(h_event, c.dropout, rng)

    def sequence_features(self, batch: Batch, code_emb: Tensor, p: ParamStore) -> Tensor:
        """Causal single-layer self-attention over per-visit summed code embeddings."""
        summary = Tensor(batch.incidence) @ code_emb
        q = summary @ p["seq.q.w"]
        k = summary @ p["seq.k.w"]
        v = summary @ p["seq.v.w"]
        scores = (q @ k.transpose()) * (1.0 / math.sqrt(self.config.te_dim))
        return ad.softmax(scores, mask=batch.seq_mask) @ v

    def time_factors(self, batch: Batch, p: ParamStore) -> Tensor | None:
        if not self.config.use_te:
            return None
        fte = FunctionalTimeEncoderParams(p["fte.omega"], p["fte.proj_w"], p["fte.proj_b"])
        steps = np.arange(batch.max_t + 1, dtype=self.dtype)
        return time_factor(Tensor(steps), fte)

    def encode(
        self, batch: Batch, params: ParamStore | None = None, rng=None, event_mask: Tensor | None = None
    ) -> tuple[Tensor, Tensor]:
        """Visit and event features after the last layer."""
        p = params or self.params
        h_visit, h_event = self.initial_features(batch, p, rng, event_mask)
        alpha = self.time_factors(batch, p)
        for i, lp in enumerate(self.layer_params(p)):
            h_visit, h_event = layer_forward(
                batch.layer_graph, h_visit, h_event, lp, alpha, rng, self.config.dropout if rng else 0.0, i
            )
        return h_visit, h_event

    def head(self, h_visit: Tensor, batch: Batch, params: ParamStore | None = None) -> Tensor:
        """Two-layer predictor reading only each sample's final visit row."""
        p = params or self.params
        last = ad.take(h_visit, batch.last_rows)
        hidden = ad.relu(last @ p["pred.h.w"] + p["pred.h.b"])
        return hidden @ p["pred.out.w"] + p["pred.out.b"]

    def forward(
        self, batch: Batch, params: ParamStore | None = None, rng=None, event_mask: Tensor | None = None
    ) -> Tensor:
        """Label logits ``(B, n_labels)``; dropout is active only when ``rng`` is given."""
        h_visit, _ = self.encode(batch, params, rng, event_mask)
        return self.head(h_visit, batch, params)

    def eval_batches(self, samples, batch_size: int = 256) -> list[Batch]:
        items = [s if isinstance(s, PreparedSample) else self.prepare(s) for s in samples]
        return [self.collate(items[i : i + batch_size]) for i in range(0, len(items), batch_size)]

    def predict(self, samples, batch_size: int = 256) -> np.ndarray:
        """Eval-mode logits as a plain array; accepts samples, prepared samples or batches."""
        batches = samples if samples and isinstance(samples[0], Batch) else self.eval_batches(samples, batch_size)
        out = [self.forward(b).data for b in batches]
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.n_labels))


def loss(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy over label categories (and batch rows)."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise DimensionError(f"loss: logits {logits.shape} vs targets {y.shape}")
    if y.size == 0 or not np.all(y.reshape(-1, y.shape[-1]).sum(axis=-1) > 0):
        raise ValueError("loss: every target needs at least one positive label")
    return ad.bce_with_logits(logits, y, reduction="mean")
