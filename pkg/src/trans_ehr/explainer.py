"""Soft node-mask explanations for single predictions, and cohort-level code importance."""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ehr import MedicalCode, PatientRecord, Sample, atomic_write_text, cohort_samples
from .errors import ExplanationError
from .metrics import topk
from .model import Batch, TransModel
from .params import ParamStore, adamw_step

DEFAULT_LAMBDA = 0.005
DEFAULT_MAX_NODES = 10


@dataclass
class Explanation:
    patient_id: str
    t: int
    nodes: list[MedicalCode]  # event nodes in graph order
    mask_logits: np.ndarray
    target_labels: tuple[int, ...]
    max_nodes: int
    objective: list[float] = field(default_factory=list)

    @property
    def importance(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.mask_logits))

    @property
    def subgraph(self) -> list[int]:
        """Indices of the ``max_nodes`` most important event nodes, best first."""
        order = np.argsort(-self.importance, kind="stable")
        return [int(i) for i in order[: self.max_nodes]]

    def to_json(self) -> dict:
        imp = self.importance
        return {
            "patient_id": self.patient_id,
            "t": self.t,
            "target_labels": list(self.target_labels),
            "nodes": [
                {"kind": n.kind.value, "code": n.code, "importance": float(imp[i])} for i, n in enumerate(self.nodes)
            ],
            "subgraph": [{"kind": self.nodes[i].kind.value, "code": self.nodes[i].code} for i in self.subgraph],
        }


def _model_of(model) -> TransModel:
    return model if isinstance(model, TransModel) else model.model


def _mask_order(batch: Batch) -> np.ndarray:
    """For each batch event row, the graph-order position of that event (single-sample batch)."""
    rows = batch.sample_events(0)
    inv = np.empty(batch.n_events, dtype=np.intp)
    inv[rows] = np.arange(rows.size)
    return inv


def masked_logits(model, batch: Batch, mask, params: ParamStore | None = None) -> Tensor:
    """Logits with each event node's features scaled by ``mask`` (graph order, one sample)."""
    m = _model_of(model)
    mask = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=m.dtype))
    return m.forward(batch, params, event_mask=ad.take(mask, _mask_order(batch)))


def explain(
    model,
    sample: Sample,
    top_k: int = 3,
    labels: Sequence[int] | None = None,
    max_nodes: int = DEFAULT_MAX_NODES,
    lam: float = DEFAULT_LAMBDA,
    steps: int = 100,
    lr: float = 0.1,
    init_logit: float = 0.0,
) -> Explanation:
    """Learn a sigmoid mask over event nodes that keeps the target labels likely.

    Minimises ``-sum_{i in targets} log sigmoid(z_i) + lam * sum sigmoid(m)``
    with AdamW on the mask logits only.  ``labels`` defaults to the model's
    ``top_k`` labels on the unmasked graph.
    """
    m = _model_of(model)
    if max_nodes < 1:
        raise ValueError("max_nodes must be positive")
    batch = m.batch([sample])
    if batch.n_events == 0:
        raise ExplanationError(f"patient {sample.patient_id} visit {sample.t} has no event nodes to explain")
    frozen = m.params.detached()
    if labels is None:
        logits = m.forward(batch, frozen).data[0]
        labels = tuple(int(i) for i in topk(logits, top_k))
    labels = tuple(int(i) for i in labels)
    if not labels:
        raise ExplanationError("no target labels")
    graph_nodes = list(m.prepare(sample).graph.event_nodes)

    store = ParamStore(m.dtype)
    logit = store.add("mask", np.full(batch.n_events, init_logit))
    ones = np.ones(len(labels), dtype=m.dtype)

    def objective():
        z = masked_logits(m, batch, ad.sigmoid(logit), frozen)
        picked = ad.take(z.reshape(-1), np.asarray(labels))
        return ad.bce_with_logits(picked, ones, reduction="sum") + ad.sigmoid(logit).sum() * lam

    trace = []
    for _ in range(steps):
        value = objective()
        trace.append(float(value.data))
        adamw_step(store, store.gradients(value), lr, weight_decay=0.0)
    trace.append(float(objective().data))
    return Explanation(sample.patient_id, sample.t, graph_nodes, logit.data.astype(np.float64), labels, max_nodes, trace)


@dataclass
class CodeImportance:
    kind: str
    code: str
    mean_importance: float
    count: int


def aggregate_importance(
    model,
    data: Iterable,
    label: int,
    kinds: Sequence[str] | None = None,
    **explain_kw,
) -> list[CodeImportance]:
    """Mean mask importance per code over every occurrence in samples carrying ``label``.

    Each sample is explained with ``label`` as the sole target.  ``kinds``
    restricts which event kinds are tallied (all by default).
    """
    m = _model_of(model)
    data = list(data)
    samples = cohort_samples(data, m.vocab) if data and isinstance(data[0], PatientRecord) else data
    chosen = [s for s in samples if label in s.labels]
    if not chosen:
        raise ValueError(f"no sample carries label {label}")
    sums: dict[tuple[str, str], list[float]] = defaultdict(list)
    for s in chosen:
        exp = explain(m, s, labels=(label,), **explain_kw)
        for node, imp in zip(exp.nodes, exp.importance):
            if kinds is None or node.kind.value in kinds:
                sums[(node.kind.value, node.code)].append(float(imp))
    rows = [CodeImportance(k, c, float(np.mean(v)), len(v)) for (k, c), v in sums.items()]
    rows.sort(key=lambda r: (-r.mean_importance, r.kind, r.code))
    return rows


def importance_csv(rows: Sequence[CodeImportance]) -> str:
    """``code,mean_importance,count`` rows; codes shared across kinds get a ``kind:`` prefix."""
    seen = defaultdict(set)
    for r in rows:
        seen[r.code].add(r.kind)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["code", "mean_importance", "count"])
    for r in rows:
        code = r.code if len(seen[r.code]) == 1 else f"{r.kind}:{r.code}"
        w.writerow([code, f"{r.mean_importance:.6f}", r.count])
    return buf.getvalue()


def write_explanation(exp: Explanation, path) -> None:
    atomic_write_text(path, json.dumps(exp.to_json(), indent=2))
