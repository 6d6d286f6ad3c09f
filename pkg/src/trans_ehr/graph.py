"""Per-sample temporal heterogeneous patient graphs and meta-path adjacencies."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ehr import KINDS, CodeKind, MedicalCode, Sample

VISIT = "visit"
# node-type ids used by the attention layer; visits come last
TYPE_ID = {CodeKind.DIAGNOSIS: 0, CodeKind.PROCEDURE: 1, CodeKind.MEDICATION: 2, VISIT: 3}
KIND_RANK = {k: i for i, k in enumerate(KINDS)}


@dataclass(frozen=True)
class PatientGraph:
    """Visit nodes ``0..T-1`` (chronological), event nodes ``0..E-1``.

    Event nodes are unique codes, ordered by (kind, code).  ``ev_edges`` holds
    one ``(event_id, visit_id, index_t)`` per code occurrence and is undirected;
    ``vv_edges`` is the chain ``(t, t+1)``.
    """

    visit_nodes: tuple[tuple[int, float], ...]
    event_nodes: tuple[MedicalCode, ...]
    ev_edges: tuple[tuple[int, int, int], ...]
    vv_edges: tuple[tuple[int, int], ...]

    @property
    def n_visits(self) -> int:
        return len(self.visit_nodes)

    @property
    def n_events(self) -> int:
        return len(self.event_nodes)

    def events_of_kind(self, kind) -> list[int]:
        kind = CodeKind(kind)
        return [i for i, c in enumerate(self.event_nodes) if c.kind == kind]

    def incidence(self, kind) -> np.ndarray:
        """0/1 matrix ``(n_kind, T)``: event of ``kind`` occurs in visit."""
        ids = self.events_of_kind(kind)
        pos = {e: i for i, e in enumerate(ids)}
        out = np.zeros((len(ids), self.n_visits), dtype=np.int64)
        for e, v, _ in self.ev_edges:
            if e in pos:
                out[pos[e], v] = 1
        return out

    def to_json(self) -> dict:
        return {
            "visits": [{"id": i, "index_t": t, "time": time} for i, (t, time) in enumerate(self.visit_nodes)],
            "events": [{"id": i, "kind": c.kind.value, "code": c.code} for i, c in enumerate(self.event_nodes)],
            "ev_edges": [{"event": e, "visit": v, "t": t} for e, v, t in self.ev_edges],
            "vv_edges": [{"source": a, "target": b} for a, b in self.vv_edges],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def build_patient_graph(sample: Sample) -> PatientGraph:
    if not sample.history:
        raise ValueError("sample history is empty")
    visits = sample.history
    codes = sorted(
        {MedicalCode(c.kind, c.code) for v in visits for c in v.all_codes()},
        key=lambda c: (KIND_RANK[c.kind], c.code),
    )
    eid = {c: i for i, c in enumerate(codes)}
    ev = []
    for vid, v in enumerate(visits):
        for c in sorted(v.all_codes(), key=lambda c: (KIND_RANK[c.kind], c.code)):
            ev.append((eid[MedicalCode(c.kind, c.code)], vid, v.index_t))
    return PatientGraph(
        visit_nodes=tuple((v.index_t, v.time) for v in visits),
        event_nodes=tuple(codes),
        ev_edges=tuple(ev),
        vv_edges=tuple((i, i + 1) for i in range(len(visits) - 1)),
    )


# --------------------------------------------------------------------------
# meta-paths

PathSpec = tuple[str, ...]


def metapath_spec(kind, via) -> PathSpec:
    """``(kind, visit, via, visit, kind)``."""
    return (CodeKind(kind).value, VISIT, CodeKind(via).value, VISIT, CodeKind(kind).value)


DEFAULT_METAPATHS: dict[CodeKind, PathSpec] = {
    CodeKind.MEDICATION: metapath_spec(CodeKind.MEDICATION, CodeKind.DIAGNOSIS),
    CodeKind.DIAGNOSIS: metapath_spec(CodeKind.DIAGNOSIS, CodeKind.MEDICATION),
    CodeKind.PROCEDURE: metapath_spec(CodeKind.PROCEDURE, CodeKind.DIAGNOSIS),
}


@dataclass(frozen=True)
class MetaPathAdjacency:
    node_kind: CodeKind
    node_ids: tuple[int, ...]  # event ids in the patient graph, row order
    matrix: np.ndarray
    path_spec: PathSpec


def validate_path_spec(path_spec: Sequence[str]) -> PathSpec:
    spec = tuple(str(getattr(s, "value", s)) for s in path_spec)
    if len(spec) < 3 or len(spec) % 2 == 0:
        raise ValueError(f"path spec must have odd length >= 3: {spec}")
    if spec[0] != spec[-1]:
        raise ValueError(f"path spec must start and end on the same kind: {spec}")
    for i, s in enumerate(spec):
        if i % 2 == 1 and s != VISIT:
            raise ValueError(f"path spec must alternate event/visit: {spec}")
        if i % 2 == 0:
            CodeKind(s)
    return spec


def metapath_adjacency(graph: PatientGraph, path_spec: Sequence[str]) -> MetaPathAdjacency:
    """Count walks matching ``path_spec`` between event nodes of its end kind.

    The count is the product of event/visit incidence matrices along the path,
    so entry ``(a, b)`` is the number of distinct walks from ``a`` to ``b``.
    """
    spec = validate_path_spec(path_spec)
    kind = CodeKind(spec[0])
    ids = tuple(graph.events_of_kind(kind))
    inc = {k: graph.incidence(k) for k in {CodeKind(s) for s in spec[::2]}}
    mat = np.eye(len(ids), dtype=np.int64)
    for i in range(0, len(spec) - 1, 2):
        a, b = CodeKind(spec[i]), CodeKind(spec[i + 2])
        mat = mat @ (inc[a] @ inc[b].T)
    return MetaPathAdjacency(kind, ids, mat, spec)
