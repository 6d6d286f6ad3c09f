"""Longitudinal EHR records: loading, vocabularies, supervised samples, splits."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import tempfile
import warnings
import zlib
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CohortParseError, SchemaError

log = logging.getLogger(__name__)


class CodeKind(str, Enum):
    DIAGNOSIS = "diagnosis"
    PROCEDURE = "procedure"
    MEDICATION = "medication"


KINDS = (CodeKind.DIAGNOSIS, CodeKind.PROCEDURE, CodeKind.MEDICATION)
# JSONL field name for each kind
FIELD_OF = {CodeKind.DIAGNOSIS: "diagnoses", CodeKind.PROCEDURE: "procedures", CodeKind.MEDICATION: "medications"}
KIND_OF_FIELD = {v: k for k, v in FIELD_OF.items()}


class CohortWarning(UserWarning):
    pass


@dataclass(frozen=True, order=True)
class MedicalCode:
    kind: CodeKind
    code: str
    vocab_index: int = field(default=-1, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", CodeKind(self.kind))


@dataclass(frozen=True)
class Visit:
    time: float
    index_t: int
    diagnoses: frozenset = frozenset()
    procedures: frozenset = frozenset()
    medications: frozenset = frozenset()

    def codes(self, kind: CodeKind) -> frozenset:
        return getattr(self, FIELD_OF[CodeKind(kind)])

    def all_codes(self) -> list[MedicalCode]:
        return sorted(self.diagnoses | self.procedures | self.medications)


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]

    def __post_init__(self):
        if len(self.visits) < 2:
            raise ValueError(f"patient {self.patient_id!r}: at least two visits required")
        idx = [v.index_t for v in self.visits]
        if idx != list(range(1, len(idx) + 1)):
            raise ValueError(f"patient {self.patient_id!r}: visit indices must run 1..T")
        times = [v.time for v in self.visits]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError(f"patient {self.patient_id!r}: visits out of time order")

    @property
    def n_visits(self) -> int:
        return len(self.visits)


def make_record(patient_id: str, visits: Iterable[Mapping]) -> PatientRecord:
    """Build a record from loosely structured visit dicts (time + code lists)."""
    raw = sorted(visits, key=lambda v: float(v["time"]))
    out = []
    for t, v in enumerate(raw, start=1):
        sets = {
            FIELD_OF[k]: frozenset(MedicalCode(k, str(c)) for c in v.get(FIELD_OF[k], ()))
            for k in KINDS
        }
        out.append(Visit(time=float(v["time"]), index_t=t, **sets))
    return PatientRecord(str(patient_id), tuple(out))


# --------------------------------------------------------------------------
# JSONL io


def _parse_patient(obj, lineno: int) -> tuple[str, list[dict]]:
    if not isinstance(obj, dict) or "patient_id" not in obj or "visits" not in obj:
        raise CohortParseError(lineno, "expected an object with 'patient_id' and 'visits'")
    visits = obj["visits"]
    if not isinstance(visits, list):
        raise CohortParseError(lineno, "'visits' must be a list")
    for v in visits:
        if not isinstance(v, dict) or "time" not in v:
            raise CohortParseError(lineno, "each visit needs a 'time'")
        try:
            t = float(v["time"])
        except (TypeError, ValueError):
            raise CohortParseError(lineno, f"bad visit time {v['time']!r}") from None
        if not math.isfinite(t):
            raise CohortParseError(lineno, "visit time must be finite")
        for key, codes in v.items():
            if key == "time":
                continue
            if key not in KIND_OF_FIELD:
                raise SchemaError(f"line {lineno}: unknown code kind {key!r}")
            if not isinstance(codes, list):
                raise CohortParseError(lineno, f"{key!r} must be a list of codes")
    return str(obj["patient_id"]), visits


def load_cohort(path, vocab: "CodeVocabulary | None" = None) -> list[PatientRecord]:
    """Read a cohort JSONL file (one patient object per line).

    Patients with fewer than two visits are dropped; a single
    :class:`CohortWarning` reports how many.  When ``vocab`` is given, codes
    carry their vocabulary index (``-1`` for codes the vocabulary lacks).
    """
    records = []
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CohortParseError(lineno, f"malformed JSON ({exc.msg})") from None
            pid, visits = _parse_patient(obj, lineno)
            if len(visits) < 2:
                dropped += 1
                continue
            rec = make_record(pid, visits)
            if vocab is not None:
                rec = vocab.annotate(rec)
            records.append(rec)
    if dropped:
        msg = f"dropped {dropped} patient(s) with fewer than 2 visits"
        log.warning(msg)
        warnings.warn(msg, CohortWarning, stacklevel=2)
    records.sort(key=lambda r: r.patient_id)
    return records


def record_to_json(rec: PatientRecord) -> dict:
    return {
        "patient_id": rec.patient_id,
        "visits": [
            {"time": v.time, **{FIELD_OF[k]: sorted(c.code for c in v.codes(k)) for k in KINDS}}
            for v in rec.visits
        ],
    }


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_cohort(records: Iterable[PatientRecord], path) -> None:
    lines = [json.dumps(record_to_json(r), sort_keys=True) for r in records]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


# --------------------------------------------------------------------------
# vocabulary


def hashed_group(code: str, n_groups: int) -> int:
    return zlib.crc32(code.encode("utf-8")) % n_groups


def load_label_grouping(path) -> dict[str, int]:
    """Read a ``diagnosis_code,label_group`` CSV (header optional)."""
    out: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip() in ("", "diagnosis_code"):
                continue
            if len(row) != 2:
                raise SchemaError(f"label grouping rows need two columns, got {row!r}")
            out[row[0].strip()] = int(row[1])
    return out


def write_label_grouping(grouping: Mapping[str, int], path) -> None:
    rows = ["diagnosis_code,label_group"] + [f"{c},{g}" for c, g in sorted(grouping.items())]
    atomic_write_text(path, "\n".join(rows) + "\n")


@dataclass
class CodeVocabulary:
    """Per-kind ``code -> index`` maps plus the diagnosis label grouping.

    Index ``size(kind)`` is reserved for unknown codes of that kind.
    """

    index: dict[CodeKind, dict[str, int]]
    label_groups: dict[str, int]
    n_label_groups: int

    def size(self, kind: CodeKind) -> int:
        return len(self.index[CodeKind(kind)])

    def lookup(self, kind: CodeKind, code: str) -> int:
        """Vocabulary index, or ``-1`` when unseen."""
        return self.index[CodeKind(kind)].get(code, -1)

    def label_of(self, code: str) -> int:
        g = self.label_groups.get(code)
        return hashed_group(code, self.n_label_groups) if g is None else g

    @property
    def n_labels(self) -> int:
        return self.n_label_groups

    def annotate(self, rec: PatientRecord) -> PatientRecord:
        visits = []
        for v in rec.visits:
            sets = {
                FIELD_OF[k]: frozenset(MedicalCode(k, c.code, self.lookup(k, c.code)) for c in v.codes(k))
                for k in KINDS
            }
            visits.append(Visit(v.time, v.index_t, **sets))
        return PatientRecord(rec.patient_id, tuple(visits))

    def to_json(self) -> dict:
        return {
            "index": {k.value: sorted(m, key=m.get) for k, m in self.index.items()},
            "label_groups": dict(sorted(self.label_groups.items())),
            "n_label_groups": self.n_label_groups,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CodeVocabulary":
        index = {CodeKind(k): {c: i for i, c in enumerate(codes)} for k, codes in obj["index"].items()}
        return cls(index, {c: int(g) for c, g in obj["label_groups"].items()}, int(obj["n_label_groups"]))

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


def build_vocabulary(
    cohort: Sequence[PatientRecord],
    n_label_groups: int,
    grouping: Mapping[str, int] | str | os.PathLike | None = None,
) -> CodeVocabulary:
    """Index codes in first-appearance order and assign label groups.

    Diagnosis codes absent from ``grouping`` (a mapping or a CSV path) fall
    back to ``crc32(code) mod n_label_groups``.
    """
    if n_label_groups <= 0:
        raise ValueError("n_label_groups must be positive")
    if not cohort:
        raise ValueError("cohort is empty")
    if grouping is not None and not isinstance(grouping, Mapping):
        grouping = load_label_grouping(grouping)
    explicit = dict(grouping or {})
    bad = {c: g for c, g in explicit.items() if not 0 <= g < n_label_groups}
    if bad:
        raise ValueError(f"label groups outside [0, {n_label_groups}): {sorted(bad)[:5]}")

    index: dict[CodeKind, dict[str, int]] = {k: {} for k in KINDS}
    for rec in cohort:
        for v in rec.visits:
            for k in KINDS:
                table = index[k]
                for c in sorted(x.code for x in v.codes(k)):
                    if c not in table:
                        table[c] = len(table)
    labels = {
        c: explicit.get(c, hashed_group(c, n_label_groups)) for c in index[CodeKind.DIAGNOSIS]
    }
    return CodeVocabulary(index, labels, n_label_groups)


# --------------------------------------------------------------------------
# samples


@dataclass(frozen=True, eq=False)
class Sample:
    """One prediction instance: predict visit ``t``'s diagnosis groups.

    ``history`` holds visits ``1..t-1`` in full and visit ``t`` stripped of
    its diagnoses.
    """

    patient_id: str
    t: int
    history: tuple[Visit, ...]
    labels: tuple[int, ...]
    n_labels: int

    @property
    def target(self) -> np.ndarray:
        y = np.zeros(self.n_labels, dtype=np.float64)
        y[list(self.labels)] = 1.0
        return y


def make_samples(record: PatientRecord, vocab: CodeVocabulary, stats: Counter | None = None) -> list[Sample]:
    out = []
    for t in range(2, record.n_visits + 1):
        current = record.visits[t - 1]
        if not current.diagnoses:
            if stats is not None:
                stats["skipped_no_diagnosis"] += 1
            continue
        labels = tuple(sorted({vocab.label_of(c.code) for c in current.diagnoses}))
        stripped = Visit(current.time, current.index_t, frozenset(), current.procedures, current.medications)
        out.append(Sample(record.patient_id, t, record.visits[: t - 1] + (stripped,), labels, vocab.n_labels))
    return out


def cohort_samples(cohort: Iterable[PatientRecord], vocab: CodeVocabulary, stats: Counter | None = None) -> list[Sample]:
    return [s for rec in cohort for s in make_samples(rec, vocab, stats)]


# --------------------------------------------------------------------------
# splitting


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items, every part at least 1."""
    raw = [n * r for r in ratios]
    sizes = [int(math.floor(x + 1e-9)) for x in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    for i in range(len(sizes)):
        while sizes[i] == 0:
            donor = max(range(len(sizes)), key=lambda j: sizes[j])
            sizes[donor] -= 1
            sizes[i] += 1
    return sizes


def split_cohort(
    cohort: Sequence[PatientRecord],
    ratios: tuple[float, float, float] = (0.75, 0.10, 0.15),
    seed: int = 0,
) -> tuple[list[PatientRecord], list[PatientRecord], list[PatientRecord]]:
    """Partition patients (not samples) into train/val/test."""
    if len(ratios) != 3 or any(not r > 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    if len(cohort) < 3:
        raise ValueError("need at least 3 patients to split")
    ordered = sorted(cohort, key=lambda r: r.patient_id)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    n_train, n_val, _ = split_sizes(len(ordered), ratios)
    pick = [ordered[i] for i in perm]
    parts = pick[:n_train], pick[n_train : n_train + n_val], pick[n_train + n_val :]
    return tuple(sorted(p, key=lambda r: r.patient_id) for p in parts)  # type: ignore[return-value]
