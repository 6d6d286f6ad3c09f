"""Synthetic cohorts with planted, checkable next-visit signal.

Every patient carries a few latent chronic conditions.  Each condition owns a
catalog of codes (diagnosis sets per state, treatment medications, a
monitoring procedure); background codes are drawn independently and never
influence the future.  Three signal modes decide how a condition's state at
visit ``t`` follows from the history:

``progression``
    state advances one stage unless the previous visit prescribed the
    condition's effective drug.
``interval``
    state advances one stage unless the gap since the previous visit is
    short; the drug is irrelevant.  Independently of any condition, a short
    follow-up also brings an acute diagnosis set and a long gap a routine
    one.  The gap after the first visit is always long.
``structure``
    at a clinical visit where the condition's drug is given, the diagnosis set
    depends on whether that drug was ever prescribed at an earlier clinical
    visit (drug and diagnosis sharing a visit, i.e. a meta-path link).
    Pharmacy-only visits carry drugs but no diagnoses.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ehr import CodeKind, PatientRecord, Sample, Visit, make_record
from .errors import ConfigError

MODES = ("progression", "interval", "structure")
SHORT_GAP = (1.0, 5.0)
LONG_GAP = (60.0, 120.0)
GAP_THRESHOLD = 30.0


@dataclass
class GeneratorConfig:
    n_patients: int = 500
    n_diagnoses: int = 240
    n_procedures: int = 40
    n_medications: int = 60
    n_label_groups: int = 50
    n_latent_conditions: int = 10
    n_stages: int = 3
    codes_per_stage: int = 3
    min_conditions: int = 1
    max_conditions: int = 3
    visit_p: float = 0.35  # visits per patient = 1 + Geometric(visit_p)
    max_visits: int | None = 12
    noise: float = 0.1
    mean_gap_days: float = 30.0
    background_meds: int = 2
    background_procs: int = 1
    clinical_rate: float = 0.6  # structure mode: share of clinical visits
    clinic_drug_rate: float = 0.3  # structure mode: drug given at a clinical visit
    pharmacy_drug_rate: float = 0.7  # structure mode: drug dispensed at a pharmacy visit
    mode: str = "progression"

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ConfigError("n_patients must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not 0.0 <= self.noise < 1.0:
            raise ConfigError("noise must lie in [0, 1)")
        if not 0.0 < self.visit_p <= 1.0:
            raise ConfigError("visit_p must lie in (0, 1]")
        if self.max_visits is not None and self.max_visits < 2:
            raise ConfigError("max_visits must be at least 2")
        if not 1 <= self.min_conditions <= self.max_conditions <= self.n_latent_conditions:
            raise ConfigError("need 1 <= min_conditions <= max_conditions <= n_latent_conditions")
        if self.n_stages < 2 or self.codes_per_stage < 1:
            raise ConfigError("need n_stages >= 2 and codes_per_stage >= 1")
        n_states = 3 if self.mode == "structure" else self.n_stages
        n_sets = self.n_latent_conditions * n_states + (2 if self.mode == "interval" else 0)
        if n_sets * self.codes_per_stage >= self.n_diagnoses:
            raise ConfigError("condition diagnosis codes exceed the diagnosis vocabulary")
        if 2 * self.n_latent_conditions >= self.n_medications:
            raise ConfigError("need more medications than two per condition")
        if self.n_latent_conditions >= self.n_procedures:
            raise ConfigError("need more procedures than one per condition")
        if self.codes_per_stage > self.n_label_groups:
            raise ConfigError("codes_per_stage exceeds the number of label groups")

    @property
    def n_states(self) -> int:
        return 3 if self.mode == "structure" else self.n_stages


@dataclass(frozen=True)
class Catalog:
    stage_codes: tuple[tuple[tuple[str, ...], ...], ...]  # [condition][state] -> diagnoses
    effective_med: tuple[str, ...]
    other_med: tuple[str, ...]
    procedure: tuple[str, ...]
    background_dx: tuple[str, ...]
    background_med: tuple[str, ...]
    background_proc: tuple[str, ...]
    followup_codes: tuple[tuple[str, ...], ...] = ((), ())  # interval mode: (short gap, long gap)

    def signal_codes(self, condition: int) -> set[tuple[CodeKind, str]]:
        out = {(CodeKind.DIAGNOSIS, c) for state in self.stage_codes[condition] for c in state}
        out |= {
            (CodeKind.MEDICATION, self.effective_med[condition]),
            (CodeKind.MEDICATION, self.other_med[condition]),
            (CodeKind.PROCEDURE, self.procedure[condition]),
        }
        return out


# structure-mode states
BASELINE, ESTABLISHED, NEW_DRUG = 0, 1, 2


@dataclass
class PatientTruth:
    conditions: tuple[int, ...]
    states: list[dict[int, int]]  # per visit, condition -> latent state
    treated: list[dict[int, bool]]  # per visit, condition -> drug given (effective drug in progression mode)
    causal_codes: frozenset  # (kind, code) pairs tied to the patient's conditions


@dataclass
class GroundTruth:
    config: GeneratorConfig
    catalog: Catalog
    label_groups: dict[str, int]
    patients: dict[str, PatientTruth] = field(default_factory=dict)

    def is_causal(self, patient_id: str, kind, code: str) -> bool:
        return (CodeKind(kind), code) in self.patients[patient_id].causal_codes

    def prediction_causes(self, sample: Sample, labels) -> tuple[set, set]:
        """Codes that drive ``labels`` for this sample, and the background codes.

        Causes are signal codes of the patient's conditions that can emit one
        of ``labels``, present in visit ``t-1`` (the visit the next-visit rule
        reads).  Background is every non-signal code in the history.  Other
        signal codes belong to neither set.
        """
        signal = set()
        for c in self.patients[sample.patient_id].conditions:
            signal |= self.catalog.signal_codes(c)
        owners = set()
        for label in labels:
            owners |= self.label_causes(int(label))
        prev = {(x.kind, x.code) for x in sample.history[-2].all_codes()}
        every = {(x.kind, x.code) for v in sample.history for x in v.all_codes()}
        return signal & owners & prev, every - signal

    def label_causes(self, label: int) -> set[tuple[CodeKind, str]]:
        """Signal codes of every condition that can emit a diagnosis in group ``label``."""
        out: set = set()
        for c, states in enumerate(self.catalog.stage_codes):
            if any(self.label_groups[x] == label for state in states for x in state):
                out |= self.catalog.signal_codes(c)
        return out

    def rule_diagnoses(self, history: Sequence[Visit]) -> set[str]:
        """Noiseless next-visit diagnoses, computed from the observable history only."""
        cat, cfg = self.catalog, self.config
        current = history[-1]
        meds_now = {c.code for c in current.medications}
        procs_now = {c.code for c in current.procedures}
        out: set[str] = set()
        if cfg.mode == "structure":
            for c, proc in enumerate(cat.procedure):
                if proc not in procs_now:
                    continue
                drug = cat.effective_med[c]
                if drug not in meds_now:
                    state = BASELINE
                else:
                    prior = any(
                        v.diagnoses and drug in {m.code for m in v.medications} for v in history[:-1]
                    )
                    state = ESTABLISHED if prior else NEW_DRUG
                out.update(cat.stage_codes[c][state])
            return out
        prev = history[-2]
        prev_dx = {c.code for c in prev.diagnoses}
        prev_meds = {c.code for c in prev.medications}
        for c, stages in enumerate(cat.stage_codes):
            present = [s for s, codes in enumerate(stages) if prev_dx & set(codes)]
            if not present:
                continue
            s = present[0]
            if cfg.mode == "progression":
                stay = cat.effective_med[c] in prev_meds
            else:
                stay = current.time - prev.time < GAP_THRESHOLD
            nxt = s if stay else min(s + 1, cfg.n_stages - 1)
            out.update(stages[nxt])
        if cfg.mode == "interval":
            out.update(cat.followup_codes[0 if current.time - prev.time < GAP_THRESHOLD else 1])
        return out

    def bayes_scores(self, sample: Sample, n_labels: int) -> np.ndarray:
        """Label-group probabilities for ``sample`` from the latent state.

        Uses the true state at visit ``t-1`` plus the generator's noise model,
        so it upper-bounds what a history-only scorer can reach.
        """
        cfg, cat = self.config, self.catalog
        truth = self.patients[sample.patient_id]
        r = cfg.noise
        t = sample.t
        code_p: dict[str, float] = {}

        def bump(code, p):
            code_p[code] = 1 - (1 - code_p.get(code, 0.0)) * (1 - p)

        for c in truth.conditions:
            n_states = cfg.n_states
            dist = np.full(n_states, r / n_states)
            if cfg.mode == "structure":
                dist[truth.states[t - 1][c]] += 1 - r
                if truth.states[t - 1].get(c, -1) < 0:
                    continue
            else:
                s = truth.states[t - 2][c]
                if cfg.mode == "progression":
                    stay = truth.treated[t - 2][c]
                else:
                    gap = sample.history[-1].time - sample.history[-2].time
                    stay = gap < GAP_THRESHOLD
                dist[s if stay else min(s + 1, n_states - 1)] += 1 - r
            for state, pr in enumerate(dist):
                for code in cat.stage_codes[c][state]:
                    bump(code, pr * (1 - r))
        if cfg.mode == "interval":
            gap = sample.history[-1].time - sample.history[-2].time
            for code in cat.followup_codes[0 if gap < GAP_THRESHOLD else 1]:
                bump(code, 1 - r)
        if cat.background_dx:
            p_bg = 1 - (1 - r / len(cat.background_dx)) ** 2
            for code in cat.background_dx:
                bump(code, p_bg)
        group_miss = np.ones(n_labels)
        for code, p in code_p.items():
            group_miss[self.label_groups[code]] *= 1 - p
        return 1 - group_miss


def _codes(prefix: str, n: int) -> list[str]:
    width = max(3, len(str(n - 1)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def _catalog(cfg: GeneratorConfig, rng: np.random.Generator) -> tuple[Catalog, dict[str, int]]:
    dx = list(rng.permutation(_codes("D", cfg.n_diagnoses)))
    meds = list(rng.permutation(_codes("M", cfg.n_medications)))
    procs = list(rng.permutation(_codes("P", cfg.n_procedures)))
    n_c, n_s, k = cfg.n_latent_conditions, cfg.n_states, cfg.codes_per_stage
    stage_codes = []
    groups: dict[str, int] = {}
    counter = 0
    pos = 0
    for _ in range(n_c):
        states = []
        for _ in range(n_s):
            codes = tuple(sorted(dx[pos : pos + k]))
            pos += k
            for code in codes:
                groups[code] = counter % cfg.n_label_groups
                counter += 1
            states.append(codes)
        stage_codes.append(tuple(states))
    followup: list[tuple[str, ...]] = [(), ()]
    if cfg.mode == "interval":
        for i in range(2):
            followup[i] = tuple(sorted(dx[pos : pos + k]))
            pos += k
            for code in followup[i]:
                groups[code] = counter % cfg.n_label_groups
                counter += 1
    background_dx = tuple(sorted(dx[pos:]))
    for code in background_dx:
        groups[code] = int(rng.integers(cfg.n_label_groups))
    catalog = Catalog(
        stage_codes=tuple(stage_codes),
        effective_med=tuple(meds[:n_c]),
        other_med=tuple(meds[n_c : 2 * n_c]),
        procedure=tuple(procs[:n_c]),
        background_dx=background_dx,
        background_med=tuple(sorted(meds[2 * n_c :])),
        background_proc=tuple(sorted(procs[n_c:])),
        followup_codes=tuple(followup),
    )
    return catalog, groups


def _visit_count(cfg: GeneratorConfig, rng: np.random.Generator) -> int:
    n = 1 + int(rng.geometric(cfg.visit_p))
    return n if cfg.max_visits is None else min(n, cfg.max_visits)


def _background(cfg: GeneratorConfig, cat: Catalog, rng: np.random.Generator, clinical: bool = True):
    dx: set[str] = set()
    if clinical and cat.background_dx:
        for _ in range(int(rng.binomial(2, cfg.noise))):
            dx.add(cat.background_dx[rng.integers(len(cat.background_dx))])
    meds = set(rng.choice(cat.background_med, size=int(rng.integers(cfg.background_meds + 1)), replace=False))
    procs: set[str] = set()
    if clinical:
        procs = set(rng.choice(cat.background_proc, size=int(rng.integers(cfg.background_procs + 1)), replace=False))
    return dx, {str(m) for m in meds}, {str(p) for p in procs}


def _emit(codes: Sequence[str], cfg: GeneratorConfig, rng: np.random.Generator) -> set[str]:
    return {c for c in codes if rng.random() >= cfg.noise}


def _patient(pid: str, cfg: GeneratorConfig, cat: Catalog, rng: np.random.Generator):
    n_cond = int(rng.integers(cfg.min_conditions, cfg.max_conditions + 1))
    conds = tuple(sorted(int(c) for c in rng.choice(cfg.n_latent_conditions, size=n_cond, replace=False)))
    T = _visit_count(cfg, rng)
    visits, states, treated = [], [], []
    time = 0.0
    causal: set = set()

    if cfg.mode == "structure":
        established = {c: False for c in conds}
        for t in range(T):
            clinical = t == 0 or t == T - 1 or rng.random() < cfg.clinical_rate
            dx, meds, procs = _background(cfg, cat, rng, clinical)
            st, tr = {}, {}
            for c in conds:
                drug = cat.effective_med[c]
                given = rng.random() < (cfg.clinic_drug_rate if clinical else cfg.pharmacy_drug_rate)
                tr[c] = given
                if given:
                    meds.add(drug)
                    causal.add((CodeKind.MEDICATION, drug))
                if not clinical:
                    st[c] = -1
                    continue
                state = BASELINE if not given else (ESTABLISHED if established[c] else NEW_DRUG)
                if rng.random() < cfg.noise:
                    state = int(rng.integers(3))
                st[c] = state
                emitted = _emit(cat.stage_codes[c][state], cfg, rng)
                dx |= emitted
                procs.add(cat.procedure[c])
                causal |= {(CodeKind.DIAGNOSIS, x) for x in emitted}
                causal.add((CodeKind.PROCEDURE, cat.procedure[c]))
                if given:
                    established[c] = True
            visits.append({"time": round(time, 3), "diagnoses": sorted(dx), "medications": sorted(meds),
                           "procedures": sorted(procs)})
            states.append(st)
            treated.append(tr)
            time += 1.0 + float(rng.exponential(cfg.mean_gap_days))
        return visits, PatientTruth(conds, states, treated, frozenset(causal))

    stage = {c: int(rng.integers(cfg.n_stages - 1)) for c in conds}
    last_short = None
    for t in range(T):
        dx, meds, procs = _background(cfg, cat, rng)
        if last_short is not None and cfg.mode == "interval":
            dx |= _emit(cat.followup_codes[0 if last_short else 1], cfg, rng)
        tr = {}
        for c in conds:
            emitted = _emit(cat.stage_codes[c][stage[c]], cfg, rng)
            dx |= emitted
            effective = bool(rng.random() < 0.5)
            drug = cat.effective_med[c] if effective else cat.other_med[c]
            meds.add(drug)
            procs.add(cat.procedure[c])
            tr[c] = effective
            causal |= {(CodeKind.DIAGNOSIS, x) for x in emitted}
            causal |= {(CodeKind.MEDICATION, drug), (CodeKind.PROCEDURE, cat.procedure[c])}
        visits.append({"time": round(time, 3), "diagnoses": sorted(dx), "medications": sorted(meds),
                       "procedures": sorted(procs)})
        states.append(dict(stage))
        treated.append(tr)
        if cfg.mode == "interval":
            # the first gap is always long, so per-patient min-max scaling
            # still separates a short follow-up from a long one
            short = t > 0 and rng.random() < 0.5
            gap = float(rng.uniform(*(SHORT_GAP if short else LONG_GAP)))
            stay = last_short = short
        else:
            gap = 1.0 + float(rng.exponential(cfg.mean_gap_days))
            stay = None
        for c in conds:
            keep = tr[c] if stay is None else stay
            nxt = stage[c] if keep else min(stage[c] + 1, cfg.n_stages - 1)
            if rng.random() < cfg.noise:
                nxt = int(rng.integers(cfg.n_stages))
            stage[c] = nxt
        time += gap
    return visits, PatientTruth(conds, states, treated, frozenset(causal))


def generate_synthetic_cohort(config: GeneratorConfig, seed: int = 0) -> tuple[list[PatientRecord], GroundTruth]:
    config.validate()
    rng = np.random.default_rng(seed)
    catalog, groups = _catalog(config, rng)
    truth = GroundTruth(config, catalog, groups)
    width = len(str(config.n_patients - 1))
    records = []
    for i in range(config.n_patients):
        pid = f"p{i:0{width}d}"
        visits, pt = _patient(pid, config, catalog, rng)
        records.append(make_record(pid, visits))
        truth.patients[pid] = pt
    return records, truth
