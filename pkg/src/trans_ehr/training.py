"""Training loop with validation-based model selection, evaluation and grid search."""
from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .ehr import CodeVocabulary, PatientRecord, Sample, atomic_write_text, build_vocabulary, cohort_samples
from .errors import ConfigError, OptimizerError, TrainingError
from .metrics import evaluate_scores, visit_precision_at_k
from .model import ModelConfig, PreparedSample, TransModel, loss
from .params import adamw_step, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainedModel:
    model: TransModel
    best_metric: float
    best_epoch: int
    history: list[dict] = field(default_factory=list)

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    @property
    def params(self):
        return self.model.params

    @property
    def vocab(self) -> CodeVocabulary:
        return self.model.vocab

    @property
    def vocab_fingerprint(self) -> str:
        return self.model.vocab.fingerprint()

    def metadata(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "vocabulary": self.vocab.to_json(),
            "vocab_fingerprint": self.vocab_fingerprint,
            "best_metric": self.best_metric,
            "best_epoch": self.best_epoch,
        }

    def save(self, path, extra: Mapping | None = None) -> Path:
        meta = self.metadata()
        if extra:
            meta.update(extra)
        return save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        ckpt = load_checkpoint(path)
        meta = ckpt.metadata
        vocab = CodeVocabulary.from_json(meta["vocabulary"])
        if vocab.fingerprint() != meta["vocab_fingerprint"]:
            raise ConfigError("checkpoint vocabulary does not match its fingerprint")
        model = TransModel(ModelConfig.from_dict(meta["config"]), vocab, ckpt.params)
        return cls(model, meta["best_metric"], meta["best_epoch"])


def _as_samples(data, vocab: CodeVocabulary) -> list[Sample]:
    data = list(data)
    if data and isinstance(data[0], PatientRecord):
        return cohort_samples(data, vocab)
    return data


def _append_jsonl(path: Path | None, row: dict) -> None:
    if path is None:
        return
    with open(path, "a") as fh:
        fh.write(json.dumps(row, sort_keys=True) + "\n")


def evaluate(model: TransModel, samples, ks: Sequence[int] = (10, 20, 30)) -> dict[str, float]:
    items = [s if isinstance(s, PreparedSample) else model.prepare(s) for s in samples]
    if not items:
        raise ValueError("no samples to evaluate")
    scores = model.predict(items)
    return evaluate_scores(scores, [p.sample.labels for p in items], ks)


def train(
    train_data,
    val_data,
    config: ModelConfig,
    vocab: CodeVocabulary | None = None,
    log_path=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainedModel:
    """Fit a model with AdamW, keeping the parameters of the best validation epoch.

    ``train_data``/``val_data`` are lists of patient records or of samples.
    Without ``vocab`` one is built from the training records with hashed
    label groups (``config.n_labels`` of them).
    """
    if vocab is None:
        if not train_data or not isinstance(train_data[0], PatientRecord):
            raise ConfigError("pass a vocabulary when training from samples")
        if config.n_labels <= 0:
            raise ConfigError("config.n_labels must be set to build a vocabulary")
        vocab = build_vocabulary(train_data, config.n_labels)
    train_s = _as_samples(train_data, vocab)
    val_s = _as_samples(val_data, vocab)
    if not train_s or not val_s:
        raise ValueError("training and validation splits must both contain samples")

    model = TransModel(config, vocab)
    cfg = model.config
    params = model.params
    train_items = model.prepare_all(train_s)
    val_batches = model.eval_batches(val_s)
    val_labels = [s.labels for s in val_s]
    rng = np.random.default_rng(cfg.seed + 1)
    log_path = Path(log_path) if log_path is not None else None
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")

    best = -math.inf
    best_epoch = 0
    best_state = params.snapshot()
    stale = 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_items))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = model.collate([train_items[i] for i in order[start : start + cfg.batch_size]])
            value = loss(model.forward(batch, params, rng=rng if cfg.dropout > 0 else None), batch.targets)
            lv = float(value.data)
            if not math.isfinite(lv):
                raise TrainingError(f"loss diverged (non-finite) in epoch {epoch}")
            try:
                adamw_step(params, params.gradients(value), cfg.lr, weight_decay=cfg.weight_decay)
            except OptimizerError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}") from exc
            total += lv * batch.size
            count += batch.size
        metric = visit_precision_at_k(model.predict(val_batches), val_labels, cfg.eval_k)
        row = {
            "epoch": epoch,
            "loss": total / count,
            f"val_visit_precision@{cfg.eval_k}": metric,
            "seconds": round(time.perf_counter() - t0, 3),
        }
        history.append(row)
        _append_jsonl(log_path, row)
        log.info("epoch %d loss %.4f val p@%d %.4f", epoch, row["loss"], cfg.eval_k, metric)
        if on_epoch is not None:
            on_epoch(row)
        if metric > best:
            best, best_epoch, best_state, stale = metric, epoch, params.snapshot(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    params.load_snapshot(best_state)
    return TrainedModel(model, float(best), best_epoch, history)


def expand_space(space: Mapping[str, Sequence]) -> list[dict]:
    keys = list(space)
    for k in keys:
        if not isinstance(space[k], (list, tuple)) or not space[k]:
            raise ConfigError(f"search dimension {k!r} must be a non-empty list")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(space[k] for k in keys))]


def grid_search(
    space: Mapping[str, Sequence],
    train_data,
    val_data,
    base: ModelConfig,
    vocab: CodeVocabulary | None = None,
    report_path=None,
) -> tuple[ModelConfig, list[dict]]:
    """Train every point of ``space``; pick the best validation precision.

    Points that do not form a valid config (e.g. hidden size not divisible
    by the head count) are kept in the report with ``status: "infeasible"``.
    Ties go to the earlier point.
    """
    rows = []
    best_cfg, best_metric = None, -math.inf
    for point in expand_space(space):
        row = dict(point)
        try:
            cfg = base.replace(**point)
        except ConfigError as exc:
            row.update(status="infeasible", reason=str(exc), val_metric=None, best_epoch=None)
            rows.append(row)
            continue
        trained = train(train_data, val_data, cfg, vocab)
        row.update(status="ok", val_metric=trained.best_metric, best_epoch=trained.best_epoch)
        rows.append(row)
        if trained.best_metric > best_metric:
            best_cfg, best_metric = cfg, trained.best_metric
    if report_path is not None:
        atomic_write_text(report_path, json.dumps({"rows": rows, "best": best_cfg and best_cfg.to_dict()}, indent=2))
    if best_cfg is None:
        raise ConfigError("no feasible point in the search space")
    return best_cfg, rows
