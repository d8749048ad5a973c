"""Augmentation affinity/diversity metrics and the DI (data interference) index.

The DI index here is an explicit operationalisation: the share of the test set,
in percentage points, newly mis-predicted as the single class that gains the
most wrong predictions under a distortion. Negative gains clamp to zero.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ShapeError
from .model import LogitsTable, hard_ce

REPORT_COLUMNS = ("metric", "value", "units", "n_runs", "seed", "config_hash")


@dataclass
class MetricReport:
    metric: str
    value: float
    units: str
    n_runs: int = 1
    per_run: list[float] = field(default_factory=list)
    seed: int | None = None
    config_hash: str = ""

    def __post_init__(self):
        self.value = float(self.value)
        if not np.isfinite(self.value):
            raise ValueError(f"{self.metric}: non-finite value")
        if not self.per_run:
            self.per_run = [self.value]
        if len(self.per_run) != self.n_runs:
            raise ValueError(f"{self.metric}: {len(self.per_run)} per-run values for n_runs={self.n_runs}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_row(self) -> list:
        return [self.metric, repr(self.value), self.units, self.n_runs,
                "" if self.seed is None else self.seed, self.config_hash]


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:12]


def reports_to_csv(reports) -> str:
    """CSV with a fixed header; different metric kinds form blank-line separated groups."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    groups: dict[str, list] = {}
    for r in reports:
        groups.setdefault(r.metric, []).append(r)
    for gi, rows in enumerate(groups.values()):
        if gi:
            buf.write("\n")
        for r in rows:
            w.writerow(r.csv_row())
    return buf.getvalue()


def _scores(t) -> np.ndarray:
    return t.scores if isinstance(t, LogitsTable) else np.asarray(t, dtype=np.float64)


def affinity(ref_clean, ref_aug, labels, labels_aug=None) -> MetricReport:
    """100 * (accuracy on augmented data - accuracy on clean data) of a reference model."""
    clean, aug = _scores(ref_clean), _scores(ref_aug)
    if clean.shape != aug.shape:
        raise ShapeError(f"logit tables differ in shape: {clean.shape} vs {aug.shape}")
    labels = np.asarray(labels)
    labels_aug = labels if labels_aug is None else np.asarray(labels_aug)
    if labels.shape[0] != clean.shape[0]:
        raise ShapeError("label count does not match logits")
    acc_clean = np.mean(np.argmax(clean, axis=1) == labels)
    acc_aug = np.mean(np.argmax(aug, axis=1) == labels_aug)
    return MetricReport("affinity", 100.0 * (acc_aug - acc_clean), "pp")


def diversity(aug_logits, majority_labels) -> MetricReport:
    """Mean hard cross entropy against the majority-source label (nats)."""
    s = _scores(aug_logits)
    majority_labels = np.asarray(majority_labels)
    if majority_labels.shape[0] != s.shape[0]:
        raise ShapeError("label count does not match logits")
    return MetricReport("diversity", float(np.mean(hard_ce(s, majority_labels))), "nats")


def mix_diversity(logits, y1, y2, lam) -> MetricReport:
    """Mean of lam * CE(y1) + (1 - lam) * CE(y2) over samples (nats)."""
    s = _scores(logits)
    lam = np.asarray(lam, dtype=np.float64)
    if np.any((lam < 0) | (lam > 1)):
        raise ValueError("mixing weights must lie in [0, 1]")
    loss = lam * hard_ce(s, y1) + (1.0 - lam) * hard_ce(s, y2)
    return MetricReport("mix_diversity", float(np.mean(loss)), "nats")


@dataclass(frozen=True)
class ClassIncrease:
    increase: np.ndarray
    n_test: int

    @property
    def c_max(self) -> int:
        return int(np.argmax(self.increase))

    @property
    def max_increase(self) -> int:
        return int(self.increase[self.c_max])


def class_increase(wrong_clean, wrong_distorted, n_test: int) -> ClassIncrease:
    """Per-class change i_c = W'_c - W_c in wrong-prediction counts."""
    w = np.asarray(wrong_clean, dtype=np.int64)
    wd = np.asarray(wrong_distorted, dtype=np.int64)
    if w.shape != wd.shape:
        raise ShapeError(f"class counts differ: {w.shape} vs {wd.shape}")
    return ClassIncrease(wd - w, int(n_test))


def di_index(inc: ClassIncrease) -> MetricReport:
    """100 * max(i_cmax, 0) / n_test."""
    if inc.n_test <= 0:
        raise ValueError("n_test must be positive")
    value = 100.0 * max(inc.max_increase, 0) / inc.n_test
    return MetricReport("di_index", value, "pp")


def worst_case_di(runs) -> MetricReport:
    """DI of the per-class maximum increase across runs."""
    runs = list(runs)
    if not runs:
        raise ValueError("need at least one run")
    shapes = {r.increase.shape for r in runs}
    ns = {r.n_test for r in runs}
    if len(shapes) != 1 or len(ns) != 1:
        raise ShapeError("runs disagree on class count or test-set size")
    worst = np.max(np.stack([r.increase for r in runs]), axis=0)
    rep = di_index(ClassIncrease(worst, runs[0].n_test))
    per_run = [di_index(r).value for r in runs]
    return MetricReport("worst_case_di", rep.value, "pp", n_runs=len(runs), per_run=per_run)
