"""Accuracy, exact pairwise ROC-AUC and concordance index, plus run reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


class UndefinedMetric(ContractError):
    """The metric has no value for this input (single class, no comparable pairs)."""


def accuracy(predictions, labels) -> float:
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.shape != lab.shape or pred.size == 0:
        raise ContractError("accuracy needs equal-length, non-empty inputs")
    return float(np.count_nonzero(pred == lab)) / pred.size


def _pair_counts(pos: np.ndarray, neg: np.ndarray, chunk: int = 2048) -> tuple[int, int]:
    greater = ties = 0
    for s in range(0, len(pos), chunk):
        p = pos[s:s + chunk, None]
        greater += int(np.count_nonzero(p > neg[None, :]))
        ties += int(np.count_nonzero(p == neg[None, :]))
    return greater, ties


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC by exhaustive pair counting: P(s+ > s-) + 0.5 P(s+ = s-)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ContractError("scores and labels differ in length")
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetric("AUC undefined: both classes must be present")
    greater, ties = _pair_counts(pos, neg)
    return (greater + 0.5 * ties) / (len(pos) * len(neg))


def roc_auc_multiclass(probs, labels) -> float:
    """Macro-averaged one-vs-rest AUC over classes present in ``labels``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim == 1 or probs.shape[1] == 1:
        return roc_auc(probs.reshape(len(labels), -1)[:, -1], labels)
    if probs.shape[1] == 2:
        return roc_auc(probs[:, 1], labels == 1)
    aucs = [roc_auc(probs[:, c], labels == c) for c in range(probs.shape[1])
            if 0 < np.count_nonzero(labels == c) < len(labels)]
    if not aucs:
        raise UndefinedMetric("AUC undefined: fewer than two classes present")
    return float(np.mean(aucs))


def c_index(risks, times, censored) -> float:
    """Harrell's concordance over pairs with t_i < t_j and record i uncensored.

    A pair is concordant when the shorter-time record has strictly higher
    risk; risk ties count one half.
    """
    r = np.asarray(risks, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    event = ~np.asarray(censored, dtype=bool)
    if not (r.shape == t.shape == event.shape):
        raise ContractError("risks, times and censored flags differ in length")
    comparable = (t[:, None] < t[None, :]) & event[:, None]
    total = int(np.count_nonzero(comparable))
    if total == 0:
        raise UndefinedMetric("C-index undefined: no comparable pairs")
    conc = int(np.count_nonzero(comparable & (r[:, None] > r[None, :])))
    ties = int(np.count_nonzero(comparable & (r[:, None] == r[None, :])))
    return (conc + 0.5 * ties) / total


@dataclass
class Report:
    task: str
    metrics: dict = field(default_factory=dict)
    per_seed: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    @staticmethod
    def summarize(values) -> tuple[float, float]:
        """Mean and sample standard deviation (n - 1); std is 0 for a single run."""
        vals = [float(v) for v in values]
        if not vals:
            raise ContractError("no runs to summarize")
        mean = math.fsum(vals) / len(vals)
        if len(vals) == 1:
            return mean, 0.0
        var = math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
        return mean, math.sqrt(var)

    def add_seed(self, seed: int, values: dict) -> None:
        self.per_seed[str(seed)] = dict(values)
        names = sorted({k for v in self.per_seed.values() for k in v})
        for name in names:
            runs = [v[name] for v in self.per_seed.values() if name in v]
            mean, std = self.summarize(runs)
            self.metrics[name] = {"mean": mean, "std": std, "n": len(runs)}

    def value(self, name: str) -> float:
        return self.metrics[name]["mean"]

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "metrics": self.metrics, "per_seed": self.per_seed,
                           "info": self.info}, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Report":
        obj = json.loads(text)
        return cls(obj["task"], obj.get("metrics", {}), obj.get("per_seed", {}), obj.get("info", {}))

    def to_csv(self, run_id: str = "") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run_id", "task", "metric", "value"])
        for name in sorted(self.metrics):
            w.writerow([run_id, self.task, name, repr(self.metrics[name]["mean"])])
        return buf.getvalue()
