"""Evaluation metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionMismatchError

METRICS = ("rmse", "rel-rmse", "c-error", "one-minus-auc")


@dataclass
class MetricReport:
    kind: str
    value: float
    n_eval: int
    timings: dict = field(default_factory=dict)

    def lines(self) -> str:
        out = [f"metric={self.kind}", f"value={self.value:.10g}", f"n_eval={self.n_eval}"]
        out += [f"time_{k}={v:.6f}" for k, v in self.timings.items()]
        return "\n".join(out)

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: probability a positive outranks a negative (ties 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels) > 0
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when one class is absent")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def compute_metric(kind: str, predictions, targets, timings: dict | None = None) -> MetricReport:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise DimensionMismatchError(f"dimension mismatch: {p.size} predictions for {y.size} targets")
    if kind == "rmse":
        value = float(np.sqrt(np.mean((p - y) ** 2)))
    elif kind == "rel-rmse":
        value = float(np.linalg.norm(p - y) / np.linalg.norm(y))
    elif kind == "c-error":
        value = float(np.mean(np.where(p >= 0, 1.0, -1.0) != np.where(y > 0, 1.0, -1.0)))
    elif kind == "one-minus-auc":
        value = 1.0 - auc(p, y)
    else:
        raise ValueError(f"unknown metric {kind!r}; expected one of {METRICS}")
    return MetricReport(kind, value, int(p.size), dict(timings or {}))
