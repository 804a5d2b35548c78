"""NLL, tie-grouped precision/recall curves, average precision and
percentage deltas against a baseline."""

from __future__ import annotations

import csv
import math
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CtrStackError

CLAMP = 1e-12
# below this many threshold groups auprc is computed in exact rationals
EXACT_GROUPS = 2048


class MetricError(CtrStackError, ValueError):
    pass


def _arrays(predictions, labels):
    p = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise MetricError("predictions and labels differ in length")
    if p.size == 0:
        raise MetricError("metrics need at least one prediction")
    return p, y


def nll(predictions, labels) -> float:
    p, y = _arrays(predictions, labels)
    p = np.clip(p, CLAMP, 1.0 - CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def _grouped_counts(p, y):
    """Cumulative (true positives, predicted positives) after each tie group,
    scanning scores from high to low."""
    order = np.argsort(-p, kind="stable")
    ps, ys = p[order], y[order]
    last_of_group = np.append(ps[1:] != ps[:-1], True)
    tp = np.cumsum(ys)[last_of_group]
    pp = (np.flatnonzero(last_of_group) + 1).astype(np.float64)
    return tp, pp


def pr_curve(predictions, labels) -> list[tuple[float, float]]:
    """(recall, precision) after each threshold group, preceded by
    (0, precision of the first group)."""
    p, y = _arrays(predictions, labels)
    n_pos = y.sum()
    if n_pos <= 0:
        raise MetricError("precision/recall undefined without positive labels")
    tp, pp = _grouped_counts(p, y)
    recall = tp / n_pos
    precision = tp / pp
    points = [(0.0, float(precision[0]))]
    points.extend(zip(recall.tolist(), precision.tolist()))
    return points


def auprc(predictions, labels) -> float:
    """Average precision: sum over threshold groups of (R_k - R_{k-1}) * P_k."""
    p, y = _arrays(predictions, labels)
    n_pos = y.sum()
    if n_pos <= 0:
        raise MetricError("precision/recall undefined without positive labels")
    tp, pp = _grouped_counts(p, y)
    steps = np.diff(tp, prepend=0.0)
    if tp.size <= EXACT_GROUPS:
        # exact rational sum, rounded once
        total = sum(Fraction(int(s) * int(t), int(n)) for s, t, n in zip(steps, tp, pp) if s)
        return float(total / int(n_pos))
    return math.fsum((steps * (tp / pp)).tolist()) / float(n_pos)


@dataclass
class MetricsReport:
    nll: float
    auprc: float
    pr_points: list[tuple[float, float]] = field(default_factory=list, repr=False)
    n: int = 0
    positives: int = 0

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("nll", self.nll),
            ("auprc", self.auprc),
            ("n", self.n),
            ("positives", self.positives),
        ]

    def to_dict(self) -> dict:
        return {"nll": self.nll, "auprc": self.auprc, "n": self.n, "positives": self.positives}


def evaluate(predictions, labels) -> MetricsReport:
    p, y = _arrays(predictions, labels)
    return MetricsReport(
        nll=nll(p, y),
        auprc=auprc(p, y),
        pr_points=pr_curve(p, y),
        n=int(p.size),
        positives=int(y.sum()),
    )


def deltas(baseline: MetricsReport, candidate: MetricsReport) -> tuple[float, float]:
    """Percent change (NLL, auPRC) of ``candidate`` over ``baseline``.

    Negative NLL change is an improvement.
    """
    if baseline.nll == 0 or baseline.auprc == 0:
        raise MetricError("baseline metric is zero; percentage change undefined")
    d_nll = 100.0 * (candidate.nll - baseline.nll) / baseline.nll
    d_auprc = 100.0 * (candidate.auprc - baseline.auprc) / baseline.auprc
    return d_nll, d_auprc


def write_report_csv(path: str | Path, report: MetricsReport, extra: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, value in report.rows():
            w.writerow([name, repr(value) if isinstance(value, float) else value])
        for name, value in (extra or {}).items():
            w.writerow([name, repr(value) if isinstance(value, float) else value])


def write_pr_csv(path: str | Path, points) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["recall", "precision"])
        for r, p in points:
            w.writerow([repr(float(r)), repr(float(p))])
