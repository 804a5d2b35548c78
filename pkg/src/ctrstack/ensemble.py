"""Averaging the CTR predictions of several trained models."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .featurepipe import SparseDataset, SparseVector
from .metrics import MetricError, auprc, nll


@dataclass
class EnsembleModel:
    members: list
    weights: np.ndarray | None = None

    def __post_init__(self):
        if not self.members:
            raise ConfigError("an ensemble needs at least one member")
        if self.weights is None:
            self.weights = np.full(len(self.members), 1.0 / len(self.members))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.members),):
            raise ConfigError("one weight per member is required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ConfigError("ensemble weights must be nonnegative and sum to 1")
        configs = {_hash_key(m) for m in self.members}
        if len(configs) > 1:
            raise ConfigError("ensemble members were built with different hash configs")

    def predict(self, data: SparseDataset) -> np.ndarray:
        return combine([m.predict(data) for m in self.members], self.weights)


def _hash_key(model):
    hc = getattr(model, "hash_config", None)
    return None if hc is None else (hc.dimension, hc.seed, hc.algorithm)


def combine(member_predictions: Sequence[np.ndarray], weights=None) -> np.ndarray:
    """Weighted arithmetic mean of per-member probability vectors.

    Weighted terms are summed in ascending order per row, so the result does
    not depend on the order the members are listed in.
    """
    preds = np.asarray(member_predictions, dtype=np.float64)
    if preds.ndim != 2 or preds.shape[0] == 0:
        raise ConfigError("expected a nonempty list of equal-length prediction vectors")
    if weights is None:
        weights = np.full(preds.shape[0], 1.0 / preds.shape[0])
    terms = np.sort(np.asarray(weights, dtype=np.float64)[:, None] * preds, axis=0)
    out = np.zeros(preds.shape[1])
    for row in terms:
        out += row
    # rounding can push the mean a hair outside the members' range
    return np.clip(out, preds.min(axis=0), preds.max(axis=0))


def predict_ensemble(ens: EnsembleModel, x: SparseVector) -> float:
    data = SparseDataset.from_vectors([x], [0.0], x.dim)
    return float(ens.predict(data)[0])


def ensemble_curve(member_predictions: Sequence[np.ndarray], labels) -> list[tuple[int, float, float]]:
    """(k, auPRC, NLL) of the uniform average of the first k members, k = 1..n."""
    if len(member_predictions) == 0:
        raise ConfigError("ensemble curve needs at least one member")
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise MetricError("ensemble curve needs a nonempty test set")
    rows = []
    for k in range(1, len(member_predictions) + 1):
        mean = combine(member_predictions[:k])
        rows.append((k, auprc(mean, labels), nll(mean, labels)))
    return rows


def write_curve_csv(path: str | Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "auprc", "nll"])
        for k, a, n in rows:
            w.writerow([k, repr(float(a)), repr(float(n))])
