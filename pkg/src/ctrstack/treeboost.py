"""Gradient-boosted oblivious decision trees on dense features, with logistic
loss and Newton leaf values. Serves as the second stage that consumes
first-stage CTR predictions as extra columns."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import modelio
from .errors import ConfigError, DimensionError
from .metrics import nll as nll_metric

_MAGIC = b"CTRGBT01"
_VERSION = 1


@dataclass(frozen=True)
class BoostConfig:
    n_trees: int = 100
    depth: int = 6
    shrinkage: float = 0.1
    bins: int = 32
    leaf_l2: float = 1.0
    seed: int = 0

    def validate(self):
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if not 0 < self.shrinkage <= 1:
            raise ConfigError("shrinkage must lie in (0, 1]")
        if self.bins < 2:
            raise ConfigError("bins must be >= 2")
        if self.leaf_l2 < 0:
            raise ConfigError("leaf_l2 must be >= 0")


def _check_matrix(matrix) -> np.ndarray:
    X = np.asarray(matrix, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError("expected a 2-D feature matrix")
    if np.isnan(X).any():
        raise ConfigError("missing values (NaN) are not supported in dense features")
    return X


def build_bins(matrix, bins: int) -> list[np.ndarray]:
    """Split thresholds per column at the empirical quantiles k/bins.

    A row goes left at threshold t when its value is <= t. Thresholds equal
    to the column maximum split nothing and are dropped, so constant
    columns get none.
    """
    X = _check_matrix(matrix)
    if X.shape[0] < 1:
        raise DimensionError("build_bins needs at least one row")
    n = X.shape[0]
    positions = (np.arange(1, bins) * (n - 1)) // bins
    out = []
    for col in X.T:
        v = np.sort(col)
        thr = np.unique(v[positions])
        out.append(thr[thr < v[-1]])
    return out


def bin_codes(matrix, thresholds: Sequence[np.ndarray]) -> np.ndarray:
    """Per cell, the number of that column's thresholds strictly below the value."""
    X = _check_matrix(matrix)
    codes = np.empty(X.shape, dtype=np.int64)
    for j, thr in enumerate(thresholds):
        codes[:, j] = np.searchsorted(thr, X[:, j], side="left")
    return codes


@dataclass
class ObliviousTree:
    features: list[int]
    thresholds: list[float]
    leaf_values: np.ndarray

    @property
    def depth(self) -> int:
        return len(self.features)

    def leaf_index(self, matrix) -> np.ndarray:
        X = np.asarray(matrix, dtype=np.float64)
        idx = np.zeros(X.shape[0], dtype=np.int64)
        for f, t in zip(self.features, self.thresholds):
            idx = (idx << 1) | (X[:, f] > t)
        return idx

    def predict(self, matrix) -> np.ndarray:
        return self.leaf_values[self.leaf_index(matrix)]


def _gain_terms(G, H, lam):
    return G * G / (H + lam)


def fit_tree(
    gradients,
    hessians,
    matrix,
    thresholds: Sequence[np.ndarray],
    depth: int,
    leaf_l2: float,
    codes: np.ndarray | None = None,
) -> ObliviousTree:
    """Greedy level-wise oblivious tree maximising the second-order gain.

    Ties go to the lowest feature index, then the lowest threshold. If no
    split has positive gain at the root the result is a single leaf.
    """
    g = np.asarray(gradients, dtype=np.float64)
    h = np.asarray(hessians, dtype=np.float64)
    if np.any(h < 0):
        raise ConfigError("hessians must be nonnegative")
    if codes is None:
        codes = bin_codes(matrix, thresholds)
    n = g.size
    node = np.zeros(n, dtype=np.int64)
    features, chosen = [], []
    for level in range(depth):
        n_nodes = 1 << level
        G = np.bincount(node, weights=g, minlength=n_nodes)
        H = np.bincount(node, weights=h, minlength=n_nodes)
        parent = _gain_terms(G, H, leaf_l2).sum()
        best_gain, best = -math.inf, None
        for f, thr in enumerate(thresholds):
            k = thr.size
            if k == 0:
                continue
            key = node * (k + 1) + codes[:, f]
            GL = np.bincount(key, weights=g, minlength=n_nodes * (k + 1)).reshape(n_nodes, k + 1)
            HL = np.bincount(key, weights=h, minlength=n_nodes * (k + 1)).reshape(n_nodes, k + 1)
            GL = np.cumsum(GL, axis=1)[:, :k]
            HL = np.cumsum(HL, axis=1)[:, :k]
            GR, HR = G[:, None] - GL, H[:, None] - HL
            gain = (_gain_terms(GL, HL, leaf_l2) + _gain_terms(GR, HR, leaf_l2)).sum(axis=0) - parent
            j = int(np.argmax(gain))
            if gain[j] > best_gain:
                best_gain, best = gain[j], (f, j)
        if best is None or (level == 0 and not best_gain > 0):
            break
        f, j = best
        features.append(f)
        chosen.append(float(thresholds[f][j]))
        node = (node << 1) | (codes[:, f] > j)
    n_leaves = 1 << len(features)
    G = np.bincount(node, weights=g, minlength=n_leaves)
    H = np.bincount(node, weights=h, minlength=n_leaves)
    with np.errstate(invalid="ignore", divide="ignore"):
        leaves = np.where(H + leaf_l2 > 0, -G / (H + leaf_l2), 0.0)
    return ObliviousTree(features, chosen, leaves)


@dataclass
class GbdtModel:
    f0: float
    trees: list[ObliviousTree] = field(default_factory=list)
    shrinkage: float = 0.1
    n_features: int = 0
    columns: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def decision(self, matrix) -> np.ndarray:
        X = _check_matrix(matrix)
        if X.shape[1] != self.n_features:
            raise DimensionError(f"expected {self.n_features} columns, got {X.shape[1]}")
        F = np.full(X.shape[0], self.f0)
        for tree in self.trees:
            F += self.shrinkage * tree.predict(X)
        return F

    def predict(self, matrix) -> np.ndarray:
        return expit(self.decision(matrix))

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<8sIddqq", _MAGIC, _VERSION, self.f0, self.shrinkage,
                                 self.n_features, len(self.trees)))
            for t in self.trees:
                fh.write(struct.pack("<q", t.depth))
                fh.write(np.asarray(t.features, dtype="<i8").tobytes())
                fh.write(np.asarray(t.thresholds, dtype="<f8").tobytes())
                fh.write(np.asarray(t.leaf_values, dtype="<f8").tobytes())
        meta = dict(self.meta)
        meta.update(extra_meta or {})
        modelio.dump_json(
            modelio.sidecar_path(path),
            {"kind": "gbdt", "columns": list(self.columns), "meta": meta},
        )

    @classmethod
    def load(cls, path: str | Path) -> "GbdtModel":
        r = modelio.Reader(Path(path).read_bytes())
        magic, version, f0, nu, n_features, n_trees = r.unpack("8sIddqq")
        if magic != _MAGIC or version != _VERSION:
            raise ConfigError(f"{path} is not a boosted-tree model file")
        trees = []
        for _ in range(n_trees):
            (d,) = r.unpack("q")
            feats = r.array("<i8", d).tolist()
            thr = r.array("<f8", d).tolist()
            leaves = r.array("<f8", 1 << d)
            trees.append(ObliviousTree(feats, thr, leaves))
        side = modelio.load_json(modelio.sidecar_path(path))
        return cls(f0, trees, nu, n_features, side.get("columns", []), side.get("meta", {}))


def predict_gbdt(model: GbdtModel, row) -> float:
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1 or row.size != model.n_features:
        raise DimensionError(f"expected a row of {model.n_features} values")
    return float(model.predict(row[None, :])[0])


def train_gbdt(matrix, labels, cfg: BoostConfig = BoostConfig(), columns: Sequence[str] | None = None) -> GbdtModel:
    """Boost oblivious trees on logistic loss from the log-odds of the base rate."""
    cfg.validate()
    X = _check_matrix(matrix)
    y = np.asarray(labels, dtype=np.float64)
    if X.shape[0] == 0 or X.shape[0] != y.size:
        raise DimensionError("matrix and labels must be nonempty and aligned")
    p_bar = y.mean()
    if p_bar <= 0 or p_bar >= 1:
        raise ConfigError("labels contain a single class; initial log-odds would be infinite")
    f0 = math.log(p_bar / (1.0 - p_bar))
    thresholds = build_bins(X, cfg.bins)
    codes = bin_codes(X, thresholds)
    F = np.full(y.size, f0)
    trees = []
    history = [nll_metric(expit(F), y)]
    for _ in range(cfg.n_trees):
        p = expit(F)
        tree = fit_tree(p - y, p * (1.0 - p), X, thresholds, cfg.depth, cfg.leaf_l2, codes)
        trees.append(tree)
        F += cfg.shrinkage * tree.predict(X)
        history.append(nll_metric(expit(F), y))
    names = list(columns) if columns is not None else [f"f{j}" for j in range(X.shape[1])]
    return GbdtModel(
        f0, trees, cfg.shrinkage, X.shape[1], names,
        {"boost_config": asdict(cfg), "train_nll_history": history,
         "note": "generic oblivious-tree booster; defaults are stand-ins, not tuned values"},
    )


@dataclass
class StackedInput:
    matrix: np.ndarray
    columns: list[str]

    def write_csv(self, path: str | Path, labels=None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns + (["label"] if labels is not None else []))
            for i, row in enumerate(self.matrix):
                vals = [repr(float(v)) for v in row]
                if labels is not None:
                    vals.append(str(int(labels[i])))
                w.writerow(vals)

    @classmethod
    def read_csv(cls, path: str | Path):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        data = np.array(body, dtype=np.float64).reshape(len(body), len(header))
        if header and header[-1] == "label":
            return cls(data[:, :-1], header[:-1]), data[:, -1]
        return cls(data, header), None


def stack(dense, outputs: Sequence[tuple[str, np.ndarray]], base_columns: Sequence[str] | None = None) -> StackedInput:
    """Append named first-stage probability columns to the dense features."""
    X = _check_matrix(dense)
    names = list(base_columns) if base_columns is not None else [f"f{j}" for j in range(X.shape[1])]
    if len(names) != X.shape[1]:
        raise DimensionError("base column names do not match the matrix width")
    cols = [X]
    for name, values in outputs:
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (X.shape[0],):
            raise DimensionError(f"column {name!r} has {v.size} values for {X.shape[0]} rows")
        if np.any((v <= 0) | (v >= 1)):
            raise ConfigError(f"column {name!r} must hold probabilities in (0, 1)")
        cols.append(v[:, None])
        names.append(name)
    return StackedInput(np.hstack(cols), names)
