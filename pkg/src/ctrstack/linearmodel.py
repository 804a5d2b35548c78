"""Logistic-regression baseline over hashed sparse features, trained with
L-BFGS (two-loop recursion, Armijo backtracking) or mini-batch SGD."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit

from . import modelio
from .errors import ConfigError, DimensionError, OptimizationError
from .featurepipe import HashConfig, SparseDataset, SparseVector

EPS = 1e-12
_MAGIC = b"CTRLR001"
_VERSION = 1


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float = 0.0
    hash_config: HashConfig | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, dim: int, hash_config: HashConfig | None = None) -> "LinearModel":
        return cls(np.zeros(dim), 0.0, hash_config)

    @property
    def dim(self) -> int:
        return int(self.weights.size)

    def decision(self, data: SparseDataset) -> np.ndarray:
        if data.dim != self.dim:
            raise DimensionError(f"dataset dimension {data.dim} != model dimension {self.dim}")
        return data.csr() @ self.weights + self.bias

    def predict(self, data: SparseDataset) -> np.ndarray:
        return np.clip(expit(self.decision(data)), EPS, 1.0 - EPS)

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<8sIqd", _MAGIC, _VERSION, self.dim, self.bias))
            fh.write(self.weights.astype("<f8").tobytes())
        meta = dict(self.meta)
        meta.update(extra_meta or {})
        modelio.dump_json(
            modelio.sidecar_path(path),
            {
                "kind": "lr",
                "hash_config": self.hash_config.to_dict() if self.hash_config else None,
                "meta": meta,
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "LinearModel":
        r = modelio.Reader(Path(path).read_bytes())
        magic, version, dim, bias = r.unpack("8sIqd")
        if magic != _MAGIC or version != _VERSION:
            raise ConfigError(f"{path} is not a linear model file")
        weights = r.array("<f8", dim)
        side = modelio.load_json(modelio.sidecar_path(path))
        hc = side.get("hash_config")
        return cls(weights, bias, HashConfig(**hc) if hc else None, side.get("meta", {}))


def predict_lr(model: LinearModel, x: SparseVector) -> float:
    if x.dim != model.dim or (len(x) and x.indices[-1] >= model.dim):
        raise DimensionError(f"input dimension {x.dim} does not match model dimension {model.dim}")
    z = float(np.dot(model.weights[x.indices], x.values)) + model.bias
    return min(max(float(expit(z)), EPS), 1.0 - EPS)


def _pack(model: LinearModel) -> np.ndarray:
    return np.append(model.weights, model.bias)


def nll_objective(model: LinearModel, data: SparseDataset, lam: float):
    """Mean NLL plus (lam/N)/2 * ||w||^2; returns (loss, gradient over [w, b])."""
    return _objective(_pack(model), data.csr(), data.labels, lam)


def _objective(theta: np.ndarray, X, y: np.ndarray, lam: float):
    n = y.size
    if n == 0:
        raise ConfigError("objective needs a nonempty dataset")
    w, b = theta[:-1], theta[-1]
    z = X @ w + b
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * (lam / n) * np.dot(w, w)
    r = (expit(z) - y) / n
    grad = np.empty_like(theta)
    grad[:-1] = X.T @ r + (lam / n) * w
    grad[-1] = r.sum()
    return float(loss), grad


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    l2: float = 50.0
    tolerance: float = 1e-5
    max_iterations: int = 200
    armijo_c1: float = 1e-4
    backtrack: float = 0.5

    def validate(self):
        if self.memory < 1:
            raise ConfigError("L-BFGS memory must be >= 1")
        if self.tolerance <= 0 or self.l2 < 0:
            raise ConfigError("tolerance must be > 0 and l2 >= 0")
        if not 0 < self.backtrack < 1 or not 0 < self.armijo_c1 < 1:
            raise ConfigError("line-search constants must lie in (0, 1)")


@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    iterations: int
    history: list[float]
    converged: bool


def _two_loop(g, s_list, y_list, rho_list):
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rho_list)):
        a = rho * np.dot(s, q)
        alphas.append(a)
        q -= a * y
    if s_list:
        q *= np.dot(s_list[-1], y_list[-1]) / np.dot(y_list[-1], y_list[-1])
    for s, y, rho, a in zip(s_list, y_list, rho_list, reversed(alphas)):
        beta = rho * np.dot(y, q)
        q += (a - beta) * s
    return -q


def lbfgs_minimize(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    cfg: LbfgsConfig = LbfgsConfig(),
) -> LbfgsResult:
    """Minimise a smooth function given as ``x -> (value, gradient)``.

    Stops when the relative decrease of the objective drops below
    ``cfg.tolerance`` or after ``cfg.max_iterations`` iterations.
    """
    cfg.validate()
    x = np.array(x0, dtype=np.float64)
    f, g = fun(x)
    if not math.isfinite(f):
        raise OptimizationError("non-finite objective at the starting point (iteration 0)")
    s_list, y_list, rho_list = [], [], []
    history = [f]
    converged = False
    it = 0
    while it < cfg.max_iterations:
        if not np.any(g):
            converged = True
            break
        it += 1
        d = _two_loop(g, s_list, y_list, rho_list)
        slope = np.dot(g, d)
        if slope >= 0:
            s_list, y_list, rho_list = [], [], []
            d = -g
            slope = -np.dot(g, g)
        t = 1.0 if s_list else min(1.0, 1.0 / np.linalg.norm(g))
        for _ in range(60):
            x_new = x + t * d
            f_new, g_new = fun(x_new)
            if math.isfinite(f_new) and f_new <= f + cfg.armijo_c1 * t * slope:
                break
            t *= cfg.backtrack
        else:
            # no representable decrease along d: we are at numerical optimum
            converged = True
            break
        if not (math.isfinite(f_new) and np.all(np.isfinite(g_new))):
            raise OptimizationError(f"non-finite objective at iteration {it}")
        s, y = x_new - x, g_new - g
        sy = np.dot(s, y)
        if sy > 1e-12 * np.dot(y, y):
            s_list.append(s)
            y_list.append(y)
            rho_list.append(1.0 / sy)
            if len(s_list) > cfg.memory:
                s_list.pop(0), y_list.pop(0), rho_list.pop(0)
        decrease = (f - f_new) / max(abs(f), abs(f_new), 1e-300)
        x, f, g = x_new, f_new, g_new
        history.append(f)
        if decrease < cfg.tolerance:
            converged = True
            break
    return LbfgsResult(x, f, it, history, converged)


def train_lbfgs(
    train: SparseDataset,
    cfg: LbfgsConfig = LbfgsConfig(),
    init: LinearModel | None = None,
    hash_config: HashConfig | None = None,
) -> LinearModel:
    if train.n_rows == 0:
        raise ConfigError("cannot train on an empty dataset")
    X, y = train.csr(), train.labels
    x0 = _pack(init) if init is not None else np.zeros(train.dim + 1)
    res = lbfgs_minimize(lambda th: _objective(th, X, y, cfg.l2), x0, cfg)
    return LinearModel(
        res.x[:-1].copy(),
        float(res.x[-1]),
        hash_config,
        {
            "optimizer": "lbfgs",
            "l2": cfg.l2,
            "iterations": res.iterations,
            "objective": res.fun,
            "converged": res.converged,
        },
    )


@dataclass(frozen=True)
class SgdLrConfig:
    learning_rate: float = 0.5
    l2: float = 0.0
    batch_size: int = 100
    epochs: int = 5
    seed: int = 0

    def validate(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0 or self.l2 < 0:
            raise ConfigError(f"invalid SGD config {self}")


def train_sgd_lr(
    train: SparseDataset, cfg: SgdLrConfig = SgdLrConfig(), hash_config: HashConfig | None = None
) -> LinearModel:
    """Mini-batch SGD on mean NLL; l2 shrinks only the coordinates a batch touches."""
    cfg.validate()
    if train.n_rows == 0:
        raise ConfigError("cannot train on an empty dataset")
    X, y = train.csr(), train.labels
    w = np.zeros(train.dim)
    b = 0.0
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        order = rng.permutation(train.n_rows)
        for start in range(0, order.size, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            Xb = X[rows]
            resid = y[rows] - expit(Xb @ w + b)
            touched = np.unique(Xb.indices)
            step = (Xb.T @ resid) / rows.size
            w[touched] += cfg.learning_rate * (step[touched] - cfg.l2 * w[touched])
            b += cfg.learning_rate * resid.mean()
            if not (np.isfinite(b) and np.all(np.isfinite(w[touched]))):
                raise OptimizationError("non-finite parameters during SGD")
    return LinearModel(w, float(b), hash_config, {"optimizer": "sgd", "l2": cfg.l2})
