"""Feed-forward network with a hashed sparse input layer, relu hidden layers,
inverted dropout and a two-unit softmax output, trained by mini-batch SGD
with l2, learning-rate decay and early stopping on validation NLL.

Input-layer l2 is applied lazily: a row of the first weight matrix is only
shrunk when a batch touches it, by the decay accumulated since its last
touch. ``flush_l2`` brings every row up to date.
"""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix

from . import modelio
from .errors import ConfigError, DimensionError, TrainingError
from .featurepipe import HashConfig, SparseDataset, SparseVector
from .metrics import nll as nll_metric

PRESETS = {
    "10": (10,),
    "25": (25,),
    "50": (50,),
    "100": (100,),
    "50,50": (50, 50),
    "100,100": (100, 100),
}
# Presets in the order the ensemble curve adds them.
PRESET_ORDER = ("10", "25", "50", "100", "50,50", "100,100")

_MAGIC = b"CTRMLP01"
_VERSION = 1


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int = 100_000
    hidden_sizes: tuple[int, ...] = (50,)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.input_dim < 1 or not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ConfigError(f"invalid layer sizes in {self}")
        if self.activation not in ("relu", "linear"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def output_dim(self) -> int:
        return 2

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_sizes, 2)

    def n_parameters(self) -> int:
        s = self.layer_sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))

    @classmethod
    def from_preset(cls, name: str, input_dim: int = 100_000) -> "MlpArchitecture":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_ORDER)}")
        return cls(input_dim, PRESETS[name])


@dataclass(frozen=True)
class MlpTrainConfig:
    learning_rate: float = 0.1
    l2: float = 3e-4
    decay: float = 2e-4
    decay_mode: str = "inverse"
    batch_size: int = 100
    dropout: float = 0.5
    max_epochs: int = 30
    patience: int = 3
    seed: int = 0

    def validate(self):
        if not (self.learning_rate > 0 and self.l2 >= 0 and self.decay >= 0):
            raise ConfigError("need learning_rate > 0, l2 >= 0, decay >= 0")
        if self.batch_size < 1 or not 0 <= self.dropout < 1:
            raise ConfigError("need batch_size >= 1 and dropout in [0, 1)")
        if self.decay_mode not in ("inverse", "linear"):
            raise ConfigError(f"unknown decay_mode {self.decay_mode!r}")
        if self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("need max_epochs >= 0 and patience >= 1")

    def rate(self, instances_seen: int) -> float:
        """Learning rate after ``instances_seen`` training instances."""
        scaled = self.decay * instances_seen / 1e6
        if self.decay_mode == "inverse":
            return self.learning_rate / (1.0 + scaled)
        return max(self.learning_rate - scaled, 0.0)


@dataclass
class MlpModel:
    arch: MlpArchitecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    instances_seen: int = 0
    steps: int = 0
    # per input row: number of steps whose l2 shrinkage has been applied
    reg_steps: np.ndarray | None = None
    hash_config: HashConfig | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.reg_steps is None:
            self.reg_steps = np.zeros(self.arch.input_dim, dtype=np.int64)
        sizes = self.arch.layer_sizes
        for W, b, n_in, n_out in zip(self.weights, self.biases, sizes[:-1], sizes[1:]):
            if W.shape != (n_in, n_out) or b.shape != (n_out,):
                raise DimensionError(f"parameter shapes do not chain through {sizes}")

    @classmethod
    def zeros(cls, arch: MlpArchitecture) -> "MlpModel":
        s = arch.layer_sizes
        return cls(arch, [np.zeros((a, b)) for a, b in zip(s[:-1], s[1:])], [np.zeros(b) for b in s[1:]])

    @classmethod
    def initialize(cls, arch: MlpArchitecture, rng: np.random.Generator) -> "MlpModel":
        """Weights uniform in +-1/sqrt(fan_in), biases zero."""
        s = arch.layer_sizes
        weights = []
        for a, b in zip(s[:-1], s[1:]):
            bound = 1.0 / math.sqrt(a)
            weights.append(rng.uniform(-bound, bound, size=(a, b)))
        return cls(arch, weights, [np.zeros(b) for b in s[1:]])

    def copy(self) -> "MlpModel":
        return copy.deepcopy(self)

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def predict(self, data: SparseDataset, chunk: int = 8192) -> np.ndarray:
        if data.dim != self.arch.input_dim:
            raise DimensionError(f"dataset dimension {data.dim} != input_dim {self.arch.input_dim}")
        X = data.csr()
        out = np.empty(data.n_rows)
        for start in range(0, data.n_rows, chunk):
            h = X[start:start + chunk] @ self.weights[0] + self.biases[0]
            out[start:start + chunk] = _infer_from_first(self, h)
        return out

    # -- persistence ---------------------------------------------------------
    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        sizes = self.arch.layer_sizes
        with open(path, "wb") as fh:
            fh.write(struct.pack("<8sII", _MAGIC, _VERSION, len(sizes)))
            fh.write(struct.pack(f"<{len(sizes)}q", *sizes))
            fh.write(struct.pack("<qq", self.instances_seen, self.steps))
            for W, b in zip(self.weights, self.biases):
                fh.write(W.astype("<f8").tobytes())
                fh.write(b.astype("<f8").tobytes())
        meta = dict(self.meta)
        meta.update(extra_meta or {})
        modelio.dump_json(
            modelio.sidecar_path(path),
            {
                "kind": "mlp",
                "architecture": {
                    "input_dim": self.arch.input_dim,
                    "hidden_sizes": list(self.arch.hidden_sizes),
                    "activation": self.arch.activation,
                },
                "hash_config": self.hash_config.to_dict() if self.hash_config else None,
                "meta": meta,
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "MlpModel":
        r = modelio.Reader(Path(path).read_bytes())
        magic, version, n_sizes = r.unpack("8sII")
        if magic != _MAGIC or version != _VERSION:
            raise ConfigError(f"{path} is not a network model file")
        sizes = r.unpack(f"{n_sizes}q")
        seen, steps = r.unpack("qq")
        weights, biases = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            weights.append(r.array("<f8", a * b).reshape(a, b))
            biases.append(r.array("<f8", b))
        side = modelio.load_json(modelio.sidecar_path(path))
        a = side["architecture"]
        arch = MlpArchitecture(a["input_dim"], tuple(a["hidden_sizes"]), a.get("activation", "relu"))
        hc = side.get("hash_config")
        model = cls(arch, weights, biases, seen, steps, None, HashConfig(**hc) if hc else None,
                    side.get("meta", {}))
        model.reg_steps[:] = steps
        return model


# ---------------------------------------------------------------------------
# forward / backward


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(z, 0.0) if activation == "relu" else z


def _softmax2(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _infer_from_first(model: MlpModel, z: np.ndarray) -> np.ndarray:
    h = _activate(z, model.arch.activation)
    for W, b in zip(model.weights[1:-1], model.biases[1:-1]):
        h = _activate(h @ W + b, model.arch.activation)
    return _softmax2(h @ model.weights[-1] + model.biases[-1])[:, 1]


@dataclass
class _Batch:
    """Rows restricted to the input columns they touch."""

    rows: csr_matrix  # (B, n_touched)
    touched: np.ndarray  # input-row ids, ascending
    labels: np.ndarray

    @classmethod
    def from_csr(cls, X: csr_matrix, labels) -> "_Batch":
        touched, inverse = np.unique(X.indices, return_inverse=True)
        compact = csr_matrix(
            (X.data, inverse.ravel(), X.indptr), shape=(X.shape[0], touched.size)
        )
        return cls(compact, touched, np.asarray(labels, dtype=np.float64))


def _forward(model: MlpModel, batch: _Batch, dropout: float, rng):
    act = model.arch.activation
    pre, hidden, masks = [], [], []
    z = batch.rows @ model.weights[0][batch.touched] + model.biases[0]
    n_hidden = len(model.arch.hidden_sizes)
    h = z
    for layer in range(n_hidden):
        if layer > 0:
            z = h @ model.weights[layer] + model.biases[layer]
        pre.append(z)
        h = _activate(z, act)
        if dropout > 0 and rng is not None:
            mask = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
            h = h * mask
        else:
            mask = None
        masks.append(mask)
        hidden.append(h)
    logits = h @ model.weights[-1] + model.biases[-1]
    probs = _softmax2(logits)
    return probs, {"pre": pre, "hidden": hidden, "masks": masks, "logits": logits, "probs": probs}


def _backward(model: MlpModel, batch: _Batch, cache):
    """Gradients of mean NLL; the first weight gradient covers touched rows only."""
    n = batch.labels.size
    delta = cache["probs"].copy()
    delta[:, 1] -= batch.labels
    delta[:, 0] -= 1.0 - batch.labels
    delta /= n
    n_layers = len(model.weights)
    gw: list = [None] * n_layers
    gb: list = [None] * n_layers
    for layer in range(n_layers - 1, -1, -1):
        gb[layer] = delta.sum(axis=0)
        if layer == 0:
            gw[0] = batch.rows.T @ delta
            break
        h = cache["hidden"][layer - 1]
        gw[layer] = h.T @ delta
        delta = delta @ model.weights[layer].T
        mask = cache["masks"][layer - 1]
        if mask is not None:
            delta = delta * mask
        if model.arch.activation == "relu":
            delta = delta * (cache["pre"][layer - 1] > 0)
    return gw, gb


def _batch_nll(probs: np.ndarray, labels: np.ndarray) -> float:
    return nll_metric(probs[:, 1], labels)


def forward(model: MlpModel, x: SparseVector, mode: str = "infer", rng=None, dropout: float = 0.5):
    """Single-example forward pass; returns (ctr, cache).

    ``mode="train"`` applies inverted dropout with rate ``dropout`` using ``rng``.
    """
    if x.dim != model.arch.input_dim:
        raise DimensionError(f"input dimension {x.dim} != {model.arch.input_dim}")
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    X = csr_matrix((x.values, x.indices, [0, len(x)]), shape=(1, x.dim))
    batch = _Batch.from_csr(X, [0.0])
    if mode == "train":
        if rng is None:
            raise ConfigError("train mode needs an rng for dropout masks")
        probs, cache = _forward(model, batch, dropout, rng)
    else:
        probs, cache = _forward(model, batch, 0.0, None)
    return float(probs[0, 1]), cache


def flush_l2(model: MlpModel, cfg: MlpTrainConfig) -> None:
    """Apply pending lazy l2 shrinkage to every input row."""
    pending = model.steps - model.reg_steps
    if cfg.l2 > 0 and np.any(pending):
        factor = 1.0 - cfg.rate(model.instances_seen) * cfg.l2
        model.weights[0] *= (factor ** pending)[:, None]
    model.reg_steps[:] = model.steps


def sgd_step(model: MlpModel, rows: csr_matrix, labels, cfg: MlpTrainConfig, rng=None):
    """One mini-batch update in place; returns (model, batch NLL)."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise ConfigError("empty batch")
    batch = _Batch.from_csr(rows, labels)
    eta = cfg.rate(model.instances_seen)
    W0 = model.weights[0]
    if cfg.l2 > 0:
        pending = model.steps - model.reg_steps[batch.touched]
        if np.any(pending):
            W0[batch.touched] *= ((1.0 - eta * cfg.l2) ** pending)[:, None]
    probs, cache = _forward(model, batch, cfg.dropout, rng if cfg.dropout > 0 else None)
    gw, gb = _backward(model, batch, cache)
    for g in (*gw, *gb):
        if not np.all(np.isfinite(g)):
            raise TrainingError(
                f"non-finite gradient at step {model.steps} (instances seen "
                f"{model.instances_seen}, learning rate {eta:g})"
            )
    W0[batch.touched] -= eta * (gw[0] + cfg.l2 * W0[batch.touched])
    for layer in range(1, len(model.weights)):
        W = model.weights[layer]
        W -= eta * (gw[layer] + cfg.l2 * W)
    for b, g in zip(model.biases, gb):
        b -= eta * g
    model.steps += 1
    model.reg_steps[batch.touched] = model.steps
    model.instances_seen += labels.size
    return model, _batch_nll(probs, labels)


# ---------------------------------------------------------------------------
# training loop


class EarlyStopping:
    """Tracks the best validation loss; signals a stop after ``patience``
    epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.snapshot = None
        self.bad_epochs = 0

    def update(self, epoch: int, value: float, snapshot) -> bool:
        if value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            self.snapshot = snapshot() if callable(snapshot) else snapshot
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def train(
    train_data: SparseDataset,
    valid_data: SparseDataset,
    arch: MlpArchitecture,
    cfg: MlpTrainConfig = MlpTrainConfig(),
    hash_config: HashConfig | None = None,
    log=None,
) -> MlpModel:
    cfg.validate()
    if train_data.n_rows == 0 or valid_data.n_rows == 0:
        raise ConfigError("training and validation splits must be nonempty")
    if train_data.dim != arch.input_dim or valid_data.dim != arch.input_dim:
        raise DimensionError("dataset dimension does not match the architecture")
    init_rng, shuffle_rng, dropout_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3)
    )
    model = MlpModel.initialize(arch, init_rng)
    model.hash_config = hash_config
    X, y = train_data.csr(), train_data.labels
    stopper = EarlyStopping(cfg.patience)
    history = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(train_data.n_rows)
        for start in range(0, order.size, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            sgd_step(model, X[rows], y[rows], cfg, dropout_rng)
        flush_l2(model, cfg)
        valid_nll = nll_metric(model.predict(valid_data), valid_data.labels)
        history.append(valid_nll)
        if log is not None:
            log(f"epoch {epoch}: valid nll {valid_nll:.6f}")
        if stopper.update(epoch, valid_nll, model.copy):
            break
    best = stopper.snapshot if stopper.snapshot is not None else model
    best.meta = {
        "train_config": asdict(cfg),
        "best_valid_nll": None if stopper.snapshot is None else stopper.best,
        "best_epoch": stopper.best_epoch,
        "epochs_run": epoch if cfg.max_epochs else 0,
        "valid_history": history,
    }
    best.hash_config = hash_config
    return best


# ---------------------------------------------------------------------------
# gradient checking


def loss_and_gradients(model: MlpModel, X: csr_matrix, labels, l2: float = 0.0):
    """Mean NLL + l2/2 * sum of squared weights, without dropout, with dense
    gradients for every parameter (ordered like ``parameters()``)."""
    batch = _Batch.from_csr(X, labels)
    probs, cache = _forward(model, batch, 0.0, None)
    gw, gb = _backward(model, batch, cache)
    dense0 = np.zeros_like(model.weights[0])
    dense0[batch.touched] = gw[0]
    gw[0] = dense0
    loss = _batch_nll_exact(probs, batch.labels)
    for layer, W in enumerate(model.weights):
        loss += 0.5 * l2 * float(np.sum(W * W))
        gw[layer] = gw[layer] + l2 * W
    return loss, [g for pair in zip(gw, gb) for g in pair]


def _batch_nll_exact(probs, labels):
    p = probs[np.arange(labels.size), labels.astype(np.int64)]
    return float(-np.mean(np.log(p)))


def _relative_error(a: np.ndarray, b: np.ndarray, floor: float) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    arch: MlpArchitecture,
    seed: int,
    batch_size: int = 8,
    l2: float = 1e-3,
    step: float | None = None,
    floor: float = 1e-7,
    corrupt: bool = False,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Numeric gradients use the fourth-order five-point stencil. The default
    step is 1e-3 for linear nets and 1e-4 for relu nets, which keeps
    perturbed pre-activations on the same side of their kink. Inputs are
    resampled until no relu pre-activation lies within 1e-3 of the kink.
    ``corrupt=True`` flips the sign of the largest analytic gradient entry,
    which the check must flag.
    """
    if step is None:
        step = 1e-3 if arch.activation == "linear" else 1e-4
    if arch.n_parameters() > 10_000:
        raise ConfigError("grad_check is meant for architectures with <= 10,000 parameters")
    rng = np.random.default_rng(seed)
    model = MlpModel.initialize(arch, rng)
    for W in model.weights:
        W *= 3.0
    for b in model.biases:
        b[:] = rng.uniform(-0.3, 0.3, size=b.shape)
    labels = (rng.random(batch_size) < 0.5).astype(np.float64)
    for _ in range(1000):
        X = _random_sparse_batch(rng, batch_size, arch.input_dim)
        if arch.activation == "linear" or _min_kink_distance(model, X) > 1e-3:
            break
    else:
        raise TrainingError("could not find inputs away from relu kinks")

    _, grads = loss_and_gradients(model, X, labels, l2)
    if corrupt:
        flat = [g.ravel() for g in grads]
        which = int(np.argmax([np.max(np.abs(f)) if f.size else 0 for f in flat]))
        k = int(np.argmax(np.abs(flat[which])))
        grads[which] = grads[which].copy()
        grads[which].ravel()[k] *= -1.0
    worst = 0.0
    for param, grad in zip(model.parameters(), grads):
        flat = param.ravel()
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            f = {}
            for k in (-2, -1, 1, 2):
                flat[i] = orig + k * step
                f[k], _ = loss_and_gradients(model, X, labels, l2)
            flat[i] = orig
            numeric[i] = (f[-2] - 8.0 * f[-1] + 8.0 * f[1] - f[2]) / (12.0 * step)
        err = _relative_error(grad.ravel(), numeric, floor)
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst


def _random_sparse_batch(rng, n_rows: int, dim: int) -> csr_matrix:
    indptr, indices, values = [0], [], []
    for _ in range(n_rows):
        k = int(rng.integers(1, min(dim, 6) + 1))
        idx = np.sort(rng.choice(dim, size=k, replace=False))
        indices.extend(idx.tolist())
        values.extend(rng.uniform(0.5, 2.0, size=k).tolist())
        indptr.append(len(indices))
    return csr_matrix((values, indices, indptr), shape=(n_rows, dim))


def _min_kink_distance(model: MlpModel, X: csr_matrix) -> float:
    batch = _Batch.from_csr(X, np.zeros(X.shape[0]))
    _, cache = _forward(model, batch, 0.0, None)
    if not cache["pre"]:
        return math.inf
    return min(float(np.min(np.abs(z))) for z in cache["pre"])


def parse_hidden(spec: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(s) for s in spec.split(","))
    except ValueError:
        raise ConfigError(f"bad hidden-layer spec {spec!r}") from None
    if not sizes or any(s < 1 for s in sizes):
        raise ConfigError(f"bad hidden-layer spec {spec!r}")
    return sizes


def hidden_label(sizes: Sequence[int]) -> str:
    return ",".join(str(s) for s in sizes)
