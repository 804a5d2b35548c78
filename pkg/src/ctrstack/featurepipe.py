"""Frequency pruning and the hashing trick: impression records to sparse vectors."""

from __future__ import annotations

import functools
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .clicklog import ImpressionRecord, NamespaceSchema
from .errors import ConfigError, DimensionError, SchemaError

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def qualify(namespace: str, feature: str) -> str:
    return f"{namespace}^{feature}"


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class HashConfig:
    dimension: int = 100_000
    seed: int = 0
    algorithm: str = "fnv1a64-xor-seed-mod"

    def __post_init__(self):
        if self.dimension < 2:
            raise ConfigError(f"hash dimension must be >= 2, got {self.dimension}")
        if self.algorithm != "fnv1a64-xor-seed-mod":
            raise ConfigError(f"unsupported hash algorithm {self.algorithm!r}")

    def index(self, key: str) -> int:
        return _hash_index(key, self.dimension, self.seed & _MASK64)

    def to_dict(self) -> dict:
        return {"dimension": self.dimension, "seed": self.seed, "algorithm": self.algorithm}


@functools.lru_cache(maxsize=1 << 20)
def _hash_index(key: str, dimension: int, seed: int) -> int:
    return (fnv1a64(key.encode("utf-8")) ^ seed) % dimension


@dataclass(frozen=True)
class PruneConfig:
    threshold: int = 10

    def __post_init__(self):
        if self.threshold < 1:
            raise ConfigError(f"prune threshold must be >= 1, got {self.threshold}")


@dataclass
class VocabStats:
    counts: Counter = field(default_factory=Counter)

    @property
    def total_unique(self) -> int:
        return len(self.counts)

    def merge(self, other: "VocabStats") -> "VocabStats":
        """Combine per-shard statistics by summing counts."""
        merged = Counter(self.counts)
        merged.update(other.counts)
        return VocabStats(merged)


def count_features(records: Iterable[ImpressionRecord]) -> VocabStats:
    counts: Counter = Counter()
    for rec in records:
        for ns, feats in rec.id_features.items():
            for f in feats:
                counts[qualify(ns, f)] += 1
    return VocabStats(counts)


def prune(stats: VocabStats, cfg: PruneConfig) -> frozenset[str]:
    return frozenset(k for k, c in stats.counts.items() if c >= cfg.threshold)


def write_counts_tsv(path: str | Path, counts: dict[str, int]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(counts):
            fh.write(f"{key}\t{counts[key]}\n")


def read_counts_tsv(path: str | Path) -> dict[str, int]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                key, count = line.rstrip("\n").rsplit("\t", 1)
                out[key] = int(count)
    return out


@dataclass
class SparseVector:
    indices: np.ndarray
    values: np.ndarray
    dim: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.indices.shape != self.values.shape:
            raise DimensionError("indices and values differ in length")
        if self.indices.size:
            if self.indices[0] < 0 or self.indices[-1] >= self.dim:
                raise DimensionError(f"index out of range for dimension {self.dim}")
            if np.any(np.diff(self.indices) <= 0):
                raise DimensionError("indices must be strictly increasing")

    def __len__(self):
        return int(self.indices.size)

    def __eq__(self, other):
        if not isinstance(other, SparseVector):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    @classmethod
    def from_dict(cls, entries: dict[int, float], dim: int) -> "SparseVector":
        keys = sorted(k for k, v in entries.items() if v != 0)
        return cls(np.array(keys, dtype=np.int64), np.array([entries[k] for k in keys]), dim)


def _merge(indices: list[int], dim: int) -> SparseVector:
    if not indices:
        return SparseVector(np.empty(0, np.int64), np.empty(0), dim)
    uniq, counts = np.unique(np.asarray(indices, dtype=np.int64), return_counts=True)
    return SparseVector(uniq, counts.astype(np.float64), dim)


def _kept_indices(record: ImpressionRecord, kept, hash_cfg: HashConfig) -> list[int]:
    out = []
    dim, seed = hash_cfg.dimension, hash_cfg.seed & _MASK64
    for ns, feats in record.id_features.items():
        for f in feats:
            key = f"{ns}^{f}"
            if kept is None or key in kept:
                out.append(_hash_index(key, dim, seed))
    return out


def vectorize(record: ImpressionRecord, kept, hash_cfg: HashConfig) -> SparseVector:
    """Hash every kept feature occurrence; colliding occurrences add up.

    ``kept=None`` keeps everything (equivalent to pruning at threshold 1).
    """
    return _merge(_kept_indices(record, kept, hash_cfg), hash_cfg.dimension)


def cross_quadratic(
    record: ImpressionRecord, pairs: Sequence[tuple[str, str]], schema: NamespaceSchema
) -> ImpressionRecord:
    """Append an ``A*B`` namespace of ``fa&fb`` crosses for every namespace pair."""
    feats = {ns: list(v) for ns, v in record.id_features.items()}
    for a, b in pairs:
        for ns in (a, b):
            if ns not in schema.names:
                raise SchemaError(f"unknown namespace {ns!r} in quadratic pair")
        feats[f"{a}*{b}"] = [
            f"{fa}&{fb}" for fa in record.features(a) for fb in record.features(b)
        ]
    return ImpressionRecord(record.label, record.bid, feats, record.real_features)


def quadratic_schema(schema: NamespaceSchema, pairs: Sequence[tuple[str, str]]) -> NamespaceSchema:
    return schema.with_namespaces(f"{a}*{b}" for a, b in pairs)


# ---------------------------------------------------------------------------
# row-compressed datasets

_DATASET_MAGIC = b"CTRSDS01"


@dataclass
class SparseDataset:
    """CSR rows of hashed features with labels and optional dense side data."""

    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    labels: np.ndarray
    dim: int
    dense: np.ndarray | None = None
    oracle: np.ndarray | None = None

    def __post_init__(self):
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.indptr.size != self.labels.size + 1:
            raise DimensionError("indptr length must be n_rows + 1")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.dim):
            raise DimensionError(f"feature index out of range for dimension {self.dim}")
        if self.dense is None:
            self.dense = np.zeros((self.n_rows, 0))
        dense = np.asarray(self.dense, dtype=np.float64)
        width = dense.shape[1] if dense.ndim == 2 else (dense.size // max(self.n_rows, 1))
        self.dense = dense.reshape(self.n_rows, width)
        if self.oracle is not None:
            self.oracle = np.asarray(self.oracle, dtype=np.float64)

    @property
    def n_rows(self) -> int:
        return int(self.labels.size)

    def __len__(self):
        return self.n_rows

    def row(self, i: int) -> SparseVector:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return SparseVector(self.indices[lo:hi], self.values[lo:hi], self.dim)

    def csr(self):
        from scipy.sparse import csr_matrix

        return csr_matrix(
            (self.values, self.indices, self.indptr), shape=(self.n_rows, self.dim)
        )

    def subset(self, rows) -> "SparseDataset":
        rows = np.asarray(rows, dtype=np.int64)
        starts, ends = self.indptr[rows], self.indptr[rows + 1]
        lengths = ends - starts
        indptr = np.concatenate([[0], np.cumsum(lengths)])
        gather = (
            np.concatenate([np.arange(s, e) for s, e in zip(starts, ends)])
            if rows.size
            else np.empty(0, np.int64)
        ).astype(np.int64)
        return SparseDataset(
            indptr,
            self.indices[gather],
            self.values[gather],
            self.labels[rows],
            self.dim,
            self.dense[rows],
            None if self.oracle is None else self.oracle[rows],
        )

    @classmethod
    def from_vectors(cls, vectors: Sequence[SparseVector], labels, dim: int, dense=None, oracle=None):
        lengths = [len(v) for v in vectors]
        indptr = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
        if vectors:
            indices = np.concatenate([v.indices for v in vectors])
            values = np.concatenate([v.values for v in vectors])
        else:
            indices, values = np.empty(0, np.int64), np.empty(0)
        return cls(indptr, indices, values, labels, dim, dense, oracle)

    def save(self, path: str | Path) -> None:
        """Little-endian binary: magic, counts, then each array in order."""
        has_oracle = self.oracle is not None
        header = struct.pack(
            "<8sqqqqq", _DATASET_MAGIC, self.n_rows, self.dim, self.indices.size,
            self.dense.shape[1], int(has_oracle),
        )
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.indptr.astype("<i8").tobytes())
            fh.write(self.indices.astype("<i8").tobytes())
            fh.write(self.values.astype("<f8").tobytes())
            fh.write(self.labels.astype("<f8").tobytes())
            fh.write(self.dense.astype("<f8").tobytes())
            if has_oracle:
                fh.write(self.oracle.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "SparseDataset":
        buf = Path(path).read_bytes()
        magic, n, dim, nnz, dense_dim, has_oracle = struct.unpack_from("<8sqqqqq", buf)
        if magic != _DATASET_MAGIC:
            raise DimensionError(f"{path} is not a sparse dataset file")
        off = struct.calcsize("<8sqqqqq")

        def take(dtype, count):
            nonlocal off
            arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).copy()
            off += arr.nbytes
            return arr

        indptr = take("<i8", n + 1)
        indices = take("<i8", nnz)
        values = take("<f8", nnz)
        labels = take("<f8", n)
        dense = take("<f8", n * dense_dim).reshape(n, dense_dim)
        oracle = take("<f8", n) if has_oracle else None
        return cls(indptr, indices, values, labels, dim, dense, oracle)


def vectorize_records(
    records: Sequence[ImpressionRecord], kept, hash_cfg: HashConfig, oracle=None
) -> SparseDataset:
    vectors = [vectorize(r, kept, hash_cfg) for r in records]
    labels = [r.label for r in records]
    dense = np.array([r.real_features for r in records], dtype=np.float64).reshape(len(records), -1)
    return SparseDataset.from_vectors(vectors, labels, hash_cfg.dimension, dense, oracle)
