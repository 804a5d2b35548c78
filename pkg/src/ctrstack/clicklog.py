"""Impression records, the namespaced click-log text format, a synthetic
click-log generator with a known CTR oracle, and train/valid/test splitting.

Line grammar::

    <label> <bid> |<ns> <feat> <feat> ... |<ns> <feat> ... # <f1>,<f2>,...

The ``#`` tail carrying dense floats is optional.
"""

from __future__ import annotations

import gzip
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ParseError, SchemaError, SplitError

DEFAULT_NAMESPACES = (
    "user_id",
    "region_id",
    "ad_id",
    "campaign_id",
    "domain_id",
    "ad_title_words",
    "ad_body_words",
    "ad_position",
    "ad_keywords",
    "query_words",
)

# Dense columns emitted by ``generate`` (in this order).
GENERATED_REAL_FEATURES = (
    "user_hist_ctr",
    "ad_hist_ctr",
    "query_hist_ctr",
    "position",
    "bid",
)


@dataclass(frozen=True)
class NamespaceSchema:
    names: tuple[str, ...] = DEFAULT_NAMESPACES
    real_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise SchemaError(f"duplicate namespace names in {self.names}")
        for name in self.names:
            if not name or _bad_token(name):
                raise SchemaError(f"invalid namespace name {name!r}")
        if self.real_dim < 0:
            raise SchemaError("real_dim must be >= 0")

    def with_namespaces(self, extra: Iterable[str]) -> "NamespaceSchema":
        extra = [n for n in extra if n not in self.names]
        return NamespaceSchema(self.names + tuple(extra), self.real_dim)


def generator_schema() -> NamespaceSchema:
    """Schema matching what :func:`generate` emits by default."""
    return NamespaceSchema(DEFAULT_NAMESPACES, len(GENERATED_REAL_FEATURES))


@dataclass
class ImpressionRecord:
    label: int
    bid: float
    id_features: dict[str, list[str]] = field(default_factory=dict)
    real_features: tuple[float, ...] = ()

    def features(self, namespace: str) -> list[str]:
        return self.id_features.get(namespace, [])

    def __eq__(self, other):
        if not isinstance(other, ImpressionRecord):
            return NotImplemented
        # absent and empty namespaces are the same thing
        mine = {k: v for k, v in self.id_features.items() if v}
        theirs = {k: v for k, v in other.id_features.items() if v}
        return (
            self.label == other.label
            and self.bid == other.bid
            and mine == theirs
            and tuple(self.real_features) == tuple(other.real_features)
        )


def _bad_token(s: str) -> bool:
    return "|" in s or any(c.isspace() for c in s)


def check_record(record: ImpressionRecord, schema: NamespaceSchema) -> None:
    """Raise SchemaError unless ``record`` satisfies the record invariants."""
    if record.label not in (0, 1):
        raise SchemaError(f"label must be 0 or 1, got {record.label!r}")
    if not (math.isfinite(record.bid) and record.bid >= 0):
        raise SchemaError(f"bid must be finite and >= 0, got {record.bid!r}")
    for ns, feats in record.id_features.items():
        if ns not in schema.names:
            raise SchemaError(f"unknown namespace {ns!r}")
        for f in feats:
            if not f or f == "#" or _bad_token(f):
                raise SchemaError(f"invalid feature string {f!r} in namespace {ns!r}")
    if len(record.real_features) != schema.real_dim:
        raise SchemaError(
            f"expected {schema.real_dim} dense features, got {len(record.real_features)}"
        )


def parse_line(text: str, schema: NamespaceSchema, lineno: int | None = None) -> ImpressionRecord:
    tokens = text.split()
    if len(tokens) < 2:
        raise ParseError("expected '<label> <bid>' prefix", lineno)
    if tokens[0] not in ("0", "1"):
        raise ParseError(f"label must be 0 or 1, got {tokens[0]!r}", lineno)
    try:
        bid = float(tokens[1])
    except ValueError:
        raise ParseError(f"bid is not a number: {tokens[1]!r}", lineno) from None
    if not math.isfinite(bid) or bid < 0:
        raise ParseError(f"bid must be finite and >= 0, got {tokens[1]!r}", lineno)

    id_features: dict[str, list[str]] = {name: [] for name in schema.names}
    real: tuple[float, ...] = ()
    current = None
    for pos in range(2, len(tokens)):
        tok = tokens[pos]
        if tok == "#":
            tail = "".join(tokens[pos + 1:])
            try:
                real = tuple(float(v) for v in tail.split(",")) if tail else ()
            except ValueError:
                raise ParseError(f"non-numeric dense feature in {tail!r}", lineno) from None
            break
        if tok.startswith("|"):
            current = tok[1:]
            if not current:
                raise ParseError("empty namespace name after '|'", lineno)
            if current not in id_features:
                raise SchemaError(
                    f"line {lineno}: unknown namespace {current!r}"
                    if lineno is not None
                    else f"unknown namespace {current!r}"
                )
            continue
        if current is None:
            raise ParseError(f"feature {tok!r} appears before any namespace", lineno)
        if "|" in tok:
            raise ParseError(f"feature {tok!r} contains '|'", lineno)
        id_features[current].append(tok)

    if len(real) != schema.real_dim:
        raise SchemaError(
            f"line {lineno}: expected {schema.real_dim} dense features, got {len(real)}"
        )
    return ImpressionRecord(int(tokens[0]), bid, id_features, real)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_line(record: ImpressionRecord, schema: NamespaceSchema) -> str:
    parts = [str(record.label), _fmt(record.bid)]
    for ns in schema.names:
        feats = record.id_features.get(ns)
        if feats:
            parts.append("|" + ns)
            parts.extend(feats)
    if record.real_features:
        parts.append("#")
        parts.append(",".join(_fmt(v) for v in record.real_features))
    return " ".join(parts)


def _open_text(path: Path, mode: str):
    if path.suffix == ".gz":
        if "w" in mode:
            raw = open(path, "wb")
            # mtime=0 and no embedded filename keep the bytes reproducible
            gz = gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0)
            return _ClosingWrapper(io.TextIOWrapper(gz, encoding="utf-8", newline="\n"), raw)
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, mode, encoding="utf-8", newline="\n" if "w" in mode else None)


class _ClosingWrapper:
    def __init__(self, text, raw):
        self._text, self._raw = text, raw

    def write(self, s):
        return self._text.write(s)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self._text.close()
        self._raw.close()


def iter_log(path: str | Path, schema: NamespaceSchema) -> Iterator[ImpressionRecord]:
    with _open_text(Path(path), "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                yield parse_line(line, schema, lineno)


def read_log(path: str | Path, schema: NamespaceSchema) -> list[ImpressionRecord]:
    return list(iter_log(path, schema))


def write_log(path: str | Path, records: Iterable[ImpressionRecord], schema: NamespaceSchema) -> None:
    with _open_text(Path(path), "w") as fh:
        for rec in records:
            fh.write(write_line(rec, schema))
            fh.write("\n")


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class GeneratorConfig:
    n_impressions: int = 10_000
    n_users: int = 2_000
    n_ads: int = 1_000
    n_queries: int = 1_000
    zipf_exponent: float = 1.1
    base_ctr: float = 0.1
    interaction_strength: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_impressions", "n_users", "n_ads", "n_queries"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.zipf_exponent > 0:
            raise ConfigError("zipf_exponent must be > 0")
        if not 0 < self.base_ctr < 1:
            raise ConfigError("base_ctr must lie in (0, 1)")
        if self.interaction_strength < 0:
            raise ConfigError("interaction_strength must be >= 0")


def _zipf_draw(rng: np.random.Generator, vocab: int, exponent: float, size: int) -> np.ndarray:
    ranks = np.arange(1, vocab + 1, dtype=np.float64)
    p = ranks ** -exponent
    p /= p.sum()
    return rng.choice(vocab, size=size, p=p)


def _signs(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.where(rng.random(n) < 0.5, -1.0, 1.0)


def _solve_bias(z: np.ndarray, target: float) -> float:
    """Bias b with mean(sigmoid(b + z)) == target, by bisection."""
    lo, hi = -50.0, 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.mean(_sigmoid(mid + z)) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def _word_lists(rng, n_items, vocab, exponent, lo, hi):
    lengths = rng.integers(lo, hi + 1, size=n_items)
    words = _zipf_draw(rng, vocab, exponent, int(lengths.sum()))
    out, pos = [], 0
    for n in lengths:
        out.append(np.unique(words[pos:pos + n]))
        pos += n
    return out


def _hist_ctr(ids, ctr, n_entities, prior, base, noise, rng):
    """Smoothed per-entity mean of ``ctr`` plus gaussian noise, looked up per row."""
    sums = np.bincount(ids, weights=ctr, minlength=n_entities)
    counts = np.bincount(ids, minlength=n_entities)
    smoothed = (sums + prior * base) / (counts + prior)
    smoothed = smoothed + noise * rng.standard_normal(n_entities)
    return np.clip(smoothed, 0.0, 1.0)[ids]


def generate(
    config: GeneratorConfig, schema: NamespaceSchema | None = None
) -> tuple[list[ImpressionRecord], np.ndarray]:
    """Draw a synthetic click log and the exact click probability of every row.

    User, ad and query IDs follow Zipf popularity. Users, regions, ads and
    campaigns carry a hidden additive weight, and a query's weight is the
    sum of hidden per-word weights over its words. Users (through their region), ads (through their
    campaign) and queries additionally carry a hidden +/-1 group. The true
    logit adds ``interaction_strength`` times the products of those groups,
    an XOR pattern no additive model over IDs can represent.
    """
    config.validate()
    schema = schema or generator_schema()
    unknown = [n for n in schema.names if n not in DEFAULT_NAMESPACES]
    if unknown:
        raise ConfigError(f"generator cannot produce namespaces {unknown}")
    if schema.real_dim not in (0, len(GENERATED_REAL_FEATURES)):
        raise ConfigError(
            f"generator emits {len(GENERATED_REAL_FEATURES)} dense features; "
            f"schema declares {schema.real_dim}"
        )

    rng = np.random.default_rng(config.seed)
    n, s = config.n_impressions, config.zipf_exponent
    n_regions = max(1, config.n_users // 40)
    n_campaigns = max(1, config.n_ads // 4)
    n_domains = max(1, n_campaigns // 3)
    n_words = max(20, (config.n_ads + config.n_queries) // 2)

    # static entity structure
    user_region = rng.integers(0, n_regions, size=config.n_users)
    ad_campaign = rng.integers(0, n_campaigns, size=config.n_ads)
    campaign_domain = rng.integers(0, n_domains, size=n_campaigns)
    ad_title = _word_lists(rng, config.n_ads, n_words, s, 2, 4)
    ad_body = _word_lists(rng, config.n_ads, n_words, s, 3, 6)
    ad_keywords = _word_lists(rng, config.n_ads, n_words, s, 1, 3)
    query_words = _word_lists(rng, config.n_queries, n_words, s, 1, 3)

    w_user = 0.4 * rng.standard_normal(config.n_users)
    w_region = 0.3 * rng.standard_normal(n_regions)
    w_ad = 0.4 * rng.standard_normal(config.n_ads)
    w_campaign = 0.3 * rng.standard_normal(n_campaigns)
    # query effect is carried by its words so it stays expressible from features
    w_word = 0.3 * rng.standard_normal(n_words)
    w_query = np.array([w_word[ws].sum() for ws in query_words])
    w_position = np.array([0.0, -0.4, -0.8])
    g_region = _signs(rng, n_regions)
    g_campaign = _signs(rng, n_campaigns)
    g_query = _signs(rng, config.n_queries)

    # impressions
    users = _zipf_draw(rng, config.n_users, s, n)
    ads = _zipf_draw(rng, config.n_ads, s, n)
    queries = _zipf_draw(rng, config.n_queries, s, n)
    positions = rng.integers(0, 3, size=n)
    bids = np.round(rng.lognormal(mean=-0.5, sigma=0.6, size=n), 2)

    regions = user_region[users]
    campaigns = ad_campaign[ads]
    g_u, g_a, g_q = g_region[regions], g_campaign[campaigns], g_query[queries]
    z = (
        w_user[users]
        + w_region[regions]
        + w_ad[ads]
        + w_campaign[campaigns]
        + w_query[queries]
        + w_position[positions]
        + config.interaction_strength * (g_u * g_a + g_a * g_q)
    )
    bias = _solve_bias(z, config.base_ctr)
    oracle = _sigmoid(bias + z)
    labels = (rng.random(n) < oracle).astype(np.int64)

    if schema.real_dim:
        base = float(oracle.mean())
        dense = np.column_stack([
            _hist_ctr(users, oracle, config.n_users, 20.0, base, 0.01, rng),
            _hist_ctr(ads, oracle, config.n_ads, 20.0, base, 0.01, rng),
            _hist_ctr(queries, oracle, config.n_queries, 20.0, base, 0.01, rng),
            positions + 1.0,
            bids,
        ])
        dense = np.round(dense, 6)
    else:
        dense = np.zeros((n, 0))

    wanted = set(schema.names)
    records = []
    for i in range(n):
        u, a, q, c = int(users[i]), int(ads[i]), int(queries[i]), int(campaigns[i])
        feats = {
            "user_id": [f"u{u}"],
            "region_id": [f"r{regions[i]}"],
            "ad_id": [f"a{a}"],
            "campaign_id": [f"c{c}"],
            "domain_id": [f"d{campaign_domain[c]}"],
            "ad_title_words": [f"w{w}" for w in ad_title[a]],
            "ad_body_words": [f"w{w}" for w in ad_body[a]],
            "ad_position": [f"p{positions[i] + 1}"],
            "ad_keywords": [f"w{w}" for w in ad_keywords[a]],
            "query_words": [f"w{w}" for w in query_words[q]],
        }
        records.append(
            ImpressionRecord(
                label=int(labels[i]),
                bid=float(bids[i]),
                id_features={ns: feats[ns] for ns in schema.names if ns in wanted},
                real_features=tuple(float(v) for v in dense[i]),
            )
        )
    return records, oracle


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitRatios:
    train: float = 0.7
    valid: float = 0.2
    test: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        for name in ("train", "valid", "test"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise SplitError(f"split ratio {name}={v} must lie in (0, 1)")
        if abs(self.train + self.valid + self.test - 1.0) > 1e-9:
            raise SplitError("split ratios must sum to 1")


def split_indices(n: int, ratios: SplitRatios) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ratios.validate()
    if n < 3:
        raise SplitError(f"need at least 3 records to split, got {n}")
    n_valid = math.floor(n * ratios.valid + 1e-9)
    n_test = math.floor(n * ratios.test + 1e-9)
    n_train = n - n_valid - n_test
    perm = np.random.default_rng(ratios.seed).permutation(n)
    return perm[:n_train], perm[n_train:n_train + n_valid], perm[n_train + n_valid:]


def split(records: Sequence, ratios: SplitRatios):
    """Seeded random partition into (train, valid, test); remainder rows go to train."""
    tr, va, te = split_indices(len(records), ratios)
    return [records[i] for i in tr], [records[i] for i in va], [records[i] for i in te]
