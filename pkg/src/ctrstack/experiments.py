"""Pipeline glue: preprocessing a click log into hashed datasets, training
models from short specs, and the sweep / ablation / stacking experiments."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import clicklog, featurepipe, linearmodel, sparsenet, treeboost
from .ensemble import combine, ensemble_curve
from .errors import ConfigError
from .metrics import MetricsReport, deltas, evaluate

DEFAULT_L2_GRID = (1.0, 3.0, 10.0, 30.0, 100.0)


def derive_seed(global_seed: int, label: str) -> int:
    """Stable 63-bit seed for one pipeline stage."""
    digest = hashlib.blake2b(f"{global_seed}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


# Synthetic datasets of the reproduction experiments: what `ctrstack gen`
# writes with default settings under --seed 42 (S1) and --seed 43 (S2).
S1 = clicklog.GeneratorConfig(n_impressions=100_000, interaction_strength=0.5, seed=derive_seed(42, "gen"))
S2 = clicklog.GeneratorConfig(n_impressions=100_000, interaction_strength=0.5, seed=derive_seed(43, "gen"))


@dataclass
class Prepared:
    train: featurepipe.SparseDataset
    valid: featurepipe.SparseDataset
    test: featurepipe.SparseDataset
    hash_config: featurepipe.HashConfig
    stats: featurepipe.VocabStats
    kept: frozenset
    report: list[dict] = field(default_factory=list)
    # unpruned copies for the linear baseline, when requested
    lr_data: tuple | None = None
    lr_hash_config: featurepipe.HashConfig | None = None


def _unique_in(stats: featurepipe.VocabStats, namespace: str, keys=None) -> int:
    prefix = namespace + "^"
    pool = stats.counts if keys is None else keys
    return sum(1 for k in pool if k.startswith(prefix))


def prepare(
    records: Sequence[clicklog.ImpressionRecord],
    oracle=None,
    ratios: clicklog.SplitRatios = clicklog.SplitRatios(),
    prune_cfg: featurepipe.PruneConfig = featurepipe.PruneConfig(),
    hash_cfg: featurepipe.HashConfig = featurepipe.HashConfig(),
    lr_raw: bool = False,
    lr_dimension: int | None = None,
) -> Prepared:
    """Split, count on train only, prune, and hash all three splits."""
    parts = clicklog.split_indices(len(records), ratios)
    stats = featurepipe.count_features(records[i] for i in parts[0])
    kept = featurepipe.prune(stats, prune_cfg)
    oracle = None if oracle is None else np.asarray(oracle, dtype=np.float64)

    def build(idx, keep, hc):
        recs = [records[i] for i in idx]
        return featurepipe.vectorize_records(recs, keep, hc, None if oracle is None else oracle[idx])

    train, valid, test = (build(idx, kept, hash_cfg) for idx in parts)
    report = [
        {
            "stage": "raw",
            "impressions": len(records),
            "ads": _unique_in(stats, "ad_id"),
            "users": _unique_in(stats, "user_id"),
            "feature_space": stats.total_unique,
        },
        {
            "stage": "preprocessing",
            "impressions": len(records),
            "ads": _unique_in(stats, "ad_id", kept),
            "users": _unique_in(stats, "user_id", kept),
            "feature_space": len(kept),
        },
    ]
    prepared = Prepared(train, valid, test, hash_cfg, stats, kept, report)
    if lr_raw:
        lr_hc = featurepipe.HashConfig(lr_dimension or hash_cfg.dimension, hash_cfg.seed)
        prepared.lr_data = tuple(build(idx, None, lr_hc) for idx in parts)
        prepared.lr_hash_config = lr_hc
    return prepared


# ---------------------------------------------------------------------------
# model specs


def parse_spec(spec: str) -> tuple[str, tuple[int, ...] | None]:
    """``lr`` or ``ann:<h1>[,<h2>...]``."""
    if spec == "lr":
        return "lr", None
    if spec.startswith("ann:"):
        body = spec[4:]
        if body not in sparsenet.PRESETS:
            raise ConfigError(
                f"unknown network preset {spec!r}; presets are "
                + ", ".join("ann:" + p for p in sparsenet.PRESET_ORDER)
            )
        return "ann", sparsenet.PRESETS[body]
    raise ConfigError(
        f"unknown model spec {spec!r}; use 'lr' or one of "
        + ", ".join("ann:" + p for p in sparsenet.PRESET_ORDER)
    )


def spec_name(spec: str) -> str:
    return spec.replace(":", "-").replace(",", "-")


def train_lr_tuned(
    train: featurepipe.SparseDataset,
    valid: featurepipe.SparseDataset,
    l2_grid: Sequence[float] = DEFAULT_L2_GRID,
    cfg: linearmodel.LbfgsConfig = linearmodel.LbfgsConfig(),
    hash_config=None,
):
    """L-BFGS logistic regression with l2 chosen by validation NLL.

    Returns (best model, [(l2, valid nll), ...]).
    """
    best, scores = None, []
    for lam in l2_grid:
        model = linearmodel.train_lbfgs(train, replace(cfg, l2=float(lam)), hash_config=hash_config)
        score = evaluate(model.predict(valid), valid.labels).nll
        scores.append((float(lam), score))
        if best is None or score < best[0]:
            best = (score, model)
    model = best[1]
    model.meta["l2_grid"] = scores
    model.meta["valid_nll"] = best[0]
    return model, scores


@dataclass
class TrainSettings:
    l2_grid: Sequence[float] = DEFAULT_L2_GRID
    lbfgs: linearmodel.LbfgsConfig = linearmodel.LbfgsConfig()
    mlp: sparsenet.MlpTrainConfig = sparsenet.MlpTrainConfig()


def train_spec(
    prepared: Prepared,
    spec: str,
    settings: TrainSettings = TrainSettings(),
    seed: int = 0,
    train_rows: np.ndarray | None = None,
    log: Callable[[str], None] | None = None,
):
    """Train the model named by ``spec`` on the prepared splits.

    ``train_rows`` restricts training to a subset of the train split;
    validation and test data are never touched except for model selection
    on validation.
    """
    kind, hidden = parse_spec(spec)
    if kind == "lr":
        if prepared.lr_data is not None:
            train, valid, _ = prepared.lr_data
            hc = prepared.lr_hash_config
        else:
            train, valid, hc = prepared.train, prepared.valid, prepared.hash_config
        if train_rows is not None:
            train = train.subset(train_rows)
        model, _ = train_lr_tuned(train, valid, settings.l2_grid, settings.lbfgs, hc)
        model.meta["spec"] = spec
        return model
    train = prepared.train if train_rows is None else prepared.train.subset(train_rows)
    arch = sparsenet.MlpArchitecture(prepared.hash_config.dimension, hidden)
    cfg = replace(settings.mlp, seed=seed)
    model = sparsenet.train(train, prepared.valid, arch, cfg, prepared.hash_config, log)
    model.meta["spec"] = spec
    return model


def split_for(prepared: Prepared, model, which: str) -> featurepipe.SparseDataset:
    index = {"train": 0, "valid": 1, "test": 2}[which]
    if isinstance(model, linearmodel.LinearModel) and prepared.lr_data is not None:
        return prepared.lr_data[index]
    return (prepared.train, prepared.valid, prepared.test)[index]


# ---------------------------------------------------------------------------
# experiments


@dataclass
class SweepResult:
    baseline: MetricsReport
    reports: dict[str, MetricsReport]
    models: dict

    def rows(self):
        out = []
        for name, rep in self.reports.items():
            d_nll, d_auprc = deltas(self.baseline, rep)
            out.append((name, rep.nll, rep.auprc, d_nll, d_auprc))
        return out


def architecture_sweep(
    prepared: Prepared,
    presets: Sequence[str] = sparsenet.PRESET_ORDER,
    settings: TrainSettings = TrainSettings(),
    global_seed: int = 0,
    log=None,
) -> SweepResult:
    """LR baseline plus one network per preset, all scored on the test split."""
    models = {"lr": train_spec(prepared, "lr", settings, derive_seed(global_seed, "train:lr"))}
    for p in presets:
        spec = "ann:" + p
        models[spec] = train_spec(prepared, spec, settings, derive_seed(global_seed, "train:" + spec), log=log)
    reports = {
        name: evaluate(m.predict(split_for(prepared, m, "test")), prepared.test.labels)
        for name, m in models.items()
    }
    return SweepResult(reports["lr"], reports, models)


def nested_subsets(n_rows: int, fractions: Sequence[float], seed: int) -> dict[float, np.ndarray]:
    """Row subsets that are prefixes of one shuffle, returned in original row order."""
    perm = np.random.default_rng(seed).permutation(n_rows)
    out = {}
    for f in fractions:
        if not 0 < f <= 1:
            raise ConfigError(f"ablation fraction {f} must lie in (0, 1]")
        k = max(1, int(round(f * n_rows)))
        out[f] = np.sort(perm[:k])
    return out


def ablation(
    prepared: Prepared,
    fractions: Sequence[float],
    specs: Sequence[str],
    settings: TrainSettings = TrainSettings(),
    global_seed: int = 0,
    log=None,
) -> list[tuple[float, str, float, float]]:
    """(fraction, spec, test NLL, test auPRC) for every fraction/spec pair."""
    train_n = (prepared.lr_data[0] if prepared.lr_data else prepared.train).n_rows
    if train_n != prepared.train.n_rows:
        raise ConfigError("linear and network train splits disagree in size")
    subsets = nested_subsets(prepared.train.n_rows, fractions, derive_seed(global_seed, "ablate"))
    rows = []
    for f in sorted(subsets):
        for spec in specs:
            model = train_spec(
                prepared, spec, settings, derive_seed(global_seed, "train:" + spec),
                train_rows=subsets[f], log=log,
            )
            rep = evaluate(model.predict(split_for(prepared, model, "test")), prepared.test.labels)
            rows.append((f, spec, rep.nll, rep.auprc))
    return sorted(rows)


@dataclass
class StackResult:
    rows: list[tuple[str, float, float, float, float]]  # name, nll, dNLL%, auprc, dauPRC%
    models: dict[str, treeboost.GbdtModel]


def stacking(
    prepared: Prepared,
    first_stage: Sequence[tuple[str, Callable[[str], np.ndarray]]],
    cfg: treeboost.BoostConfig = treeboost.BoostConfig(),
    fit_split: str = "valid",
    include_oracle: bool = True,
    dense_columns: Sequence[str] | None = None,
) -> StackResult:
    """Boosted trees on dense features, alone and with each first-stage column.

    ``first_stage`` pairs a variant name with a function mapping a split
    name ("train"/"valid"/"test") to that split's predicted CTRs.
    """
    fit = {"train": prepared.train, "valid": prepared.valid}[fit_split]
    test = prepared.test
    if fit.dense.shape[1] == 0:
        raise ConfigError("stacking needs dense real-valued features in the log")
    variants = [("baseline", [])]
    for name, fn in first_stage:
        variants.append((name, [(name + "_ctr", fn)]))
    if include_oracle:
        if fit.oracle is None or test.oracle is None:
            raise ConfigError("oracle CTRs are not available for this dataset")
        variants.append(
            ("oracle", [("oracle_ctr", lambda split: {"train": prepared.train, "valid": prepared.valid,
                                                        "test": prepared.test}[split].oracle)])
        )
    rows, models, base_rep = [], {}, None
    for name, cols in variants:
        fit_in = treeboost.stack(fit.dense, [(c, fn(fit_split)) for c, fn in cols], dense_columns)
        test_in = treeboost.stack(test.dense, [(c, fn("test")) for c, fn in cols], dense_columns)
        model = treeboost.train_gbdt(fit_in.matrix, fit.labels, cfg, fit_in.columns)
        rep = evaluate(model.predict(test_in.matrix), test.labels)
        if base_rep is None:
            base_rep = rep
        d_nll, d_auprc = deltas(base_rep, rep)
        rows.append((name, rep.nll, d_nll, rep.auprc, d_auprc))
        models[name] = model
    return StackResult(rows, models)


def member_predictions(prepared: Prepared, models: Sequence, split: str = "test") -> list[np.ndarray]:
    return [m.predict(split_for(prepared, m, split)) for m in models]


def ensemble_report(prepared: Prepared, models: Sequence):
    preds = member_predictions(prepared, models)
    return ensemble_curve(preds, prepared.test.labels), evaluate(combine(preds), prepared.test.labels)
