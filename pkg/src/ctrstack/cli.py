"""Command-line entry point.

Subcommands: gen, prep, train, eval, ensemble-curve, ablate, stack, rank-ads.
Settings come from a flat ``key = value`` config file (``--config``) and
``--set key=value`` overrides; every stage seed derives from ``--seed``.
Each command records its inputs, outputs and digests in ``<out>/manifest.json``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, auction, clicklog, experiments, featurepipe, linearmodel, modelio, sparsenet
from .ensemble import EnsembleModel, combine, ensemble_curve, write_curve_csv
from .errors import ConfigError, CtrStackError
from .metrics import deltas, evaluate, write_pr_csv, write_report_csv
from .treeboost import BoostConfig

log = logging.getLogger("ctrstack")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _specs(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(";") if v.strip())


# key -> (parser, default)
SETTINGS = {
    "gen.n_impressions": (int, 100_000),
    "gen.n_users": (int, 2_000),
    "gen.n_ads": (int, 1_000),
    "gen.n_queries": (int, 1_000),
    "gen.zipf_exponent": (float, 1.1),
    "gen.base_ctr": (float, 0.1),
    "gen.interaction_strength": (float, 0.5),
    "gen.gzip": (_bool, False),
    "split.train": (float, 0.7),
    "split.valid": (float, 0.2),
    "split.test": (float, 0.1),
    "prune.threshold": (int, 10),
    "hash.dimension": (int, 100_000),
    "prep.lr_raw": (_bool, False),
    "prep.lr_dimension": (int, 100_000),
    "lr.l2_grid": (_floats, experiments.DEFAULT_L2_GRID),
    "lr.memory": (int, 10),
    "lr.tolerance": (float, 1e-5),
    "lr.max_iterations": (int, 200),
    "mlp.learning_rate": (float, 0.1),
    "mlp.l2": (float, 3e-4),
    "mlp.decay": (float, 2e-4),
    "mlp.decay_mode": (str, "inverse"),
    "mlp.batch_size": (int, 100),
    "mlp.dropout": (float, 0.5),
    "mlp.max_epochs": (int, 30),
    "mlp.patience": (int, 3),
    "boost.n_trees": (int, 100),
    "boost.depth": (int, 6),
    "boost.shrinkage": (float, 0.1),
    "boost.bins": (int, 32),
    "boost.leaf_l2": (float, 1.0),
    "stack.fit_split": (str, "valid"),
    "stack.oracle": (_bool, True),
    "ablate.fractions": (_floats, (0.0625, 0.25, 1.0)),
    "ablate.specs": (_specs, ("lr", "ann:50", "ann:50,50")),
    "rank.k": (int, 3),
}


class ExperimentConfig(dict):
    """Flat typed settings; unknown keys are rejected."""

    @classmethod
    def defaults(cls) -> "ExperimentConfig":
        return cls({k: default for k, (_, default) in SETTINGS.items()})

    def set_text(self, key: str, text: str) -> None:
        if key not in SETTINGS:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SETTINGS[key][0]
        try:
            self[key] = parser(text.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None

    def load_file(self, path: str | Path) -> None:
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, value = line.split("=", 1)
                self.set_text(key.strip(), value)

    def snapshot(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.items())}

    # typed views ------------------------------------------------------------
    def generator(self, seed: int) -> clicklog.GeneratorConfig:
        return clicklog.GeneratorConfig(
            n_impressions=self["gen.n_impressions"],
            n_users=self["gen.n_users"],
            n_ads=self["gen.n_ads"],
            n_queries=self["gen.n_queries"],
            zipf_exponent=self["gen.zipf_exponent"],
            base_ctr=self["gen.base_ctr"],
            interaction_strength=self["gen.interaction_strength"],
            seed=experiments.derive_seed(seed, "gen"),
        )

    def split(self, seed: int) -> clicklog.SplitRatios:
        return clicklog.SplitRatios(
            self["split.train"], self["split.valid"], self["split.test"],
            experiments.derive_seed(seed, "split"),
        )

    def hash_config(self, seed: int) -> featurepipe.HashConfig:
        return featurepipe.HashConfig(self["hash.dimension"], experiments.derive_seed(seed, "hash"))

    def train_settings(self) -> experiments.TrainSettings:
        return experiments.TrainSettings(
            l2_grid=self["lr.l2_grid"],
            lbfgs=linearmodel.LbfgsConfig(
                memory=self["lr.memory"], tolerance=self["lr.tolerance"],
                max_iterations=self["lr.max_iterations"],
            ),
            mlp=sparsenet.MlpTrainConfig(
                learning_rate=self["mlp.learning_rate"], l2=self["mlp.l2"],
                decay=self["mlp.decay"], decay_mode=self["mlp.decay_mode"],
                batch_size=self["mlp.batch_size"], dropout=self["mlp.dropout"],
                max_epochs=self["mlp.max_epochs"], patience=self["mlp.patience"],
            ),
        )

    def boost(self, seed: int) -> BoostConfig:
        return BoostConfig(
            n_trees=self["boost.n_trees"], depth=self["boost.depth"],
            shrinkage=self["boost.shrinkage"], bins=self["boost.bins"],
            leaf_l2=self["boost.leaf_l2"], seed=experiments.derive_seed(seed, "boost"),
        )


# ---------------------------------------------------------------------------
# manifest


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Run:
    command: str
    out: Path
    config: ExperimentConfig
    seed: int

    def __post_init__(self):
        self.stage = self.command
        self.inputs: dict[str, dict] = {}
        self.outputs: dict[str, str] = {}
        self.metrics: dict = {}

    def input(self, path: str | Path, role: str) -> Path:
        path = Path(path)
        self.inputs[role] = {"file": path.name, "sha256": sha256(path)}
        return path

    def output(self, name: str) -> Path:
        self.outputs[name] = name
        return self.out / name

    def finish(self) -> None:
        manifest_path = self.out / "manifest.json"
        manifest = modelio.load_json(manifest_path) if manifest_path.exists() else {"stages": {}}
        manifest["tool_version"] = __version__
        outputs = {}
        for name in sorted(self.outputs):
            path = self.out / name
            outputs[name] = {"path": name, "sha256": sha256(path)}
            side = modelio.sidecar_path(path)
            if side.exists() and side.name not in self.outputs:
                outputs[side.name] = {"path": side.name, "sha256": sha256(side)}
        manifest["stages"][self.stage] = {
            "config": self.config.snapshot(),
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": outputs,
            "metrics": self.metrics,
        }
        modelio.dump_json(manifest_path, manifest)


# ---------------------------------------------------------------------------
# prepared-data directory


def _write_prepared(run: Run, prepared: experiments.Prepared) -> None:
    for name, data in zip(("train", "valid", "test"), (prepared.train, prepared.valid, prepared.test)):
        data.save(run.output(f"{name}.bin"))
    if prepared.lr_data is not None:
        for name, data in zip(("train", "valid", "test"), prepared.lr_data):
            data.save(run.output(f"{name}_lr.bin"))
    featurepipe.write_counts_tsv(run.output("vocab.tsv"), prepared.stats.counts)
    featurepipe.write_counts_tsv(
        run.output("kept.tsv"), {k: prepared.stats.counts[k] for k in prepared.kept}
    )
    payload = {"hash_config": prepared.hash_config.to_dict()}
    if prepared.lr_hash_config is not None:
        payload["lr_hash_config"] = prepared.lr_hash_config.to_dict()
    modelio.dump_json(run.output("hash.json"), payload)
    with open(run.output("prep_report.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["stage", "impressions", "ads", "users", "feature_space"]
        w.writerow(cols)
        for row in prepared.report:
            w.writerow([row[c] for c in cols])


def load_prepared(data_dir: str | Path, run: Run | None = None, with_test: bool = True) -> experiments.Prepared:
    """Load a ``prep`` output directory. Training commands pass
    ``with_test=False`` so the test split is never read while fitting."""
    d = Path(data_dir)
    names = ("train", "valid", "test") if with_test else ("train", "valid")
    if run is not None:
        for name in (*names, "hash"):
            file = d / (name + (".json" if name == "hash" else ".bin"))
            run.input(file, f"data:{file.name}")
    meta = modelio.load_json(d / "hash.json")
    splits = [featurepipe.SparseDataset.load(d / f"{n}.bin") for n in names]
    if not with_test:
        splits.append(None)
    prepared = experiments.Prepared(
        *splits, featurepipe.HashConfig(**meta["hash_config"]),
        featurepipe.VocabStats(), frozenset(),
    )
    if "lr_hash_config" in meta:
        prepared.lr_data = tuple(
            featurepipe.SparseDataset.load(d / f"{n}_lr.bin") for n in names
        ) + ((None,) if not with_test else ())
        prepared.lr_hash_config = featurepipe.HashConfig(**meta["lr_hash_config"])
    return prepared


def load_model(path: str | Path):
    magic = modelio.read_magic(path)
    if magic == b"CTRLR001":
        return linearmodel.LinearModel.load(path)
    if magic == b"CTRMLP01":
        return sparsenet.MlpModel.load(path)
    raise ConfigError(f"{path} is not a first-stage model file")


def _model_label(path: str | Path) -> str:
    name = Path(path).name
    return name[:-6] if name.endswith(".model") else name


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, cfg: ExperimentConfig, run: Run) -> int:
    gen_cfg = cfg.generator(args.seed)
    gen_cfg.validate()
    records, oracle = clicklog.generate(gen_cfg, clicklog.generator_schema())
    log_name = "clicks.txt.gz" if cfg["gen.gzip"] else "clicks.txt"
    clicklog.write_log(run.output(log_name), records, clicklog.generator_schema())
    with open(run.output("oracle_ctr.txt"), "w", encoding="utf-8", newline="\n") as fh:
        for v in oracle:
            fh.write(repr(float(v)) + "\n")
    pos = float(np.mean([r.label for r in records]))
    run.metrics = {"impressions": len(records), "positive_rate": pos, "oracle_mean_ctr": float(oracle.mean())}
    print(f"wrote {len(records)} impressions, positive rate {pos:.4f}")
    return 0


def _read_oracle(path: Path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64, ndmin=1)


def cmd_prep(args, cfg: ExperimentConfig, run: Run) -> int:
    log_path = run.input(args.log, "log")
    schema = clicklog.generator_schema() if args.real_dim is None else clicklog.NamespaceSchema(
        clicklog.DEFAULT_NAMESPACES, args.real_dim)
    records = clicklog.read_log(log_path, schema)
    oracle = None
    oracle_path = Path(args.oracle) if args.oracle else log_path.parent / "oracle_ctr.txt"
    if oracle_path.exists():
        oracle = _read_oracle(run.input(oracle_path, "oracle"))
        if oracle.size != len(records):
            raise ConfigError("oracle sidecar length does not match the log")
    prepared = experiments.prepare(
        records, oracle, cfg.split(args.seed),
        featurepipe.PruneConfig(cfg["prune.threshold"]), cfg.hash_config(args.seed),
        lr_raw=cfg["prep.lr_raw"], lr_dimension=cfg["prep.lr_dimension"],
    )
    _write_prepared(run, prepared)
    run.metrics = {"report": prepared.report,
                   "splits": [prepared.train.n_rows, prepared.valid.n_rows, prepared.test.n_rows]}
    for row in prepared.report:
        print(f"{row['stage']:>14}: {row['feature_space']} unique features, "
              f"{row['ads']} ads, {row['users']} users")
    return 0


def _train_one(prepared, spec, settings, seed, run: Run, name: str):
    model = experiments.train_spec(prepared, spec, settings, experiments.derive_seed(seed, "train:" + spec),
                                   log=log.info)
    path = run.output(f"{name}.model")
    model.save(path, {"spec": spec})
    valid = experiments.split_for(prepared, model, "valid")
    report = evaluate(model.predict(valid), valid.labels)
    write_report_csv(run.output(f"{name}.valid.csv"), report)
    return model, report


def cmd_train(args, cfg: ExperimentConfig, run: Run) -> int:
    experiments.parse_spec(args.model)
    prepared = load_prepared(args.data, run, with_test=False)
    name = args.name or experiments.spec_name(args.model)
    run.stage = f"train:{name}"
    if args.grid:
        grid_path = run.input(args.grid, "grid")
        trials = []
        with open(grid_path, encoding="utf-8") as fh:
            for raw in fh:
                line = raw.split("#", 1)[0].strip()
                if line:
                    trials.append(line)
        best = None
        rows = []
        for i, line in enumerate(trials):
            trial_cfg = ExperimentConfig(cfg)
            for item in line.split():
                key, _, value = item.partition("=")
                trial_cfg.set_text(key, value)
            _, report = _train_one(prepared, args.model, trial_cfg.train_settings(), args.seed, run,
                                   f"{name}.trial{i}")
            rows.append((i, line, report.nll))
            if best is None or report.nll < best[1]:
                best = (i, report.nll, trial_cfg)
        with open(run.output(f"{name}.grid.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial", "settings", "valid_nll"])
            for r in rows:
                w.writerow([r[0], r[1], repr(r[2])])
        cfg = best[2]
    _, report = _train_one(prepared, args.model, cfg.train_settings(), args.seed, run, name)
    run.metrics = {"valid": report.to_dict()}
    print(f"{args.model}: validation nll {report.nll:.6f} auprc {report.auprc:.6f}")
    return 0


def cmd_eval(args, cfg: ExperimentConfig, run: Run) -> int:
    prepared = load_prepared(args.data, run)
    baseline_path = Path(args.baseline)
    if not baseline_path.exists():
        raise ConfigError(f"baseline model {baseline_path} does not exist")
    paths = [baseline_path] + [Path(p) for p in args.model]
    reports = {}
    for p in paths:
        model = load_model(run.input(p, f"model:{_model_label(p)}"))
        test = experiments.split_for(prepared, model, "test")
        reports[_model_label(p)] = evaluate(model.predict(test), test.labels)
    base = reports[_model_label(baseline_path)]
    with open(run.output("eval.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "nll", "auprc", "delta_nll_pct", "delta_auprc_pct"])
        for label in sorted(reports):
            rep = reports[label]
            d_nll, d_auprc = deltas(base, rep)
            w.writerow([label, repr(rep.nll), repr(rep.auprc), repr(d_nll), repr(d_auprc)])
            run.metrics[label] = {**rep.to_dict(), "delta_nll_pct": d_nll, "delta_auprc_pct": d_auprc}
            print(f"{label:>20}  nll {rep.nll:.6f} ({d_nll:+.2f}%)  auprc {rep.auprc:.6f} ({d_auprc:+.2f}%)")
    for label, rep in sorted(reports.items()):
        write_pr_csv(run.output(f"pr_{label}.csv"), rep.pr_points)
    return 0


def cmd_ensemble_curve(args, cfg: ExperimentConfig, run: Run) -> int:
    prepared = load_prepared(args.data, run)
    models = [load_model(run.input(p, f"model:{i}")) for i, p in enumerate(args.model)]
    EnsembleModel(models)  # validates hash-config agreement
    preds = experiments.member_predictions(prepared, models)
    rows = ensemble_curve(preds, prepared.test.labels)
    write_curve_csv(run.output("curve.csv"), rows)
    final = evaluate(combine(preds), prepared.test.labels)
    write_pr_csv(run.output("pr_ensemble.csv"), final.pr_points)
    run.metrics = {"curve": [list(r) for r in rows]}
    for k, a, n in rows:
        print(f"k={k}: auprc {a:.6f} nll {n:.6f}")
    return 0


def cmd_ablate(args, cfg: ExperimentConfig, run: Run) -> int:
    prepared = load_prepared(args.data, run)
    for spec in cfg["ablate.specs"]:
        experiments.parse_spec(spec)
    rows = experiments.ablation(
        prepared, cfg["ablate.fractions"], cfg["ablate.specs"], cfg.train_settings(), args.seed, log.info
    )
    with open(run.output("ablation.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fraction", "model", "nll", "auprc"])
        for f, spec, n, a in rows:
            w.writerow([repr(f), spec, repr(n), repr(a)])
    run.metrics = {"rows": [list(r) for r in rows]}
    for f, spec, n, a in rows:
        print(f"{f:>8.4f} {spec:>12}  nll {n:.6f}  auprc {a:.6f}")
    return 0


def cmd_stack(args, cfg: ExperimentConfig, run: Run) -> int:
    prepared = load_prepared(args.data, run)

    def column(model):
        return lambda split: model.predict(experiments.split_for(prepared, model, split))

    first_stage = []
    if args.lr:
        first_stage.append(("lr", column(load_model(run.input(args.lr, "model:lr")))))
    if args.ann:
        first_stage.append(("ann", column(load_model(run.input(args.ann, "model:ann")))))
    if args.ensemble:
        members = [load_model(run.input(p, f"model:ensemble{i}")) for i, p in enumerate(args.ensemble)]
        ens = EnsembleModel(members)
        first_stage.append(
            ("ensemble", lambda split: combine(experiments.member_predictions(prepared, ens.members, split)))
        )
    include_oracle = cfg["stack.oracle"] and prepared.test.oracle is not None
    result = experiments.stacking(
        prepared, first_stage, cfg.boost(args.seed), cfg["stack.fit_split"], include_oracle,
    )
    for name, model in result.models.items():
        model.save(run.output(f"gbdt_{name}.model"))
    with open(run.output("stack.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "nll", "delta_nll_pct", "auprc", "delta_auprc_pct"])
        for name, n, dn, a, da in result.rows:
            w.writerow([name, repr(n), repr(dn), repr(a), repr(da)])
    run.metrics = {name: {"nll": n, "delta_nll_pct": dn, "auprc": a, "delta_auprc_pct": da}
                   for name, n, dn, a, da in result.rows}
    for name, n, dn, a, da in result.rows:
        print(f"{name:>10}  nll {n:.6f} ({dn:+.2f}%)  auprc {a:.6f} ({da:+.2f}%)")
    return 0


def cmd_rank_ads(args, cfg: ExperimentConfig, run: Run) -> int:
    candidates = auction.read_candidates(run.input(args.candidates, "candidates"))
    shown = auction.select_ads(candidates, args.k if args.k is not None else cfg["rank.k"])
    auction.write_display(run.output("display.csv"), shown)
    for ad in shown:
        print(f"{ad.ad_id}\tbid {ad.bid:g}\tctr {ad.ctr:g}")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "prep": cmd_prep,
    "train": cmd_train,
    "eval": cmd_eval,
    "ensemble-curve": cmd_ensemble_curve,
    "ablate": cmd_ablate,
    "stack": cmd_stack,
    "rank-ads": cmd_rank_ads,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' settings file")
    common.add_argument("--seed", type=int, default=42, help="global seed (default 42)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ctrstack", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="generate a synthetic click log")

    p = sub.add_parser("prep", parents=[common], help="split, prune and hash a click log")
    p.add_argument("--log", required=True)
    p.add_argument("--oracle", help="oracle CTR sidecar (default: oracle_ctr.txt next to the log)")
    p.add_argument("--real-dim", type=int, default=None,
                   help="dense feature count per line (default: the generator's)")

    presets = ", ".join(["lr"] + ["ann:" + s for s in sparsenet.PRESET_ORDER])
    p = sub.add_parser("train", parents=[common], help="train one model on prepared data")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help=f"model spec: {presets}")
    p.add_argument("--name", help="output file stem (default derived from --model)")
    p.add_argument("--grid", help="file of override lines; best on validation is kept")

    p = sub.add_parser("eval", parents=[common], help="test-set metrics and deltas vs a baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--model", nargs="*", default=[])

    p = sub.add_parser("ensemble-curve", parents=[common], help="metrics of growing ensembles")
    p.add_argument("--data", required=True)
    p.add_argument("--model", nargs="+", required=True)

    p = sub.add_parser("ablate", parents=[common], help="training-set size ablation")
    p.add_argument("--data", required=True)

    p = sub.add_parser("stack", parents=[common], help="boosted trees with first-stage columns")
    p.add_argument("--data", required=True)
    p.add_argument("--lr")
    p.add_argument("--ann")
    p.add_argument("--ensemble", nargs="*")

    p = sub.add_parser("rank-ads", parents=[common], help="select and order ads for display")
    p.add_argument("--candidates", required=True)
    p.add_argument("--k", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.defaults()
        if args.config:
            cfg.load_file(args.config)
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            cfg.set_text(key.strip(), value)
        if args.command == "train":
            experiments.parse_spec(args.model)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        run = Run(args.command, out, cfg, args.seed)
        status = COMMANDS[args.command](args, cfg, run)
        run.finish()
        return status
    except ConfigError as exc:
        print(f"ctrstack {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (CtrStackError, OSError) as exc:
        print(f"ctrstack {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
