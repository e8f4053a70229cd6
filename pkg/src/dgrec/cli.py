"""Command line entry point: prepare, train, evaluate, sweep."""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import shutil
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import dataset as D
from . import model as M
from .config import ConfigError, RunConfig, parse_int_list, parse_overrides, read_config_file, resolve
from .evaluation import evaluate, popularity_scores
from .training import TrainConfig, TrainingData, final_embeddings, fit, write_log

log = logging.getLogger("dgrec")

SWEEP_PARAMS = {"beta": float, "k": int, "sigma_squared": float, "layers": int, "L": int}


@contextlib.contextmanager
def cleanup_on_error(*paths):
    """Delete files/directories created inside ``paths`` if the body raises."""
    before = {}
    for p in paths:
        p = Path(p)
        before[p] = set(p.rglob("*")) if p.is_dir() else (None if not p.exists() else set())
    try:
        yield
    except BaseException:
        for p, existing in before.items():
            if existing is None:
                if p.is_dir():
                    shutil.rmtree(p, ignore_errors=True)
                elif p.exists():
                    p.unlink()
                continue
            if p.is_dir():
                for child in sorted(set(p.rglob("*")) - existing, reverse=True):
                    if child.is_dir():
                        shutil.rmtree(child, ignore_errors=True)
                    elif child.exists():
                        child.unlink()
        raise


def _ratios(text: str):
    try:
        return tuple(float(r) for r in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --split value {text!r}") from exc


def cmd_prepare(args) -> int:
    out = Path(args.out)
    with cleanup_on_error(out):
        extra = {}
        if args.synthetic:
            spec = D.SyntheticSpec(args.users, args.items, args.category_count, args.zipf,
                                   args.majority_prob, args.per_user, args.seed)
            raw_log, categories = D.generate_synthetic(spec)
            out.mkdir(parents=True, exist_ok=True)
            D.write_interactions(raw_log, out / "interactions.tsv")
            D.write_categories(categories, out / "item_categories.tsv")
            extra.update(source="synthetic", users=spec.user_count, items=spec.item_count,
                         category_count=spec.category_count, zipf=spec.zipf_exponent,
                         majority_prob=spec.majority_interest_prob, per_user=spec.interactions_per_user)
            k_core = args.k_core if args.k_core is not None else 1
        else:
            if not args.interactions:
                raise ConfigError("prepare needs --interactions (or --synthetic)")
            raw_log, categories = D.ingest(args.interactions, args.categories)
            extra["source"] = Path(args.interactions).name
            k_core = args.k_core if args.k_core is not None else 5
        filtered = D.k_core_filter(raw_log, k_core)
        kept_items = filtered.items
        categories = {i: c for i, c in categories.items() if i in kept_items}
        bundle = D.split(filtered, _ratios(args.split), args.seed, args.split_mode)
        extra.update(k_core=k_core, split_mode=args.split_mode)
        D.write_split(bundle, categories, out, extra)
        stats = D.dataset_stats(filtered, categories)
        print(D.format_stats(stats))
    return 0


def _load_run_config(args, extra_flags: dict | None = None) -> RunConfig:
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    flags = parse_overrides(getattr(args, "set", None))
    for key in ("split", "out", "seed", "threads"):
        value = getattr(args, key, None)
        if value is not None:
            flags[key] = value
    flags.update(extra_flags or {})
    if "threads" not in flags and "threads" not in file_values:
        flags["threads"] = os.cpu_count() or 1
    return resolve(getattr(args, "preset", None), file_values, flags)


def _train_once(cfg: RunConfig, data: TrainingData, verbose=True):
    progress = None
    if verbose:
        def progress(row):
            log.info("epoch %d loss %.5f val_recall %.4f val_coverage %.3f", row["epoch"], row["loss"],
                     row["val_recall"], row["val_coverage"])
    return fit(data, cfg.train, progress)


def _training_data(split_dir) -> TrainingData:
    if not split_dir:
        raise ConfigError("a split directory is required (--split or 'split = DIR' in the config)")
    bundle, categories = D.read_split(split_dir)
    return TrainingData.from_split(bundle, categories)


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if cfg.preset == "popularity":
        raise ConfigError("the popularity preset has no parameters; use 'evaluate --preset popularity'")
    if not cfg.out:
        raise ConfigError("train needs --out")
    out = Path(cfg.out)
    with cleanup_on_error(out):
        data = _training_data(cfg.split)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        result = _train_once(cfg, data)
        write_log(result.log, out / "train_log.csv")
        header = {f"cfg.{k}": v for k, v in _config_items(cfg.train)}
        header.update(preset=cfg.preset, users=data.graph.user_count, items=data.graph.item_count,
                      seed=cfg.train.seed, best_epoch=result.best_epoch, split=Path(cfg.split).resolve())
        M.save_checkpoint(out / "checkpoint.npz", result.params, result.neighborhoods, header)
        print(f"best epoch {result.best_epoch}; checkpoint written to {out / 'checkpoint.npz'}")
    return 0


def _config_items(train: TrainConfig):
    return [(f.name, getattr(train, f.name)) for f in fields(train)]


def _config_from_header(header: dict) -> TrainConfig:
    types = TrainConfig.field_types()
    kwargs = {}
    for key, value in header.items():
        name = key[4:]
        if key.startswith("cfg.") and name in types:
            kwargs[name] = (value == "True") if types[name] is bool else types[name](value)
    return TrainConfig(**kwargs).validate()


def cmd_evaluate(args) -> int:
    cutoffs = parse_int_list(args.cutoffs)
    if args.preset == "popularity":
        split_dir = args.split
        data = _training_data(split_dir)
        scorer = popularity_scores(data.graph)
        default_out = Path(split_dir) / "popularity_metrics.csv"
    else:
        if not args.checkpoint:
            raise ConfigError("evaluate needs --checkpoint (or --preset popularity)")
        params, neighborhoods, header = M.load_checkpoint(args.checkpoint)
        split_dir = args.split or header.get("split")
        data = _training_data(split_dir)
        if (int(header["users"]), int(header["items"])) != (data.graph.user_count, data.graph.item_count):
            raise ConfigError("checkpoint does not match the split's training graph")
        train_cfg = _config_from_header(header)
        scorer = final_embeddings(data.graph, params, neighborhoods, train_cfg)
        default_out = Path(args.checkpoint).with_name("metrics.csv")
    target = data.validation if args.on == "validation" else data.test
    report = evaluate(scorer, target, data.graph, data.categories, cutoffs)
    out = Path(args.out) if args.out else default_out
    with cleanup_on_error(out):
        report.write_csv(out)
    print(report.table())
    return 0


def cmd_sweep(args) -> int:
    name = "layers" if args.param == "L" else args.param
    if name not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep {args.param!r}; choose from beta, k, sigma_squared, L")
    kind = SWEEP_PARAMS[name]
    try:
        values = [kind(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values {args.values!r}") from exc
    seeds = parse_int_list(args.seeds, minimum=0) if args.seeds else None
    base = _load_run_config(args)
    if base.preset == "popularity":
        raise ConfigError("cannot sweep the popularity preset")
    if not base.out:
        raise ConfigError("sweep needs --out")
    out = Path(base.out)
    series = [("attention", True), ("mean", False)] if args.compare_readout else [(base.preset, None)]
    data = _training_data(base.split)
    with cleanup_on_error(out):
        out.mkdir(parents=True, exist_ok=True)
        rows = run_sweep(base, data, name, values, series, seeds or (base.train.seed,), args.cutoff)
        path = out / f"sweep_{name}.csv"
        write_sweep(rows, path)
        print(path.read_text(encoding="utf-8"), end="")
    return 0


def run_sweep(base: RunConfig, data: TrainingData, name: str, values, series, seeds, cutoff: int):
    rows = []
    for label, attention in series:
        for value in values:
            metrics = []
            for seed in seeds:
                overrides = {name: value, "seed": seed}
                if attention is not None:
                    overrides["use_attention"] = attention
                train = replace(base.train, **overrides).validate()
                cfg = replace(base, train=train)
                result = _train_once(cfg, data, verbose=False)
                final = final_embeddings(data.graph, result.params, result.neighborhoods, train)
                report = evaluate(final, data.test, data.graph, data.categories, (cutoff,))
                metrics.append([report.value(m, cutoff) for m in ("recall", "hit_ratio", "coverage")])
            mean = np.mean(metrics, axis=0)
            rows.append({"series": label, "param": name, "value": value, "seeds": len(seeds),
                         "cutoff": cutoff, "recall": mean[0], "hit_ratio": mean[1], "coverage": mean[2]})
    return rows


SWEEP_COLUMNS = ("series", "param", "value", "seeds", "cutoff", "recall", "hit_ratio", "coverage")


def write_sweep(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(SWEEP_COLUMNS) + "\n")
        for row in rows:
            cells = [f"{row[c]:.10f}" if c in ("recall", "hit_ratio", "coverage") else str(row[c])
                     for c in SWEEP_COLUMNS]
            fh.write(",".join(cells) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgrec", description="Diversified graph recommender")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest, k-core filter and split a dataset")
    p.add_argument("--interactions")
    p.add_argument("--categories")
    p.add_argument("--k-core", type=int, default=None, help="default 5 for files, 1 for synthetic")
    p.add_argument("--split", default="0.6,0.2,0.2")
    p.add_argument("--split-mode", choices=("per_user", "global"), default="per_user")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--synthetic", action="store_true", help="generate a long-tail synthetic dataset")
    p.add_argument("--users", type=int, default=5000)
    p.add_argument("--items", type=int, default=3000)
    p.add_argument("--category-count", type=int, default=40)
    p.add_argument("--zipf", type=float, default=1.2)
    p.add_argument("--majority-prob", type=float, default=0.7)
    p.add_argument("--per-user", type=int, default=20)
    p.set_defaults(func=cmd_prepare)

    def add_run_flags(p):
        p.add_argument("--config")
        p.add_argument("--preset")
        p.add_argument("--split")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap for neighborhood refresh (results do not depend on it)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compute Recall/HR/Coverage for a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--split")
    p.add_argument("--cutoffs", default="100,300")
    p.add_argument("--preset", choices=("popularity",))
    p.add_argument("--on", choices=("test", "validation"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train/evaluate one run per parameter value")
    add_run_flags(p)
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--seeds", help="comma-separated seeds averaged per value")
    p.add_argument("--cutoff", type=int, default=100)
    p.add_argument("--compare-readout", action="store_true",
                   help="run attention and mean readout as two series")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, D.DataError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
