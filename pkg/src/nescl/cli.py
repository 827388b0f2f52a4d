"""Command-line entry points: prepare, train, eval, synth.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from datetime import datetime, timezone
from pathlib import Path

from .encoder import load_checkpoint
from .errors import ConfigError, DataError, NesclError
from .evaluation import DEFAULT_K, evaluate
from .interactions import build_graph, load_dataset, save_dataset
from .neighbors import SIDES, cache_path, load_or_build
from .synthetic import block_dataset
from .training import (INTERACTED_STRATEGIES, LOSSES, NEAREST_SIDES, NEIGHBOR_STRATEGIES, PRESETS,
                       REDRAW, TERMS, TrainConfig, apply_preset, fit, neighbor_tables)

log = logging.getLogger("nescl")

SWEEPABLE = ("tau", "alpha", "rho", "lr", "weight_decay", "layers", "dim", "batch", "k_neighbors",
             "seed", "epochs")


class _Parser(argparse.ArgumentParser):
    """Argument errors surface as exit code 2 with the usage line."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _setup_logging() -> None:
    level = os.environ.get("NESCL_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(message)s",
                        stream=sys.stderr)


def _build_id() -> str:
    from . import __version__
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        commit = rev.stdout.strip() if rev.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        commit = ""
    return f"{__version__}+{commit}" if commit else __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _dataset_paths(args) -> tuple[Path, Path | None]:
    if getattr(args, "train", None):
        return Path(args.train), Path(args.test) if args.test else None
    if not args.dataset_dir:
        raise ConfigError("give --dataset-dir or --train")
    d = Path(args.dataset_dir)
    train, test = d / "train.txt", d / "test.txt"
    if not train.exists():
        raise DataError(f"{train}: not found")
    return train, test if test.exists() else None


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--k expects a comma list of integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise ConfigError("--k values must be >= 1")
    return ks


# ---------------------------------------------------------------------------
# prepare

def cmd_prepare(args) -> int:
    train, test = _dataset_paths(args)
    ds = load_dataset(train, test)
    for w in ds.warnings:
        log.warning("warning: %s", w)
    cache = Path(args.cache_dir) if args.cache_dir else train.parent
    digest = ds.content_hash()
    tables = []
    for k in _parse_ks(args.k):
        for side in SIDES:
            table, hit = load_or_build(ds, side, k, cache, digest)
            log.info("%s %s k=%d (%d nodes)", "cache hit" if hit else "built", side, k,
                     table.num_nodes)
            tables.append({"side": side, "k": k, "cache_hit": hit,
                           "path": str(cache_path(cache, side, k, digest))})
    print(json.dumps({"dataset_sha256": digest, "cache_dir": str(cache), "tables": tables}))
    return 0


# ---------------------------------------------------------------------------
# train

_CONFIG_FLAGS = {
    "loss": "loss", "tau": "tau", "alpha": "alpha", "rho": "rho", "aug": "aug",
    "layers": "layers", "dim": "dim", "batch": "batch", "lr": "lr", "epochs": "epochs",
    "seed": "seed", "k_neighbors": "k_neighbors", "neighbor_strategy": "neighbor_strategy",
    "interacted_strategy": "interacted_strategy", "drop_ranking": "drop_ranking",
    "drop_layer0": "drop_layer0", "renormalize": "renormalize", "weight_decay": "weight_decay",
    "patience": "patience", "redraw": "redraw", "full_support": "full_support",
    "nearest_side": "nearest_side", "normalize": "normalize",
}


def config_from_args(args) -> TrainConfig:
    """Defaults, then preset, then explicitly given flags."""
    cfg = TrainConfig()
    if args.preset:
        cfg = apply_preset(cfg, args.preset)
    given = {dest: getattr(args, flag) for flag, dest in _CONFIG_FLAGS.items()
             if getattr(args, flag) is not None}
    if args.terms is not None:
        given["terms"] = tuple(t for t in args.terms.split(",") if t)
    loss = given.get("loss", cfg.loss)
    if loss in ("bpr", "sgl"):
        conflicts = [f"--{f.replace('_', '-')}" for f in
                     ("neighbor_strategy", "interacted_strategy", "k_neighbors", "terms")
                     if f in given]
        if conflicts:
            raise ConfigError(f"--loss {loss} uses no neighbour positives; conflicting flags: "
                              + ", ".join(conflicts))
    if loss == "bpr" and any(f in given for f in ("tau", "rho", "aug")):
        raise ConfigError("--loss bpr has no contrastive term; drop --tau/--rho/--aug")
    try:
        return replace(cfg, **given)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_training(cfg: TrainConfig, train: Path, test: Path | None, out: Path,
                 cache_dir: Path | None) -> dict:
    """One run into ``out``: manifest first, then metrics, checkpoints, figure."""
    from .plotting import plot_training_curves

    ds = load_dataset(train, test)
    for w in ds.warnings:
        log.warning("warning: %s", w)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": cfg.to_dict(),
        "dataset": {"train": str(train.resolve()), "test": str(test.resolve()) if test else None,
                    "sha256": ds.content_hash(), "num_users": ds.num_users,
                    "num_items": ds.num_items},
        "cache_dir": str(cache_dir) if cache_dir else None,
        "build": _build_id(),
        "started": _now(),
        "finished": None,
        "out_dir": str(out.resolve()),
    }
    _write_json(out / "manifest.json", manifest)

    result = fit(ds, cfg, out, cache_dir=cache_dir or train.parent,
                 log=lambda msg: log.info("%s", msg))
    history = [{k: r[k] for k in r if k != "seconds"} for r in result.history]
    _write_json(out / "metrics.json", history)
    plot_training_curves(result.history, out / "training_curves.png", title=cfg.loss)
    final = result.history[-1] if result.history else {}
    report = {
        "best_epoch": result.best_epoch,
        "best_ndcg@20": result.best_ndcg,
        "best_recall@20": next((r["recall@20"] for r in result.history
                                if r["epoch"] == result.best_epoch), 0.0),
        "final_epoch": final.get("epoch", 0),
        "final_ndcg@20": final.get("ndcg@20", 0.0),
        "final_recall@20": final.get("recall@20", 0.0),
        "stopped_early": result.stopped_early,
        "seconds": sum(r["seconds"] for r in result.history),
    }
    _write_json(out / "report.json", report)
    manifest["finished"] = _now()
    _write_json(out / "manifest.json", manifest)
    return report


def _parse_sweep(text: str) -> tuple[str, list]:
    if "=" not in text:
        raise ConfigError(f"--sweep expects name=v1,v2,..., got {text!r}")
    name, values = text.split("=", 1)
    name = name.strip().replace("-", "_")
    if name not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {name!r}; sweepable: {', '.join(SWEEPABLE)}")
    kind = {f.name: f.type for f in fields(TrainConfig)}[name]
    cast = int if kind in (int, "int") else float
    try:
        vals = [cast(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad value in --sweep {text!r}") from None
    if not vals:
        raise ConfigError("--sweep needs at least one value")
    return name, vals


def _sweep_job(job):
    cfg_dict, train, test, out, cache = job
    _setup_logging()
    cfg = TrainConfig.from_dict(cfg_dict)
    return run_training(cfg, Path(train), Path(test) if test else None, Path(out),
                         Path(cache) if cache else None)


def run_sweep(cfg: TrainConfig, name: str, values: list, train, test, out: Path, cache,
              jobs: int = 1) -> list[dict]:
    from .plotting import plot_sweep

    out.mkdir(parents=True, exist_ok=True)
    jobs_in = []
    for v in values:
        run_cfg = replace(cfg, **{name: v})
        jobs_in.append((run_cfg.to_dict(), str(train), str(test) if test else None,
                        str(out / f"{name}={v}"), str(cache) if cache else None))
    if jobs > 1:
        # build shared neighbour caches once instead of racing in every worker
        ds = load_dataset(train, test)
        for v in values:
            neighbor_tables(ds, replace(cfg, **{name: v}), cache or Path(train).parent)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_sweep_job, jobs_in))
    else:
        reports = [_sweep_job(j) for j in jobs_in]
    rows = [{"value": v, "best_epoch": r["best_epoch"], "recall@20": r["best_recall@20"],
             "ndcg@20": r["best_ndcg@20"], "final_recall@20": r["final_recall@20"],
             "final_ndcg@20": r["final_ndcg@20"]} for v, r in zip(values, reports)]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ["value", "best_epoch", "recall@20", "ndcg@20", "final_recall@20", "final_ndcg@20"]
        w.writerow([name] + cols[1:])
        for row in rows:
            w.writerow([row[c] if c in ("value", "best_epoch") else repr(row[c]) for c in cols])
    plot_sweep(name, rows, out / "sweep.png")
    return rows


def cmd_train(args) -> int:
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text())
        cfg = TrainConfig.from_dict({**manifest["config"], "terms": tuple(manifest["config"]["terms"])})
        train = Path(manifest["dataset"]["train"])
        test = Path(manifest["dataset"]["test"]) if manifest["dataset"]["test"] else None
        cache = Path(manifest["cache_dir"]) if manifest.get("cache_dir") else None
        if args.cache_dir:
            cache = Path(args.cache_dir)
    else:
        cfg = config_from_args(args)
        train, test = _dataset_paths(args)
        cache = Path(args.cache_dir) if args.cache_dir else None
    if not args.out:
        raise ConfigError("--out is required")
    out = Path(args.out)
    if args.sweep:
        name, values = _parse_sweep(args.sweep)
        rows = run_sweep(cfg, name, values, train, test, out, cache, args.jobs)
        print(json.dumps(rows))
    else:
        report = run_training(cfg, train, test, out, cache)
        print(json.dumps(report, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    train, test = _dataset_paths(args)
    if test is None:
        raise DataError("evaluation needs a test file")
    ds = load_dataset(train, test)
    ckpt = load_checkpoint(args.checkpoint)
    graph = build_graph(ds)
    if ckpt.embedding.shape[0] != graph.node_count:
        raise DataError(f"{args.checkpoint}: checkpoint has {ckpt.embedding.shape[0]} rows but the "
                        f"dataset has {graph.node_count} nodes ({ds.num_users} users + "
                        f"{ds.num_items} items)")
    report = evaluate(ckpt.embedding, ds, graph, ckpt.layers, ckpt.drop_layer0, ckpt.normalize,
                      args.k, per_user=args.per_user)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "eval.json")
    report.write_csv(out / "eval.csv")
    summary = report.to_dict()
    summary.pop("per_user", None)
    print(json.dumps(summary, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    ds = block_dataset(args.users, args.items, args.communities, args.density, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out / "train.txt", out / "test.txt")
    print(json.dumps({"users": ds.num_users, "items": ds.num_items,
                      "train": len(ds.train_pairs), "test": len(ds.test_pairs)}))
    return 0


# ---------------------------------------------------------------------------

def _add_dataset_args(p) -> None:
    p.add_argument("--dataset-dir", help="directory holding train.txt and test.txt")
    p.add_argument("--train", help="train file (alternative to --dataset-dir)")
    p.add_argument("--test", help="test file used with --train")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nescl", description="Neighbour-enhanced contrastive training for "
                                               "graph collaborative filtering.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="build nearest-neighbour caches")
    _add_dataset_args(p)
    p.add_argument("--k", default="5", help="comma list of neighbour counts (default 5)")
    p.add_argument("--cache-dir", help="cache directory (default: dataset directory)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model, or a sweep of models")
    _add_dataset_args(p)
    p.add_argument("--out", help="run directory")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--manifest", help="re-run the configuration recorded in a manifest.json")
    p.add_argument("--loss", choices=LOSSES)
    p.add_argument("--tau", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--aug", choices=("nd", "ed", "rw", "node_dropout", "edge_dropout",
                                     "random_walk"))
    p.add_argument("--layers", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--k-neighbors", type=int)
    p.add_argument("--neighbor-strategy", choices=NEIGHBOR_STRATEGIES)
    p.add_argument("--interacted-strategy", choices=INTERACTED_STRATEGIES)
    p.add_argument("--drop-ranking", action="store_const", const=True)
    p.add_argument("--drop-layer0", action="store_const", const=True)
    p.add_argument("--renormalize", choices=("corrupted", "original"))
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--patience", type=int, help="epochs without improvement before stopping; 0 disables")
    p.add_argument("--redraw", choices=REDRAW, help="redraw augmented views every step or epoch")
    p.add_argument("--full-support", action="store_const", const=True,
                   help="use every node as a negative instead of in-batch nodes")
    p.add_argument("--terms", help=f"comma subset of {','.join(TERMS)}")
    p.add_argument("--nearest-side", choices=NEAREST_SIDES)
    p.add_argument("--normalize", action="store_const", const=True,
                   help="L2-normalise representations before the contrastive loss")
    p.add_argument("--cache-dir", help="neighbour cache directory (default: dataset directory)")
    p.add_argument("--sweep", help="name=v1,v2,... runs one model per value")
    p.add_argument("--jobs", type=int, default=1, help="parallel processes for --sweep")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_dataset_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--out", help="output directory (default: the checkpoint's directory)")
    p.add_argument("--per-user", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic community dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=300)
    p.add_argument("--communities", type=int, default=5)
    p.add_argument("--density", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NesclError as exc:
        print(f"nescl: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"nescl: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
