"""``modmoe`` command line: gen-data, split, augment, train, eval, routing-stats.

Data goes to files under ``--out``; logs go to stderr. Failures print one JSON
line ``{"error": <kind>, "message": ...}`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as dataio
from .analytics import activation_stats, tabulate
from .config import RunConfig, dump_run_config, load_run_config
from .errors import ConfigurationError, ParseError, TrainingError
from .model import FusionModel
from .routing import RoutingTrace, write_trace_csv
from .training import train

log = logging.getLogger("modmoe")

EXIT_CODES = {"config": 2, "io": 3, "parse": 4, "training": 5, "error": 1}


def _add_common(p):
    p.add_argument("--config", type=Path, help="YAML run config")
    p.add_argument("--seed", type=int, help="overrides generator, split and training seeds")
    p.add_argument("--strategy", choices=["shared", "per-modality"])
    p.add_argument("--top-k", type=int, dest="top_k")
    p.add_argument("--experts", type=int)
    p.add_argument("--lambda-bal", type=float, dest="lambda_bal")
    p.add_argument("--lambda-spec", type=float, dest="lambda_spec")
    p.add_argument("--out", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="modmoe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--binary", action="store_true", help="write the length-prefixed binary format")
    p = sub.add_parser("split", help="participant-grouped train/val/test split")
    _add_common(p)
    p = sub.add_parser("augment", help="append single-modality copies of multi-modality subjects")
    _add_common(p)
    p = sub.add_parser("train", help="train one model per seed")
    _add_common(p)
    p = sub.add_parser("eval", help="RMSE tables for trained checkpoints")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, action="append", help="checkpoint(s); default: model_seed*.npz in --out")
    p = sub.add_parser("routing-stats", help="expert-activation statistics")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, action="append")
    p.add_argument("--argmax-only", action="store_true", help="count only the argmax expert as activated")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.generator.seed = args.seed
        cfg.split_seed = args.seed
        cfg.train.seeds = (args.seed,)
    if args.strategy:
        cfg.routing.strategy = args.strategy
    if args.top_k is not None:
        cfg.routing.top_k = args.top_k
    if args.experts is not None:
        cfg.routing.experts = args.experts
    if args.lambda_bal is not None:
        cfg.train.lambda_bal = args.lambda_bal
    if args.lambda_spec is not None:
        cfg.train.lambda_spec = args.lambda_spec
    if args.out is not None:
        cfg.out = str(args.out)
    cfg.verbosity = max(cfg.verbosity, args.verbose)
    return cfg.validate()


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise ConfigurationError(f"--data is required ({what})")
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _data_file(path: Path, name: str) -> Path:
    """``path`` itself, or ``path/name`` when ``path`` is a directory."""
    target = path / name if path.is_dir() else path
    if not target.exists():
        raise FileNotFoundError(f"no such file: {target}")
    return target


def _checkpoints(args, out: Path) -> list[Path]:
    paths = args.checkpoint or sorted(Path(p) for p in glob.glob(str(out / "model_seed*.npz")))
    if not paths:
        raise FileNotFoundError(f"no checkpoints given and none found in {out}")
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"no such file: {p}")
    return paths


def cmd_gen_data(cfg, args, out):
    ds = dataio.generate(cfg.generator)
    path = out / ("dataset.bin" if args.binary else "dataset.jsonl")
    dataio.save_dataset(ds, path, binary=args.binary)
    log.info("wrote %d subjects to %s", len(ds), path)


def cmd_split(cfg, args, out):
    ds = dataio.load_dataset(_data_file(_require(args.data, "dataset file"), "dataset.jsonl"))
    parts = dataio.split_grouped(ds, cfg.split, seed=cfg.split_seed)
    report = {}
    for name, part in zip(("train", "val", "test"), parts):
        dataio.write_jsonl(part, out / f"{name}.jsonl")
        report[name] = {"subjects": len(part), "participants": len({r.participant_id for r in part})}
    (out / "split_report.json").write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")


def cmd_augment(cfg, args, out):
    test = dataio.load_dataset(_data_file(_require(args.data, "test split"), "test.jsonl"))
    aug = dataio.augment_withholding(test)
    dataio.write_jsonl(aug, out / "test_augmented.jsonl")
    log.info("augmented %d -> %d subjects", len(test), len(aug))


def cmd_train(cfg, args, out):
    src = _require(args.data, "directory with train.jsonl and val.jsonl")
    tr = dataio.load_dataset(_data_file(src, "train.jsonl")).to_batch()
    va = dataio.load_dataset(src / "val.jsonl" if src.is_dir() else src.with_name("val.jsonl")).to_batch()
    for seed in cfg.train.seeds:
        model = FusionModel(cfg.model, cfg.routing, seed=seed)
        res = train(model, tr, va, cfg.train, seed=seed, history_path=out / f"history_seed{seed}.jsonl")
        model.save(out / f"model_seed{seed}.npz")
        log.info("seed %d: best epoch %d, val RMSE %.4f", seed, res.best_epoch, res.best_val_rmse)


def _eval_set(args):
    src = _require(args.data, "evaluation dataset")
    if src.is_dir():
        aug = src / "test_augmented.jsonl"
        return dataio.load_dataset(aug if aug.exists() else _data_file(src, "test.jsonl"))
    return dataio.load_dataset(src)


def cmd_eval(cfg, args, out):
    ds = _eval_set(args)
    batch = ds.to_batch()
    preds = [FusionModel.load(p).predict(batch) for p in _checkpoints(args, out)]
    report = tabulate(batch.availability, batch.target, preds, ds.modalities)
    report.write(out / "metrics.json", out / "metrics.csv")
    log.info("overall RMSE %.4f +- %.4f", report.overall.mean, report.overall.std)


def cmd_routing_stats(cfg, args, out):
    ds = _eval_set(args)
    batch = ds.to_batch()
    traces = []
    for p in _checkpoints(args, out):
        _, trace = FusionModel.load(p).predict(batch, return_trace=True)
        traces.append(trace)
    write_trace_csv(traces[0], [r.subject_id for r in ds.records], ds.modalities, out / "routing_trace.csv")
    pooled = RoutingTrace.concat(traces)
    report = activation_stats(pooled, ds.modalities, argmax_only=args.argmax_only)
    report.write_csv(out / "activation.csv")
    (out / "activation_summary.json").write_text(json.dumps(report.summary(), indent=1) + "\n", encoding="utf-8")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "split": cmd_split,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "routing-stats": cmd_routing_stats,
}


def _fail(kind, exc):
    sys.stderr.write(json.dumps({"error": kind, "message": str(exc)}) + "\n")
    return EXIT_CODES[kind]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr, level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        dump_run_config(cfg, out / "config.resolved.yaml")
        np.seterr(over="ignore", under="ignore")
        COMMANDS[args.command](cfg, args, out)
    except ConfigurationError as exc:
        return _fail("config", exc)
    except ParseError as exc:
        return _fail("parse", exc)
    except (FileNotFoundError, OSError) as exc:
        return _fail("io", exc)
    except TrainingError as exc:
        return _fail("training", exc)
    except (ValueError, TypeError) as exc:
        return _fail("error", exc)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
