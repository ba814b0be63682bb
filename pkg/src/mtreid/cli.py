"""Command line: ``mtreid {synth,train,extract,eval,plot}``.

Exit codes: 0 success, 2 config error, 3 training diverged, 4 IO or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import pipeline
from .binio import FormatError
from .config import ConfigError, RunConfig, load_config
from .data import DataError, ManifestError
from .evaluator import REFERENCE_ATTRIBUTE_AP, EvalError
from .matcher import SignatureStore
from .model import ModelError
from .plotting import plot_cmc, plot_training
from .trainer import CheckpointError, DivergenceError, TrainingLog

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("mtreid")


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.out is not None:
        cfg = cfg.with_output_dir(args.out)
    if args.seed is not None:
        if args.command == "eval":
            cfg = dataclasses.replace(cfg, evaluation=dataclasses.replace(cfg.evaluation, seed=args.seed))
        else:
            cfg = cfg.with_seed(args.seed)
    return cfg


def _weights(args, cfg: RunConfig) -> Path:
    return Path(args.weights) if args.weights else Path(cfg.output_dir) / pipeline.WEIGHTS


def cmd_synth(args) -> int:
    cfg = _config(args)
    for path in pipeline.synth(cfg):
        print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    result = pipeline.train(cfg, resume=args.resume)
    out = Path(cfg.output_dir)
    print(f"trained {result.log.last_step} steps; weights {out / pipeline.WEIGHTS}, log {out / pipeline.TRAIN_LOG}")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = _config(args)
    registry = pipeline.load_registry(cfg)
    model = pipeline.load_model(cfg, registry, _weights(args, cfg))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.write_effective_config(cfg, out)
    store = pipeline.extract_test(model, registry)
    path = Path(args.store) if args.store else out / pipeline.STORE
    store.save(path)
    print(f"{len(store)} signatures of dimension {store.dim} -> {path}")
    return EXIT_OK


def _write_attribute_table(path: Path, per_attribute: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["attribute", "ap", "reference_ap"])
        for name, ap in per_attribute.items():
            writer.writerow([name, "" if ap is None else f"{ap:.4f}", REFERENCE_ATTRIBUTE_AP.get(name, "")])


def cmd_eval(args) -> int:
    cfg = _config(args)
    registry = pipeline.load_registry(cfg)
    model = pipeline.load_model(cfg, registry, _weights(args, cfg))
    store = SignatureStore.load(args.store) if args.store else None
    result = pipeline.evaluate(cfg, model, registry, store)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.write_effective_config(cfg, out)
    (out / pipeline.REPORT).write_text(pipeline.report_json(result.report), encoding="utf-8")
    plot_cmc(result.curve, out / "cmc.png")
    if result.attributes is not None:
        _write_attribute_table(out / "attributes.csv", result.attributes.per_attribute)
    mean_ap = result.report["mean_ap"]
    print(f"rank-1 {result.curve.rank1:.4f}" + ("" if mean_ap is None else f", attribute mean AP {mean_ap:.4f}"))
    return EXIT_OK


def cmd_plot(args) -> int:
    if args.log:
        log_path = Path(args.log)
    elif args.config:
        log_path = Path(_config(args).output_dir) / pipeline.TRAIN_LOG
    elif args.out:
        log_path = Path(args.out) / pipeline.TRAIN_LOG
    else:
        raise ConfigError("plot needs --log, --config or --out")
    training = TrainingLog.read_csv(log_path)
    out = Path(args.out) if args.out else log_path.parent
    out.mkdir(parents=True, exist_ok=True)
    print(plot_training(training, out / "training.png"))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "extract": cmd_extract,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtreid", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="run config (YAML)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="override the run seed (for eval: the trial seed)")

    common(sub.add_parser("synth", help="write synthetic datasets as manifests and PNGs"))
    p = sub.add_parser("train", help="run the stage plan")
    common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    for name, text in (("extract", "signatures of the test split"), ("eval", "CMC and attribute AP report")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--weights", help="weight file (default: <out>/model.weights)")
        p.add_argument("--store", help="signature store to write (extract) or read (eval)")
    p = sub.add_parser("plot", help="training curves from a log CSV")
    common(p, config_required=False)
    p.add_argument("--log", help="training log CSV (default: <out>/train_log.csv)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ManifestError, FormatError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ModelError, DataError, EvalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
