"""
Command-line entry point.

    python cli.py train --config configs/two_circles.yaml
    python cli.py eval --checkpoint runs/two_circles/model.json --data configs/two_circles.yaml --stability stab.csv
    python cli.py heatmap --checkpoint model.json --bbox -3,3,-3,3 --resolution 100 --out heat.csv
    python cli.py batch-size --prior-min 0.1 --batches 1000 --classes 10 --epsilon 0.01
    python cli.py probe-margin --checkpoint model.json --data data.csv --tau 0.01 --rho-grid 0.01,0.02,0.04
    python cli.py analyze --checkpoint model.json --data data.csv --out analysis/

Every command prints one JSON line on stdout. Exit codes: 0 success, 2
usage/config/input errors, 3 runtime abort.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from config.config_module import load_run_config
from confidence.confidence_module import (batch_size_bound, sample_batch, sweep_batch_size_bound,
                                          transmission_loss)
from core.core_module import (ConfigError, ContractViolation, IdxFormatError, NonFiniteError,
                              NoLabelCompleteSubsetError, TrainingAbortedError, configure_logging, resolve_threads)
from data.data_module import Dataset, load_csv
from discriminator.discriminator_module import load_checkpoint, predict
from divergence.divergence_module import DivergenceKind
from evaluation.evaluation_module import clustering_accuracy, extreme_instances, heatmap_grid, stability_stats
from pipeline import PiecewisePipeline, load_datasets
from smoothness.smoothness_module import margin_probe, stability_frame
from transmission.transmission_module import (instance_transition, is_diagonal, label_transition,
                                              recurrent_class_count)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ABORT = 3


def emit(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload), flush=True)


def seed_arg(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"seed must be a nonnegative integer, got {value}")
    return value


def parse_floats(text: str, expected: Optional[int] = None) -> List[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ContractViolation(f"expected comma-separated numbers, got {text!r}") from e
    if expected is not None and len(values) != expected:
        raise ContractViolation(f"expected {expected} comma-separated numbers, got {len(values)}")
    return values


def load_dataset_arg(path: str, label_column: Optional[str] = "label") -> Dataset:
    """
    Resolves --data: a CSV file (labels from `label_column` when that column
    exists) or a run config whose test split, or else train split, is used.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if path.endswith((".csv", ".csv.gz")):
        header = pd.read_csv(path, nrows=0).columns
        return load_csv(path, label_column if label_column in header else None)
    cfg = load_run_config(path)
    train_ds, test_ds = load_datasets(cfg.data, cfg.seed)
    return test_ds if test_ds is not None else train_ds


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    if args.out:
        cfg.out = args.out
    if args.checkpoint_every is not None:
        cfg.checkpoint_every = args.checkpoint_every
    cfg.train = replace(cfg.train, progress=not args.quiet)
    summary = PiecewisePipeline(cfg).run()
    emit({"command": "train", "out": cfg.out, **summary})
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    params = load_checkpoint(args.checkpoint)
    ds = load_dataset_arg(args.data, args.label_column)
    if ds.labels is None:
        raise ContractViolation(f"labels required to evaluate on {ds.name}")
    pred = predict(params, ds.X, "eval").argmax(axis=1)
    result = clustering_accuracy(pred, ds.labels, params.spec.num_classes)
    payload: Dict[str, Any] = {"command": "eval", "data": ds.name, **result.to_dict()}
    if args.stability:
        rows, summary = stability_stats(params, ds, resolve_threads(args.deterministic))
        stability_frame(rows).to_csv(args.stability, index=False)
        payload["stability"] = args.stability
        payload["mean_fisher_trace"] = float(np.mean([r.fisher_trace for r in rows]))
        if args.extremes:
            base, _ = os.path.splitext(args.stability)
            stability_frame(extreme_instances(rows, args.extremes)).to_csv(f"{base}_extremes.csv", index=False)
            summary.to_csv(f"{base}_summary.csv")
    emit(payload)
    return EXIT_OK


def cmd_heatmap(args: argparse.Namespace) -> int:
    params = load_checkpoint(args.checkpoint)
    grid = heatmap_grid(params, tuple(parse_floats(args.bbox, 4)), args.resolution, resolve_threads(args.deterministic))
    grid.to_csv(args.out, index=False)
    emit({"command": "heatmap", "out": args.out, "points": int(len(grid))})
    return EXIT_OK


def cmd_batch_size(args: argparse.Namespace) -> int:
    payload: Dict[str, Any] = {"command": "batch-size"}
    payload["batch_size"] = batch_size_bound(args.prior_min, args.batches, args.classes, args.epsilon)
    if args.sweeps is not None and args.dataset_size is not None:
        payload["sweep_batch_size"] = sweep_batch_size_bound(args.classes, args.dataset_size, args.sweeps,
                                                             args.epsilon, args.prior_min)
    emit(payload)
    return EXIT_OK


def cmd_probe_margin(args: argparse.Namespace) -> int:
    params = load_checkpoint(args.checkpoint)
    ds = load_dataset_arg(args.data, args.label_column)
    margin = margin_probe(params, ds.X, args.tau, parse_floats(args.rho_grid), DivergenceKind.parse(args.divergence),
                          args.directions, args.seed, resolve_threads(args.deterministic))
    emit({"command": "probe-margin", "tau": args.tau, "margin": margin})
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    params = load_checkpoint(args.checkpoint)
    ds = load_dataset_arg(args.data, args.label_column)
    rng = np.random.default_rng(args.seed)
    idx = np.sort(sample_batch(ds.size, min(args.batch_size, ds.size), rng))
    Q = predict(params, ds.X[idx], "eval")
    T = label_transition(Q)
    S = instance_transition(Q)
    os.makedirs(args.out, exist_ok=True)
    labels = [f"y{c}" for c in range(T.shape[0])]
    pd.DataFrame(T, index=labels, columns=labels).to_csv(os.path.join(args.out, "label_transition.csv"))
    pd.DataFrame(S, index=idx, columns=idx).to_csv(os.path.join(args.out, "instance_transition.csv"))
    emit({"command": "analyze", "batch": int(idx.size), "is_diagonal": is_diagonal(T),
          "recurrent_classes": recurrent_class_count(S), "confidence_loss": transmission_loss(Q)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="piecewise", description="Unsupervised piecewise constant classifiers")
    parser.add_argument("--log-level", default=os.environ.get("PIECEWISE_LOG_LEVEL", "WARNING"))
    parser.add_argument("--log-file", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, data: bool = True) -> None:
        p.add_argument("--checkpoint", required=True)
        if data:
            p.add_argument("--data", required=True, help="CSV file or run config")
            p.add_argument("--label-column", default="label")
        p.add_argument("--seed", type=seed_arg, default=0)
        p.add_argument("--deterministic", action="store_true")

    p = sub.add_parser("train", help="Train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=seed_arg, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--quiet", action="store_true", help="No progress bar")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Clustering accuracy and stability statistics")
    common(p)
    p.add_argument("--stability", default=None, help="Write per-instance stability CSV here")
    p.add_argument("--extremes", type=int, default=0, help="Also write the N least/most stable instances per class")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="Probability, Fisher trace and entropy on a 2-D grid")
    common(p, data=False)
    p.add_argument("--bbox", default="-3,3,-3,3")
    p.add_argument("--resolution", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("batch-size", help="Batch size for label-complete batches")
    p.add_argument("--prior-min", type=float, required=True)
    p.add_argument("--batches", type=int, default=1)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--sweeps", type=int, default=None)
    p.add_argument("--dataset-size", type=int, default=None)
    p.set_defaults(func=cmd_batch_size)

    p = sub.add_parser("probe-margin", help="Empirical attack-free margin")
    common(p)
    p.add_argument("--tau", type=float, default=1e-2)
    p.add_argument("--rho-grid", required=True)
    p.add_argument("--directions", type=int, default=1000)
    p.add_argument("--divergence", default="hel2")
    p.set_defaults(func=cmd_probe_margin)

    p = sub.add_parser("analyze", help="Dump label and instance transition matrices of a batch")
    common(p)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    configure_logging(args.log_level, args.log_file)
    try:
        return args.func(args)
    except ConfigError as e:
        for line in e.diagnostics:
            logger.error(line)
        emit({"error": "config", "diagnostics": e.diagnostics})
        return EXIT_USAGE
    except (ContractViolation, IdxFormatError, NoLabelCompleteSubsetError, FileNotFoundError) as e:
        logger.error(str(e))
        emit({"error": type(e).__name__, "message": str(e)})
        return EXIT_USAGE
    except (TrainingAbortedError, NonFiniteError) as e:
        logger.error(str(e))
        emit({"error": type(e).__name__, "message": str(e), "snapshot": getattr(e, "snapshot", {})})
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
