import json
import logging
import os
import subprocess
import sys
from dataclasses import replace
from typing import Any, Dict, Optional, Tuple

# Add the project root directory to the Python path
project_root = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, project_root)

from config.config_module import DataConfig, RunConfig
from core.core_module import VERSION, ContractViolation, resolve_threads
from data.data_module import (Dataset, concat, gen_two_circles, load_csv, load_idx, standardize, subset)
from discriminator.discriminator_module import ModelParams, predict, save_checkpoint
from evaluation.evaluation_module import AssignmentResult, clustering_accuracy, heatmap_grid
from trainer.trainer_module import TrainHistory, train

logger = logging.getLogger(__name__)


def describe_version() -> str:
    """`git describe` of the working tree, or the package version outside a checkout."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=project_root,
                             capture_output=True, text=True, timeout=5, check=True)
        return out.stdout.strip() or VERSION
    except (OSError, subprocess.SubprocessError):
        return VERSION


def load_datasets(data: DataConfig, seed: int = 0) -> Tuple[Dataset, Optional[Dataset]]:
    """
    Builds the train split and, where the source has one, the test split.

    Standardization is fitted on the train split and reused on the test
    split. With the "clustering" protocol the two splits are joined and used
    for both training and evaluation.
    """
    opts = data.options
    if data.kind == "two_circles":
        train_ds = gen_two_circles(opts["n_per_class"], opts["r_inner"], opts["r_outer"], opts["noise_sigma"],
                                   opts["seed"])
        test_ds = None
        if opts["test_per_class"]:
            test_ds = gen_two_circles(opts["test_per_class"], opts["r_inner"], opts["r_outer"],
                                      opts["noise_sigma"], opts["seed"] + 1)
        return train_ds, test_ds

    if data.kind == "idx":
        train_ds = load_idx(opts["train_images"], opts["train_labels"])
        test_ds = load_idx(opts["test_images"], opts["test_labels"]) if opts["test_images"] else None
        if opts["classes"] is not None:
            per_class = opts["per_class"] or int(min(
                (train_ds.labels == c).sum() for c in opts["classes"]))
            train_ds = subset(train_ds, opts["classes"], per_class, seed)
            if test_ds is not None:
                test_per_class = opts["test_per_class"] or int(min(
                    (test_ds.labels == c).sum() for c in opts["classes"]))
                test_ds = subset(test_ds, opts["classes"], test_per_class, seed)
    elif data.kind == "csv":
        train_ds = load_csv(opts["path"], opts["label_column"])
        test_ds = load_csv(opts["test_path"], opts["label_column"]) if opts["test_path"] else None
    else:
        raise ContractViolation(f"unknown data kind {data.kind!r}")

    if opts.get("standardize"):
        train_ds, transform = standardize(train_ds)
        if test_ds is not None:
            test_ds = transform.apply(test_ds)
        logger.info(f"Standardized with mean {transform.mean:.4f}, std {transform.std:.4f}")
    if opts.get("protocol") == "clustering" and test_ds is not None:
        train_ds = concat(train_ds, test_ds)
        test_ds = train_ds
    return train_ds, test_ds


class PiecewisePipeline:
    def __init__(self, cfg: RunConfig):
        """
        Wires data loading, training, evaluation and artifact writing for one run.

        Args:
            cfg: A validated run configuration.
        """
        self.cfg = cfg
        self.out = cfg.out
        self.threads = resolve_threads(cfg.deterministic)
        self.params: Optional[ModelParams] = None
        self.history: Optional[TrainHistory] = None

    def path(self, *parts: str) -> str:
        return os.path.join(self.out, *parts)

    def run(self) -> Dict[str, Any]:
        """
        Trains the model and writes model.json, history.csv, epochs.csv,
        manifest.json and (with test labels) evaluation.json to the output
        directory.

        Returns:
            The run summary that is also stored in the manifest.
        """
        os.makedirs(self.out, exist_ok=True)
        train_ds, test_ds = load_datasets(self.cfg.data, self.cfg.seed)
        spec = replace(self.cfg.model, input_dim=train_ds.dim)
        logger.info(f"Run '{self.cfg.name}': {train_ds.size} training instances, model {spec.layer_dims}")

        self.params, self.history = train(spec, train_ds, self.cfg.train, on_epoch_end=self.on_epoch_end)
        save_checkpoint(self.params, self.path("model.json"), extra={"run": self.cfg.name})
        self.history.to_frame().to_csv(self.path("history.csv"), index=False)
        self.history.epoch_frame().to_csv(self.path("epochs.csv"), index=False)

        summary: Dict[str, Any] = {"steps": len(self.history.steps), "epochs": len(self.history.epochs)}
        if self.history.steps:
            summary["final_loss"] = self.history.steps[-1]["total"]
        eval_ds = test_ds if test_ds is not None else train_ds
        if eval_ds.labels is not None:
            result = self.evaluate(eval_ds)
            summary["accuracy"] = result.accuracy
            summary["nmi"] = result.nmi
            with open(self.path("evaluation.json"), 'w', encoding='utf-8') as f:
                json.dump(result.to_dict(), f)
        self.write_manifest(summary)
        return summary

    def evaluate(self, ds: Dataset) -> AssignmentResult:
        pred = predict(self.params, ds.X, "eval").argmax(axis=1)
        result = clustering_accuracy(pred, ds.labels, self.params.spec.num_classes)
        logger.info(f"Clustering accuracy {result.accuracy:.4f} (NMI {result.nmi:.4f}) on {ds.name}")
        return result

    def on_epoch_end(self, epoch: int, params: ModelParams, history: TrainHistory) -> None:
        """Periodic checkpoints and heatmap snapshots."""
        every = self.cfg.checkpoint_every
        if every and epoch % every == 0:
            os.makedirs(self.path("checkpoints"), exist_ok=True)
            save_checkpoint(params, self.path("checkpoints", f"epoch_{epoch:05d}.json"), extra={"epoch": epoch})
        if epoch in self.cfg.snapshot_epochs:
            if params.spec.input_dim != 2:
                logger.warning(f"Skipping heatmap snapshot at epoch {epoch}: model has {params.spec.input_dim} inputs")
                return
            grid = heatmap_grid(params, tuple(self.cfg.heatmap.bbox), self.cfg.heatmap.resolution, self.threads)
            grid.to_csv(self.path(f"heatmap_epoch_{epoch:05d}.csv"), index=False)

    def write_manifest(self, summary: Dict[str, Any]) -> None:
        manifest = {"version": describe_version(), "config": self.cfg.to_dict(), "summary": summary}
        with open(self.path("manifest.json"), 'w', encoding='utf-8') as f:
            json.dump(manifest, f, indent=2)
