import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from autodiff.autodiff_module import Graph, GradientMap, backward, evaluate
from confidence.confidence_module import confidence_loss, epoch_batches, sweep_batch_size_bound
from core.core_module import ContractViolation, NonFiniteError, TrainingAbortedError
from data.data_module import Dataset
from discriminator.discriminator_module import (MlpSpec, ModelParams, add_parameters, init_params, log_probs,
                                                parameter_bindings, update_running_stats)
from divergence.divergence_module import DivergenceKind
from smoothness.smoothness_module import SmoothnessConfig, smoothness_loss

logger = logging.getLogger(__name__)

OBJECTIVES = ("unsupervised", "supervised")


@dataclass
class TrainConfig:
    """
    Settings of one training run.

    Args:
        lam: Weight of the smoothness loss in R = L'_c + lam * L'_s.
        rho: Neighborhood width; copied into `smoothness.rho`.
        batch_size: Instances per batch.
        epochs: Passes over the data.
        learning_rate: Constant ADAM step size.
        seed: Seeds the initialization, the shuffling and the direction draws.
        smoothness: Direction sampler and grid settings.
        epsilon: Failure rate used to report the label-completeness batch bound.
        confidence_divergence: f-divergence of the confidence loss.
        objective: "unsupervised" or "supervised" (cross-entropy baseline).
        labeled_per_class: Supervised objective only; keep this many labeled
            instances per class (all of them when None).
        progress: Show a tqdm bar over epochs.
    """
    lam: float = 1.0
    rho: float = 0.04
    batch_size: int = 16
    epochs: int = 1
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    smoothness: SmoothnessConfig = field(default_factory=SmoothnessConfig)
    epsilon: float = 1e-4
    confidence_divergence: DivergenceKind = DivergenceKind.KL
    objective: str = "unsupervised"
    labeled_per_class: Optional[int] = None
    progress: bool = True

    def __post_init__(self):
        if isinstance(self.smoothness, dict):
            self.smoothness = SmoothnessConfig(**self.smoothness)
        self.smoothness.rho = self.rho
        self.confidence_divergence = DivergenceKind.parse(self.confidence_divergence)

    def validate(self, num_classes: int) -> None:
        if self.batch_size < num_classes:
            raise ContractViolation(f"batch_size {self.batch_size} is smaller than the number of labels {num_classes}")
        if self.epochs < 1:
            raise ContractViolation(f"epochs must be at least 1, got {self.epochs}")
        if self.lam < 0:
            raise ContractViolation(f"lambda must be nonnegative, got {self.lam}")
        if self.learning_rate <= 0:
            raise ContractViolation(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0) or self.adam_eps <= 0:
            raise ContractViolation("ADAM betas must lie in [0, 1) and adam_eps must be positive")
        if not 0.0 < self.epsilon < 1.0:
            raise ContractViolation(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.objective not in OBJECTIVES:
            raise ContractViolation(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.labeled_per_class is not None and self.labeled_per_class < 1:
            raise ContractViolation("labeled_per_class must be positive")
        self.smoothness.validate()


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: ModelParams, grads: GradientMap, state: AdamState, cfg: TrainConfig) -> Tuple[ModelParams, AdamState]:
    """
    One bias-corrected ADAM update, applied to `params` in place.

    Raises:
        ContractViolation: A gradient block is missing or misshapen.
        NonFiniteError: A gradient block holds NaN or Inf; names the block.
    """
    for name, value in params.weights.items():
        if name not in grads or grads[name].shape != value.shape:
            raise ContractViolation(f"gradient for {name} missing or misshapen")
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteError(name, "non-finite gradient")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    for name, value in params.weights.items():
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(value)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(value)) + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1 ** state.t)
        v_hat = v / (1.0 - b2 ** state.t)
        params.weights[name] = value - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return params, state


@dataclass
class TrainHistory:
    """Per-step losses and per-epoch timings with running-statistics snapshots."""
    steps: List[Dict[str, float]] = field(default_factory=list)
    epochs: List[Dict[str, Any]] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.steps, columns=["epoch", "step", "confidence", "smoothness", "total"])

    def epoch_frame(self) -> pd.DataFrame:
        """Per-epoch means of the step losses next to the wall time."""
        steps = self.to_frame()
        if steps.empty:
            return pd.DataFrame(columns=["epoch", "confidence", "smoothness", "total", "wall_time"])
        means = steps.groupby("epoch", as_index=False)[["confidence", "smoothness", "total"]].mean()
        times = pd.DataFrame([{"epoch": e["epoch"], "wall_time": e["wall_time"]} for e in self.epochs])
        return means.merge(times, on="epoch", how="left")


EpochCallback = Callable[[int, ModelParams, TrainHistory], None]


def _training_rows(dataset: Dataset, cfg: TrainConfig, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    if cfg.objective == "unsupervised":
        return np.arange(dataset.size)
    if dataset.labels is None:
        raise ContractViolation("labels required for the supervised objective")
    if cfg.labeled_per_class is None:
        return np.arange(dataset.size)
    keep = []
    for y in range(num_classes):
        members = np.flatnonzero(dataset.labels == y)
        if members.size < cfg.labeled_per_class:
            raise ContractViolation(f"class {y} has {members.size} instances, {cfg.labeled_per_class} requested")
        keep.append(rng.choice(members, size=cfg.labeled_per_class, replace=False))
    return np.sort(np.concatenate(keep))


def _build_step(params: ModelParams, X: np.ndarray, labels: Optional[np.ndarray], cfg: TrainConfig,
                rng: np.random.Generator) -> Tuple[Graph, Dict[str, int]]:
    num_classes = params.spec.num_classes
    graph = Graph()
    nodes = add_parameters(graph, params)
    x = graph.input("X", X.shape)
    logp = log_probs(graph, params, nodes, x, "train")
    heads: Dict[str, int] = {}
    if cfg.objective == "supervised":
        onehot = graph.constant(np.eye(num_classes)[labels])
        heads["confidence"] = graph.neg(graph.mean(graph.sum(graph.mul(logp, onehot), axis=1)))
        heads["total"] = heads["confidence"]
        return graph, heads
    heads["confidence"] = confidence_loss(graph, graph.exp(logp), num_classes, cfg.confidence_divergence)
    heads["total"] = heads["confidence"]
    if cfg.lam > 0:
        heads["smoothness"] = smoothness_loss(graph, params, nodes, x, X, cfg.smoothness, rng)
        heads["total"] = graph.add(heads["confidence"], graph.scale(heads["smoothness"], cfg.lam))
    return graph, heads


def train(spec: MlpSpec, dataset: Dataset, cfg: TrainConfig,
          on_epoch_end: Optional[EpochCallback] = None) -> Tuple[ModelParams, TrainHistory]:
    """
    Minimizes R(theta) = L'_c + lam * L'_s over shuffled batches with ADAM.

    Batch normalization runs in train mode for the confidence term and in
    eval mode for the smoothness term. The last incomplete batch of each epoch
    is dropped.

    Args:
        spec: Network shape; its input_dim must match the dataset.
        dataset: Training instances. Labels are only read by the supervised objective.
        cfg: Training settings.
        on_epoch_end: Called after every epoch with (epoch, params, history).

    Returns:
        The final parameters and the training history.

    Raises:
        ContractViolation: Invalid configuration or too few instances.
        TrainingAbortedError: A loss or gradient became non-finite.
    """
    cfg.validate(spec.num_classes)
    if dataset.dim != spec.input_dim:
        raise ContractViolation(f"dataset has {dataset.dim} features, the model expects {spec.input_dim}")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(spec, cfg.seed)
    rows = _training_rows(dataset, cfg, spec.num_classes, rng)
    if rows.size < cfg.batch_size:
        raise ContractViolation(f"{rows.size} training instances cannot fill a batch of {cfg.batch_size}")

    if cfg.objective == "unsupervised":
        needed = sweep_batch_size_bound(spec.num_classes, rows.size, cfg.epochs, cfg.epsilon)
        if cfg.batch_size < needed:
            logger.warning(f"batch_size {cfg.batch_size} is below {needed}, the size at which every batch of "
                           f"{cfg.epochs} epochs is label complete with probability {1 - cfg.epsilon:g} under balanced classes")

    logger.info(f"Training {cfg.objective} model {spec.layer_dims} on {rows.size} instances "
                f"(lambda={cfg.lam:g}, rho={cfg.rho:g}, b={cfg.batch_size}, epochs={cfg.epochs})")
    state = AdamState()
    history = TrainHistory()
    step = 0
    for epoch in tqdm(range(1, cfg.epochs + 1), desc="Training", disable=not cfg.progress):
        started = time.perf_counter()
        for batch in epoch_batches(rows.size, cfg.batch_size, rng):
            idx = rows[batch]
            X = dataset.X[idx]
            labels = dataset.labels[idx] if cfg.objective == "supervised" else None
            bindings = {**parameter_bindings(params), "X": X}
            try:
                graph, heads = _build_step(params, X, labels, cfg, rng)
                values = evaluate(graph, bindings)
                grads = backward(graph, heads["total"], bindings, wrt=list(params.weights), values=values)
                update_running_stats(params, graph, values)
                adam_step(params, grads, state, cfg)
            except NonFiniteError as e:
                snapshot = {
                    "epoch": epoch,
                    "step": step,
                    "where": e.where,
                    "batch_indices": idx.tolist(),
                    "parameter_norms": {k: float(np.linalg.norm(v)) for k, v in params.weights.items()},
                }
                raise TrainingAbortedError(f"training aborted at epoch {epoch}, step {step}: {e}", snapshot) from e
            record = {"epoch": epoch, "step": step,
                      "confidence": float(values[heads["confidence"]].reshape(())),
                      "smoothness": float(values[heads["smoothness"]].reshape(())) if "smoothness" in heads else 0.0,
                      "total": float(values[heads["total"]].reshape(()))}
            logger.debug(f"step {step}: {record}")
            history.steps.append(record)
            step += 1
        history.epochs.append({"epoch": epoch, "wall_time": time.perf_counter() - started,
                               "running": {k: v.copy() for k, v in params.running.items()}})
        recent = history.steps[-1] if history.steps else {}
        logger.info(f"Epoch {epoch}/{cfg.epochs}: last total loss {recent.get('total', float('nan')):.6f}")
        if on_epoch_end is not None:
            on_epoch_end(epoch, params, history)
    return params, history
