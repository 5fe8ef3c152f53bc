import itertools
import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from autodiff.autodiff_module import Graph, LossGraph
from core.core_module import EPS_NUM, ContractViolation, NoLabelCompleteSubsetError
from discriminator.discriminator_module import ModelParams, add_parameters, log_probs, parameter_bindings, predict
from divergence.divergence_module import DivergenceKind
from transmission.transmission_module import is_label_complete, label_transition, label_transition_node

logger = logging.getLogger(__name__)

MAX_EXACT_SET = 12


@dataclass
class ConfidenceConfig:
    batch_size: int
    divergence: DivergenceKind = DivergenceKind.KL
    epsilon: float = 1e-4

    def validate(self, num_classes: int) -> None:
        if self.batch_size < num_classes:
            raise ContractViolation(f"batch_size {self.batch_size} is smaller than the number of labels {num_classes}")
        if not 0.0 < self.epsilon < 1.0:
            raise ContractViolation(f"epsilon must lie in (0, 1), got {self.epsilon}")


def batch_size_bound(prior_min: float, num_batches: int, num_classes: int, epsilon: float) -> int:
    """
    Smallest batch size b with b > ln(T |Y| / epsilon) / prior_min.

    With that b, T batches drawn i.i.d. are all label complete with
    probability at least 1 - epsilon.

    Args:
        prior_min: Smallest class prior, in (0, 1].
        num_batches: Number of batches T.
        num_classes: |Y|.
        epsilon: Allowed failure probability.
    """
    if not 0.0 < prior_min <= 1.0:
        raise ContractViolation(f"prior_min must lie in (0, 1], got {prior_min}")
    if num_batches < 1 or num_classes < 1:
        raise ContractViolation("num_batches and num_classes must be positive")
    if not 0.0 < epsilon < 1.0:
        raise ContractViolation(f"epsilon must lie in (0, 1), got {epsilon}")
    return int(math.floor(math.log(num_batches * num_classes / epsilon) / prior_min)) + 1


def sweep_batch_size_bound(num_classes: int, dataset_size: int, sweeps: int, epsilon: float,
                           prior_min: Optional[float] = None) -> int:
    """
    Self-consistent batch size for `sweeps` passes over a dataset.

    The number of batches depends on b (T = sweeps * |U| / b), so the bound
    b > ln(sweeps |U| |Y| / (epsilon b)) / prior_min is solved by fixed-point
    iteration and then nudged to the smallest integer that satisfies it.
    """
    prior = prior_min if prior_min is not None else 1.0 / num_classes
    if not 0.0 < prior <= 1.0:
        raise ContractViolation(f"prior_min must lie in (0, 1], got {prior}")
    if dataset_size < 1 or sweeps < 1:
        raise ContractViolation("dataset_size and sweeps must be positive")

    def rhs(b: int) -> float:
        return math.log(sweeps * dataset_size * num_classes / (epsilon * b)) / prior

    b = max(num_classes, 1)
    for _ in range(200):
        nxt = max(1, int(math.floor(rhs(b))) + 1)
        if nxt == b:
            break
        b = nxt
    while b > 1 and b - 1 > rhs(b - 1):
        b -= 1
    while not b > rhs(b):
        b += 1
    return b


def transmission_loss(Q: np.ndarray, kind: DivergenceKind = DivergenceKind.KL) -> float:
    """max_y f(1_y || T(.|y)) for a batch of predictions, as a plain number."""
    kind = DivergenceKind.parse(kind)
    stay = np.clip(np.diag(label_transition(Q)), EPS_NUM, 1.0)
    per_label = -np.log(stay) if kind is DivergenceKind.KL else 1.0 - np.sqrt(stay)
    return float(np.max(per_label))


def confidence_loss(graph: Graph, q: int, num_classes: int, kind: DivergenceKind = DivergenceKind.KL) -> int:
    """
    Appends L'_c = max_y f(1_y || T(.|y)) for the n x |Y| probability node `q`.

    For KL this is max_y -log T(y|y); for the squared Hellinger distance
    max_y 1 - sqrt(T(y|y)). T(y|y) is clamped to EPS_NUM first, and the max
    passes its gradient to the lowest-index maximizer.
    """
    kind = DivergenceKind.parse(kind)
    T = label_transition_node(graph, q)
    stay = graph.clamp(graph.sum(graph.mul(T, graph.constant(np.eye(num_classes))), axis=1))
    if kind is DivergenceKind.KL:
        per_label = graph.neg(graph.log(stay))
    else:
        per_label = graph.sub(graph.constant(np.ones(1)), graph.sqrt(stay))
    return graph.max(per_label)


def confidence_loss_graph(params: ModelParams, X: np.ndarray, mode: str = "train",
                          kind: DivergenceKind = DivergenceKind.KL) -> LossGraph:
    """L'_c of the model on one batch, ready for evaluation and differentiation."""
    X = np.asarray(X, dtype=np.float64)
    graph = Graph()
    nodes = add_parameters(graph, params)
    x = graph.input("X", X.shape)
    logp = log_probs(graph, params, nodes, x, mode)
    out = confidence_loss(graph, graph.exp(logp), params.spec.num_classes, kind)
    return LossGraph(graph, out, {**parameter_bindings(params), "X": X})


def exact_worst_case_loss(params: ModelParams, X: np.ndarray, labels: np.ndarray,
                          kind: DivergenceKind = DivergenceKind.KL) -> float:
    """
    Worst-case transmission failure over every label-complete subset of a
    small labeled set (exponential enumeration; test oracle only).

    Raises:
        ContractViolation: More than MAX_EXACT_SET instances.
        NoLabelCompleteSubsetError: Some class has no instance in the set.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    n = X.shape[0]
    if n > MAX_EXACT_SET:
        raise ContractViolation(f"exact enumeration is limited to {MAX_EXACT_SET} instances, got {n}")
    num_classes = params.spec.num_classes
    if not is_label_complete(labels, num_classes):
        raise NoLabelCompleteSubsetError(f"labels {sorted(set(labels.tolist()))} do not cover all {num_classes} classes")
    Q = predict(params, X, "eval")
    worst = -np.inf
    for size in range(num_classes, n + 1):
        for subset in itertools.combinations(range(n), size):
            idx = list(subset)
            if is_label_complete(labels[idx], num_classes):
                worst = max(worst, transmission_loss(Q[idx], kind))
    return float(worst)


def sample_batch(n: int, b: int, rng: np.random.Generator) -> np.ndarray:
    """b distinct indices drawn uniformly from range(n)."""
    if b > n:
        raise ContractViolation(f"cannot draw {b} distinct instances from {n}")
    if b < 1:
        raise ContractViolation("batch size must be positive")
    return rng.choice(n, size=b, replace=False)


def epoch_batches(n: int, b: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffles range(n) and cuts it into floor(n / b) batches; the tail is dropped."""
    if b > n:
        raise ContractViolation(f"batch size {b} exceeds dataset size {n}")
    order = rng.permutation(n)
    return [order[i * b:(i + 1) * b] for i in range(n // b)]
