import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment
from scipy.stats import entropy
from sklearn.metrics import confusion_matrix, normalized_mutual_info_score

from core.core_module import ContractViolation, map_chunks
from data.data_module import Dataset
from discriminator.discriminator_module import ModelParams, predict, score_matrices
from smoothness.smoothness_module import StabilityRow, stability_frame, stability_report

logger = logging.getLogger(__name__)

HEATMAP_COLUMNS = ["x", "y", "prob", "trace", "entropy"]


@dataclass
class AssignmentResult:
    """
    Best matching of predicted clusters to true labels.

    permutation[c] is the true label assigned to cluster c; confusion[y, c]
    counts instances of true label y predicted as c.
    """
    permutation: List[int]
    accuracy: float
    confusion: np.ndarray
    nmi: float

    def to_dict(self) -> Dict[str, Any]:
        return {"accuracy": self.accuracy, "nmi": self.nmi, "permutation": list(self.permutation),
                "confusion": self.confusion.tolist()}


def _best_total(gain: np.ndarray) -> int:
    if gain.size == 0:
        return 0
    rows, cols = linear_sum_assignment(-gain)
    return int(gain[rows, cols].sum())


def _lowest_index_assignment(gain: np.ndarray) -> List[int]:
    """
    Maximum-gain cluster-to-label permutation. Among optimal ones, cluster 0
    takes the lowest label it can, then cluster 1, and so on.
    """
    k = gain.shape[0]
    best = _best_total(gain)
    permutation: List[int] = []
    free = list(range(k))
    fixed = 0
    for c in range(k):
        for y in free:
            rest = [l for l in free if l != y]
            if fixed + int(gain[c, y]) + _best_total(gain[np.ix_(list(range(c + 1, k)), rest)]) == best:
                permutation.append(y)
                free = rest
                fixed += int(gain[c, y])
                break
    return permutation


def clustering_accuracy(pred: Sequence[int], truth: Sequence[int], num_classes: Optional[int] = None) -> AssignmentResult:
    """
    Unsupervised clustering accuracy: the matched fraction under the
    cluster-to-label permutation found by the Hungarian algorithm. Ties go
    to the permutation that is lowest in cluster order.

    Args:
        pred: Predicted cluster per instance.
        truth: True label per instance.
        num_classes: Label count; inferred from the largest label when None.
    """
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if pred.size != truth.size:
        raise ContractViolation(f"{pred.size} predictions for {truth.size} labels")
    if pred.size == 0:
        raise ContractViolation("clustering accuracy needs at least one instance")
    if np.any(pred < 0) or np.any(truth < 0):
        raise ContractViolation("labels must be nonnegative")
    k = num_classes if num_classes is not None else int(max(pred.max(), truth.max())) + 1
    if pred.max() >= k or truth.max() >= k:
        raise ContractViolation(f"labels must lie in [0, {k})")
    confusion = confusion_matrix(truth, pred, labels=list(range(k)))
    permutation = _lowest_index_assignment(confusion.T)
    matched = int(confusion.T[np.arange(k), permutation].sum())
    return AssignmentResult(permutation=permutation, accuracy=matched / pred.size, confusion=confusion,
                            nmi=float(normalized_mutual_info_score(truth, pred)))


def stability_stats(params: ModelParams, ds: Dataset, threads: int = 1) -> Tuple[List[StabilityRow], pd.DataFrame]:
    """
    Per-instance confidence and Fisher criterion, plus a per-predicted-class
    quartile summary for box plots.

    Returns:
        The rows (one per instance) and a summary frame indexed by predicted label.
    """
    rows = stability_report(params, ds.X, threads)
    frame = stability_frame(rows)
    summary = frame.groupby("predicted_label")[["fisher_trace", "confidence"]].describe()
    summary.columns = [f"{metric}_{stat}" for metric, stat in summary.columns]
    logger.info(f"Stability of {len(rows)} instances over {summary.shape[0]} predicted classes")
    return rows, summary


def extreme_instances(rows: List[StabilityRow], per_class: int = 5) -> List[StabilityRow]:
    """The `per_class` least and most stable instances (by Fisher trace) of every predicted class."""
    if per_class < 1:
        raise ContractViolation("per_class must be positive")
    picked: List[StabilityRow] = []
    for label in sorted({r.predicted_label for r in rows}):
        members = sorted((r for r in rows if r.predicted_label == label), key=lambda r: (r.fisher_trace, r.index))
        chosen = {r.index: r for r in members[:per_class] + members[-per_class:]}
        picked.extend(sorted(chosen.values(), key=lambda r: (r.fisher_trace, r.index)))
    return picked


def heatmap_grid(params: ModelParams, bbox: Tuple[float, float, float, float], resolution: int,
                 threads: int = 1) -> pd.DataFrame:
    """
    Q(1|x), Fisher trace and entropy (nats) on a resolution x resolution grid.

    Args:
        params: A model with two input features.
        bbox: (xmin, xmax, ymin, ymax).
        resolution: Points per axis.
        threads: Workers for the score matrices.

    Returns:
        A frame with columns x, y, prob, trace, entropy and resolution**2 rows.
    """
    if params.spec.input_dim != 2:
        raise ContractViolation(f"heatmaps need a 2-input model, this one has {params.spec.input_dim}")
    if resolution < 2:
        raise ContractViolation("resolution must be at least 2")
    xmin, xmax, ymin, ymax = bbox
    if not (xmin < xmax and ymin < ymax):
        raise ContractViolation(f"degenerate bounding box {bbox}")
    gx, gy = np.meshgrid(np.linspace(xmin, xmax, resolution), np.linspace(ymin, ymax, resolution))
    points = np.column_stack([gx.ravel(), gy.ravel()])
    Q = predict(params, points, "eval")
    traces = np.concatenate(map_chunks(lambda rows: np.sum(score_matrices(params, rows) ** 2, axis=(1, 2)),
                                       points, threads))
    return pd.DataFrame({"x": points[:, 0], "y": points[:, 1], "prob": Q[:, 1], "trace": traces,
                         "entropy": entropy(Q, axis=1)}, columns=HEATMAP_COLUMNS)
