"""
Label transmission through a batch: encode a label as an instance drawn from
P(x|y), decode it with Q(y'|x).

T(y'|y) = sum_x P(x|y) Q(y'|x) is the label transition matrix and
S(x'|x) = sum_y P(x'|y) Q(y|x) the instance transition matrix. T is
diagonal exactly when Q is {0,1}-valued and label complete on the batch,
which is also when S splits into |Y| irreducible recurrent classes.
"""
import logging

import numpy as np
from scipy.sparse.csgraph import connected_components

from autodiff.autodiff_module import Graph
from core.core_module import EPS_NUM, ContractViolation

logger = logging.getLogger(__name__)

SUPPORT_TOL = 1e-9


def _check_q(Q: np.ndarray) -> np.ndarray:
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim != 2 or Q.shape[0] < 1:
        raise ContractViolation(f"Q must be an n x |Y| matrix, got shape {Q.shape}")
    if np.any(Q < -1e-12) or not np.allclose(Q.sum(axis=1), 1.0, atol=1e-9):
        raise ContractViolation("Q must be row-stochastic")
    return Q


def reverse_conditional(Q: np.ndarray) -> np.ndarray:
    """
    P(x|y) = Q(y|x) / sum_x' Q(y|x'), one column per label.

    A label whose column mass is below EPS_NUM gets the uniform column 1/n.
    """
    Q = _check_q(Q)
    totals = Q.sum(axis=0, keepdims=True)
    live = totals >= EPS_NUM
    return np.where(live, Q / np.where(live, totals, 1.0), 1.0 / Q.shape[0])


def label_transition(Q: np.ndarray) -> np.ndarray:
    """T = P^T Q, a |Y| x |Y| row-stochastic matrix with T[y, y'] = T(y'|y)."""
    Q = _check_q(Q)
    return reverse_conditional(Q).T @ Q


def instance_transition(Q: np.ndarray) -> np.ndarray:
    """S = Q P^T, an n x n row-stochastic matrix with S[x, x'] = S(x'|x)."""
    Q = _check_q(Q)
    return Q @ reverse_conditional(Q).T


def is_diagonal(T: np.ndarray, tol: float = 1e-6) -> bool:
    T = np.asarray(T, dtype=np.float64)
    off = T[~np.eye(T.shape[0], dtype=bool)]
    return bool(np.all(off < tol))


def recurrent_class_count(S: np.ndarray, tol: float = SUPPORT_TOL) -> int:
    """
    Number of irreducible recurrent classes of a symmetric Markov kernel.

    For a symmetric kernel every communicating class is closed, so this is the
    number of connected components of the graph with an edge wherever
    S(x'|x) >= tol.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ContractViolation(f"S must be square, got {S.shape}")
    if np.max(np.abs(S - S.T), initial=0.0) > 1e-6:
        raise ContractViolation("recurrent_class_count needs a symmetric S")
    count, _ = connected_components(S >= tol, directed=False)
    return int(count)


def is_label_complete(labels: np.ndarray, num_classes: int) -> bool:
    """True if every class in range(num_classes) appears in labels."""
    return bool(np.all(np.isin(np.arange(num_classes), np.asarray(labels))))


def label_transition_node(graph: Graph, q: int) -> int:
    """
    Builds T = P^T Q inside a graph, differentiating through both the
    numerator and the column sums of P(x|y).
    """
    p = graph.normalize_columns(q, eps=EPS_NUM)
    return graph.matmul(graph.transpose(p), q)
