"""
The two f-divergences used by the regularizers, as plain numpy functions and
as graph builders, plus the perturbation divergence phi_f(r; x, theta).
"""
from enum import Enum

import numpy as np

from autodiff.autodiff_module import Graph
from core.core_module import EPS_NUM, ContractViolation
from discriminator.discriminator_module import ModelParams, predict_log_proba


class DivergenceKind(str, Enum):
    KL = "kl"
    SQ_HELLINGER = "hel2"

    @property
    def curvature(self) -> float:
        """c_f in phi_f(r) ~ c_f * r^T I_F r for small r."""
        return 1.0 if self is DivergenceKind.KL else 0.25

    @classmethod
    def parse(cls, value: "str | DivergenceKind") -> "DivergenceKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"kl": cls.KL, "hel2": cls.SQ_HELLINGER, "sqhellinger": cls.SQ_HELLINGER,
                   "sq_hellinger": cls.SQ_HELLINGER, "hellinger2": cls.SQ_HELLINGER}
        if key not in aliases:
            raise ContractViolation(f"unknown divergence {value!r}; use 'kl' or 'hel2'")
        return aliases[key]


def kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """
    KL(p || q) over the last axis, with 0 log 0 = 0 and q clamped to EPS_NUM.

    Args:
        p: Distribution(s) over Y.
        q: Distribution(s) over Y, same shape as p.

    Returns:
        A scalar for vectors, one value per row for matrices.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.clip(np.asarray(q, dtype=np.float64), EPS_NUM, 1.0)
    terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(q)), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def hel2(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """
    Squared Hellinger distance 1 - sum sqrt(p q), evaluated in the equal form
    1/2 sum (sqrt p - sqrt q)^2, which is exactly symmetric and never negative.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    diff = np.sqrt(np.maximum(p, 0.0)) - np.sqrt(np.maximum(q, 0.0))
    return 0.5 * np.sum(diff * diff, axis=-1)


def divergence(p: np.ndarray, q: np.ndarray, kind: DivergenceKind) -> np.ndarray:
    kind = DivergenceKind.parse(kind)
    return kl(p, q) if kind is DivergenceKind.KL else hel2(p, q)


def divergence_from_log(logp: np.ndarray, logq: np.ndarray, kind: DivergenceKind) -> np.ndarray:
    """Row-wise divergence from log-probabilities; the numpy twin of `divergence_node`."""
    kind = DivergenceKind.parse(kind)
    if kind is DivergenceKind.KL:
        return np.sum(np.exp(logp) * (logp - logq), axis=-1)
    diff = np.exp(0.5 * logp) - np.exp(0.5 * logq)
    return 0.5 * np.sum(diff * diff, axis=-1)


def divergence_node(graph: Graph, logp: int, logq: int, kind: DivergenceKind) -> int:
    """
    Row-wise f(P || Q) from two log-probability nodes, as an n x 1 node.

    Working from log-softmax outputs keeps both divergences finite and
    differentiable without clamping: sqrt(Q) is exp(log Q / 2).
    """
    kind = DivergenceKind.parse(kind)
    if kind is DivergenceKind.KL:
        terms = graph.mul(graph.exp(logp), graph.sub(logp, logq))
        return graph.sum(terms, axis=1, keepdims=True)
    diff = graph.sub(graph.exp(graph.scale(logp, 0.5)), graph.exp(graph.scale(logq, 0.5)))
    return graph.scale(graph.sum(graph.mul(diff, diff), axis=1, keepdims=True), 0.5)


def phi(params: ModelParams, x: np.ndarray, r: np.ndarray, kind: DivergenceKind = DivergenceKind.SQ_HELLINGER) -> float:
    """
    phi_f(r; x, theta) = f(Q(.|x) || Q(.|x + r)) with eval-mode predictions.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    logq = predict_log_proba(params, np.vstack([x, x + r]), "eval")
    return float(divergence_from_log(logq[0], logq[1], kind))
