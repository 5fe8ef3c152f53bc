"""
Fisher-information machinery for the smoothness regularizer.

At an instance x the Fisher information of the model is I_F = A A^T, with A
the h x |Y| score matrix. Directions drawn from N(0, I_F^k) concentrate on
the subspace where the model changes fastest; probing the divergence along
them on a grid of radii gives a random lower bound of the worst-case
divergence within the rho-ball, which is what the smoothness loss averages.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from autodiff.autodiff_module import Graph, LossGraph
from core.core_module import DIRECTION_EPS, ContractViolation, map_chunks
from discriminator.discriminator_module import (ModelParams, ScoreMatrix, add_parameters, log_probs,
                                                parameter_bindings, predict, predict_log_proba, score_matrices)
from divergence.divergence_module import DivergenceKind, divergence_from_log, divergence_node

logger = logging.getLogger(__name__)

DEFAULT_GRID = [float(v) for v in np.linspace(-1.0, 1.0, 10)]

ScoreLike = Union[ScoreMatrix, np.ndarray]


@dataclass
class SmoothnessConfig:
    """
    Args:
        rho: Neighborhood width.
        k: Power of the Fisher information in the direction law N(0, I_F^k).
        m: Directions drawn per instance.
        grid: Radius multipliers in [-1, 1]; must contain -1 and 1.
        divergence: f-divergence compared across the perturbation.
    """
    rho: float = 0.04
    k: int = 4
    m: int = 1
    grid: List[float] = field(default_factory=lambda: list(DEFAULT_GRID))
    divergence: DivergenceKind = DivergenceKind.SQ_HELLINGER

    def __post_init__(self):
        self.divergence = DivergenceKind.parse(self.divergence)
        self.grid = [float(v) for v in self.grid]

    def validate(self) -> None:
        if self.rho <= 0:
            raise ContractViolation(f"rho must be positive, got {self.rho}")
        if self.k < 1 or self.m < 1:
            raise ContractViolation("k and m must be positive integers")
        if -1.0 not in self.grid or 1.0 not in self.grid:
            raise ContractViolation("grid must contain -1 and 1")
        if any(abs(v) > 1.0 for v in self.grid):
            raise ContractViolation("grid values must lie in [-1, 1]")


def _matrix(A: ScoreLike) -> np.ndarray:
    return A.matrix if isinstance(A, ScoreMatrix) else np.asarray(A, dtype=np.float64)


def fisher_trace(A: ScoreLike) -> float:
    """tr(A A^T), the Fisher criterion, as the sum of squared entries of A."""
    M = _matrix(A)
    return float(np.sum(M * M))


def fisher_top_eig(A: ScoreLike) -> float:
    """Largest eigenvalue of I_F, read off the |Y| x |Y| matrix A^T A (same nonzero spectrum)."""
    M = _matrix(A)
    return float(max(np.linalg.eigvalsh(M.T @ M)[-1], 0.0))


def sample_direction(A: ScoreLike, k: int, rng: np.random.Generator) -> np.ndarray:
    """
    One draw from N(0, (A A^T)^k) using only matrix-vector products.

    Odd k: (A A^T)^((k-1)/2) A n with n ~ N(0, I_|Y|).
    Even k: (A A^T)^(k/2) n' with n' ~ N(0, I_h).
    """
    if k < 1:
        raise ContractViolation(f"k must be at least 1, got {k}")
    M = _matrix(A)
    h, num_classes = M.shape
    if k % 2:
        e = M @ rng.standard_normal(num_classes)
        rounds = (k - 1) // 2
    else:
        e = rng.standard_normal(h)
        rounds = k // 2
    for _ in range(rounds):
        e = M @ (M.T @ e)
    return e


def perturbations(params: ModelParams, X: np.ndarray, cfg: SmoothnessConfig,
                  rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Probe offsets nu * rho * e_i / |e_i| for every instance, direction and grid value.

    Returns:
        offsets: Array (n, m * len(grid), h).
        live: Boolean array (n, m * len(grid)); False where the sampled
            direction was numerically zero.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, h = X.shape
    grid = np.asarray(cfg.grid)
    scores = score_matrices(params, X)
    offsets = np.zeros((n, cfg.m, grid.size, h))
    live = np.zeros((n, cfg.m, grid.size), dtype=bool)
    for i in range(n):
        for j in range(cfg.m):
            e = sample_direction(scores[i], cfg.k, rng)
            norm = np.linalg.norm(e)
            if norm < DIRECTION_EPS:
                continue
            offsets[i, j] = grid[:, None] * (cfg.rho * e / norm)[None, :]
            live[i, j] = True
    return offsets.reshape(n, -1, h), live.reshape(n, -1)


def smoothness_loss(graph: Graph, params: ModelParams, nodes: dict, x: int, X: np.ndarray,
                    cfg: SmoothnessConfig, rng: np.random.Generator) -> int:
    """
    Appends L'_s: the batch mean of the per-instance probe maximum.

    The probe offsets are constants (no gradient through the direction
    sampler) while both model terms of phi_f carry gradients. Every forward
    pass here uses eval-mode batch normalization.

    Args:
        graph: Graph under construction.
        params: Current model.
        nodes: Parameter leaf ids.
        x: Node holding the batch X.
        X: The batch values (needed to sample directions).
        cfg: Smoothness settings.
        rng: Source of direction draws.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] < 1:
        raise ContractViolation("smoothness loss needs a non-empty batch")
    offsets, live = perturbations(params, X, cfg, rng)
    n, probes, h = offsets.shape
    repeat = graph.constant(np.repeat(np.eye(n), probes, axis=0))
    logp = log_probs(graph, params, nodes, x, "eval")
    shifted = graph.add(graph.matmul(repeat, x), graph.stop_gradient(graph.constant(offsets.reshape(-1, h))))
    logq = log_probs(graph, params, nodes, shifted, "eval")
    phi = divergence_node(graph, graph.matmul(repeat, logp), logq, cfg.divergence)
    phi = graph.mul(phi, graph.constant(live.reshape(-1, 1).astype(np.float64)))
    per_instance = graph.max(graph.reshape(phi, (n, probes)), axis=1)
    return graph.mean(per_instance)


def smoothness_loss_graph(params: ModelParams, X: np.ndarray, cfg: SmoothnessConfig,
                          rng: np.random.Generator) -> LossGraph:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    graph = Graph()
    nodes = add_parameters(graph, params)
    x = graph.input("X", X.shape)
    out = smoothness_loss(graph, params, nodes, x, X, cfg, rng)
    return LossGraph(graph, out, {**parameter_bindings(params), "X": X})


def smoothness_bound(params: ModelParams, x: np.ndarray, cfg: SmoothnessConfig, rng: np.random.Generator) -> LossGraph:
    """The random lower bound of sup_{|r| <= rho} phi_f(r; x) at a single instance."""
    return smoothness_loss_graph(params, np.asarray(x, dtype=np.float64).reshape(1, -1), cfg, rng)


def dense_search_sup(params: ModelParams, x: np.ndarray, rho: float,
                     kind: DivergenceKind = DivergenceKind.SQ_HELLINGER,
                     num_directions: int = 1000, rng: np.random.Generator = None) -> float:
    """
    Random-search estimate of sup_{|r| <= rho} phi_f(r; x).

    Half of the probes lie on the sphere of radius rho, the rest uniformly in
    the ball.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    h = x.size
    u = rng.standard_normal((num_directions, h))
    u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), DIRECTION_EPS)
    radii = np.full(num_directions, rho)
    inner = num_directions // 2
    radii[inner:] = rho * rng.random(num_directions - inner) ** (1.0 / h)
    logq = predict_log_proba(params, np.vstack([x, x + radii[:, None] * u]), "eval")
    return float(np.max(divergence_from_log(logq[:1], logq[1:], kind)))


def margin_probe(params: ModelParams, X: np.ndarray, tau: float, rho_grid: Sequence[float],
                 kind: DivergenceKind = DivergenceKind.SQ_HELLINGER, num_directions: int = 1000,
                 seed: int = 0, threads: int = 1) -> float:
    """
    Empirical attack-free margin of the model.

    Walks the increasing rho_grid and returns the last radius at which the
    dense-search divergence stays within tau at every instance; 0 if the
    first radius already fails.
    """
    rho_grid = [float(r) for r in rho_grid]
    if any(r <= 0 for r in rho_grid) or any(b <= a for a, b in zip(rho_grid, rho_grid[1:])):
        raise ContractViolation("rho_grid must be increasing positive radii")
    if not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ContractViolation(f"seed must be a nonnegative integer, got {seed!r}")
    if num_directions < 1:
        raise ContractViolation(f"num_directions must be positive, got {num_directions}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    margin = 0.0
    for rho in rho_grid:
        def worst(rows: np.ndarray, rho: float = rho) -> float:
            # one generator per instance keeps draws independent of the thread count
            return max(dense_search_sup(params, row, rho, kind, num_directions,
                                        np.random.default_rng([seed, int(round(rho * 1e9)), int(i)]))
                       for i, row in rows)
        indexed = list(enumerate(X))
        largest = max(map_chunks(worst, indexed, threads, chunk_size=64))
        logger.debug(f"margin probe rho={rho:g}: worst divergence {largest:.3e}")
        if largest > tau:
            break
        margin = rho
    return margin


@dataclass
class StabilityRow:
    index: int
    predicted_label: int
    confidence: float
    fisher_trace: float
    top_eigenvalue: float


STABILITY_COLUMNS = ["index", "predicted_label", "confidence", "fisher_trace", "top_eigenvalue"]


def stability_report(params: ModelParams, X: np.ndarray, threads: int = 1) -> List[StabilityRow]:
    """
    Predictive confidence and Fisher criterion of the model at every instance.

    Returns:
        One StabilityRow per row of X, in order.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))

    def chunk_rows(rows: np.ndarray) -> List[Tuple[float, float]]:
        A = score_matrices(params, rows)
        return [(fisher_trace(a), fisher_top_eig(a)) for a in A]

    fisher = [pair for chunk in map_chunks(chunk_rows, X, threads) for pair in chunk]
    Q = predict(params, X, "eval")
    labels = np.argmax(Q, axis=1)
    return [StabilityRow(i, int(labels[i]), float(Q[i, labels[i]]), tr, beta)
            for i, (tr, beta) in enumerate(fisher)]


def stability_frame(rows: List[StabilityRow]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in rows], columns=STABILITY_COLUMNS)
