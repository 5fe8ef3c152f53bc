import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Union

import numpy as np

from autodiff.autodiff_module import Bindings, Graph, backward, evaluate
from core.core_module import BN_MOMENTUM, ContractViolation

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "piecewise-mlp/1"


@dataclass
class MlpSpec:
    """
    Shape of the discriminative model Q(.|x; theta).

    Args:
        input_dim: Instance dimension h.
        hidden_dims: Widths of the ReLU hidden layers.
        num_classes: Number of labels |Y|.
        batchnorm: One flag per hidden layer, or a single flag for all of them.
    """
    input_dim: int
    hidden_dims: List[int]
    num_classes: int
    batchnorm: Union[bool, List[bool]] = True

    def __post_init__(self):
        if isinstance(self.batchnorm, bool):
            self.batchnorm = [self.batchnorm] * len(self.hidden_dims)
        self.batchnorm = [bool(b) for b in self.batchnorm]
        self.hidden_dims = [int(d) for d in self.hidden_dims]
        self.validate()

    def validate(self) -> None:
        if self.input_dim < 1:
            raise ContractViolation(f"input_dim must be positive, got {self.input_dim}")
        if not self.hidden_dims or any(d < 1 for d in self.hidden_dims):
            raise ContractViolation(f"hidden_dims must be a non-empty list of positive sizes, got {self.hidden_dims}")
        if self.num_classes < 2:
            raise ContractViolation(f"num_classes must be at least 2, got {self.num_classes}")
        if len(self.batchnorm) != len(self.hidden_dims):
            raise ContractViolation("batchnorm needs one flag per hidden layer")

    @property
    def layer_dims(self) -> List[int]:
        return [self.input_dim] + self.hidden_dims + [self.num_classes]

    def to_dict(self) -> Dict[str, Any]:
        return {"input_dim": self.input_dim, "hidden_dims": list(self.hidden_dims),
                "num_classes": self.num_classes, "batchnorm": list(self.batchnorm)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MlpSpec":
        return cls(int(data["input_dim"]), list(data["hidden_dims"]), int(data["num_classes"]), data.get("batchnorm", True))


@dataclass
class ModelParams:
    """
    Trainable weights plus batch-normalization running statistics.

    Trainable blocks are named W{l}, b{l} for every affine layer and gamma{l},
    beta{l} for every normalized hidden layer; running statistics are mean{l}
    and var{l}.
    """
    spec: MlpSpec
    weights: Dict[str, np.ndarray]
    running: Dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.weights.items()},
                           {k: v.copy() for k, v in self.running.items()}, self.seed)

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.weights.values()))

    @property
    def last_layer(self) -> int:
        return len(self.spec.hidden_dims)


def init_params(spec: MlpSpec, seed: int = 0) -> ModelParams:
    """
    He-initialized weights (normal, std sqrt(2/fan_in)), zero biases,
    batchnorm scale 1 and shift 0, running mean 0 and variance 1.
    """
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims
    weights: Dict[str, np.ndarray] = {}
    running: Dict[str, np.ndarray] = {}
    for l, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        weights[f"W{l}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        weights[f"b{l}"] = np.zeros(fan_out)
        if l < len(spec.hidden_dims) and spec.batchnorm[l]:
            weights[f"gamma{l}"] = np.ones(fan_out)
            weights[f"beta{l}"] = np.zeros(fan_out)
            running[f"mean{l}"] = np.zeros(fan_out)
            running[f"var{l}"] = np.ones(fan_out)
    return ModelParams(spec, weights, running, seed)


def add_parameters(graph: Graph, params: ModelParams) -> Dict[str, int]:
    return {name: graph.parameter(name, value.shape) for name, value in params.weights.items()}


def parameter_bindings(params: ModelParams) -> Bindings:
    return dict(params.weights)


def log_probs(graph: Graph, params: ModelParams, nodes: Dict[str, int], x: int, mode: str = "eval") -> int:
    """
    Appends the network to `graph` and returns the node of log Q(y|x) (rows = instances).

    Args:
        graph: Graph under construction.
        params: Model; eval mode reads its running statistics.
        nodes: Parameter leaf ids from `add_parameters`.
        x: Node holding the n x h instance matrix.
        mode: "train" (batch statistics) or "eval" (running statistics).
    """
    h = x
    for l, use_bn in enumerate(params.spec.batchnorm):
        h = graph.affine(h, nodes[f"W{l}"], nodes[f"b{l}"])
        if use_bn:
            if mode == "train":
                h = graph.batchnorm(h, nodes[f"gamma{l}"], nodes[f"beta{l}"], "train", layer=l)
            else:
                h = graph.batchnorm(h, nodes[f"gamma{l}"], nodes[f"beta{l}"], "eval",
                                    running_mean=params.running[f"mean{l}"], running_var=params.running[f"var{l}"], layer=l)
        h = graph.relu(h)
    last = params.last_layer
    logits = graph.affine(h, nodes[f"W{last}"], nodes[f"b{last}"])
    return graph.log_softmax(logits)


def update_running_stats(params: ModelParams, graph: Graph, values: List[np.ndarray], momentum: float = BN_MOMENTUM) -> None:
    """Folds the batch statistics of every train-mode batchnorm node into params.running."""
    for node in graph.nodes:
        if node.op != "batchnorm" or node.attrs["mode"] != "train":
            continue
        l = node.attrs["layer"]
        pre = values[node.inputs[0]]
        params.running[f"mean{l}"] = (1.0 - momentum) * params.running[f"mean{l}"] + momentum * pre.mean(axis=0)
        params.running[f"var{l}"] = (1.0 - momentum) * params.running[f"var{l}"] + momentum * pre.var(axis=0)


def _check_batch(params: ModelParams, X: np.ndarray, mode: str) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.spec.input_dim:
        raise ContractViolation(f"expected {params.spec.input_dim} features, got {X.shape[1]}")
    if mode == "train" and any(params.spec.batchnorm) and X.shape[0] < 2:
        raise ContractViolation("train-mode batch normalization needs at least 2 instances")
    if mode not in ("train", "eval"):
        raise ContractViolation(f"mode must be 'train' or 'eval', got {mode!r}")
    return X


def predict_log_proba(params: ModelParams, X: np.ndarray, mode: str = "eval") -> np.ndarray:
    """
    log Q(.|x) for every row of X.

    In train mode the batch statistics are used and folded into the running
    statistics of `params` (in place).
    """
    X = _check_batch(params, X, mode)
    graph = Graph()
    nodes = add_parameters(graph, params)
    x = graph.input("X", X.shape)
    out = log_probs(graph, params, nodes, x, mode)
    values = evaluate(graph, {**parameter_bindings(params), "X": X})
    if mode == "train":
        update_running_stats(params, graph, values)
    return values[out]


def predict(params: ModelParams, X: np.ndarray, mode: str = "eval") -> np.ndarray:
    """
    Conditional distributions Q(.|x) for every row of X.

    Returns:
        An n x |Y| row-stochastic matrix.
    """
    return np.exp(predict_log_proba(params, X, mode))


@dataclass
class ScoreMatrix:
    """
    h x |Y| matrix whose column y is sqrt(Q(y|x)) * grad_x log Q(y|x).

    A A^T is the Fisher information of the model at x.
    """
    matrix: np.ndarray
    x: np.ndarray
    probs: np.ndarray


def score_matrices(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """
    Score matrices for a batch, computed in eval mode with one input-gradient
    pass per label.

    Returns:
        Array of shape (n, h, |Y|).
    """
    X = _check_batch(params, X, "eval")
    num_classes = params.spec.num_classes
    graph = Graph()
    nodes = add_parameters(graph, params)
    x = graph.input("X", X.shape)
    logp = log_probs(graph, params, nodes, x, "eval")
    heads = []
    for y in range(num_classes):
        onehot = graph.constant(np.eye(num_classes)[y][None, :])
        heads.append(graph.sum(graph.mul(logp, onehot)))
    bindings = {**parameter_bindings(params), "X": X}
    values = evaluate(graph, bindings)
    root_q = np.exp(0.5 * values[logp])
    scores = np.empty((X.shape[0], X.shape[1], num_classes))
    for y, head in enumerate(heads):
        # rows are independent in eval mode, so row i of the gradient is grad_x log Q(y|x_i)
        grad = backward(graph, head, bindings, wrt=["X"], values=values)["X"]
        scores[:, :, y] = root_q[:, y:y + 1] * grad
    return scores


def score_matrix(params: ModelParams, x: np.ndarray) -> ScoreMatrix:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    A = score_matrices(params, x[None, :])[0]
    return ScoreMatrix(matrix=A, x=x, probs=predict(params, x[None, :])[0])


def save_checkpoint(params: ModelParams, path: str, extra: Optional[Dict[str, Any]] = None) -> None:
    """
    Writes the model as one JSON document. Floats are written with repr, so
    reloading is bit-exact.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "spec": params.spec.to_dict(),
        "seed": params.seed,
        "parameters": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in params.weights.items()},
        "running": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in params.running.items()},
    }
    if extra:
        doc["extra"] = extra
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(doc, f)
    logger.info(f"Saved checkpoint to {path}")


def load_checkpoint(path: str) -> ModelParams:
    with open(path, 'r', encoding='utf-8') as f:
        doc = json.load(f)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ContractViolation(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    spec = MlpSpec.from_dict(doc["spec"])

    def unpack(blocks: Dict[str, Any]) -> Dict[str, np.ndarray]:
        return {k: np.array(b["values"], dtype=np.float64).reshape(b["shape"]) for k, b in blocks.items()}

    params = ModelParams(spec, unpack(doc["parameters"]), unpack(doc["running"]), int(doc.get("seed", 0)))
    reference = init_params(spec, 0)
    for name, value in reference.weights.items():
        if name not in params.weights or params.weights[name].shape != value.shape:
            raise ContractViolation(f"{path}: parameter block {name} missing or misshapen")
    if any(np.any(v <= 0) for k, v in params.running.items() if k.startswith("var")):
        raise ContractViolation(f"{path}: running variances must be positive")
    return params
