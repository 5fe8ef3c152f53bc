"""
Reverse-mode automatic differentiation over dense float64 matrices.

A `Graph` is an ordered list of nodes. Leaves are parameters, inputs or
constants; every other node applies a registered primitive to earlier nodes,
so the node list itself is the topological order. `evaluate` runs the list
forwards, `backward` walks it in reverse accumulating adjoints.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.core_module import EPS_BN, EPS_NUM, ContractViolation, NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)

LEAF_KINDS = ("parameter", "input", "constant")

# gradient_check: rounding allowance of one difference quotient, in units of eps * |loss| / step
GRADCHECK_ULPS = 1e3
GRADCHECK_FLOOR = 1e-12

Bindings = Dict[str, np.ndarray]
GradientMap = Dict[str, np.ndarray]


def as_tensor(values: Any, name: str = "tensor") -> np.ndarray:
    """
    Converts values to a row-major float64 array, refusing NaN and Inf.

    Args:
        values: Anything numpy can turn into an array.
        name: Used in the error message.

    Returns:
        A C-contiguous float64 array.
    """
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(name, "tensor values must be finite")
    return arr


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sums out the dimensions numpy broadcasting added or stretched."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, size in enumerate(shape):
        if size == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


class Primitive:
    """
    A differentiable operation.

    `forward` maps input arrays to the output array. `backward` receives the
    adjoint of the output and returns one adjoint per input (None for inputs
    that receive no gradient).
    """

    arity: int = 1

    def forward(self, args: List[np.ndarray], attrs: Dict[str, Any]) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, args: List[np.ndarray], out: np.ndarray,
                 attrs: Dict[str, Any]) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


PRIMITIVES: Dict[str, Primitive] = {}


def primitive(name: str) -> Callable[[type], type]:
    """Class decorator registering a Primitive under `name`."""
    def register(cls: type) -> type:
        PRIMITIVES[name] = cls()
        return cls
    return register


@primitive("matmul")
class MatMul(Primitive):
    arity = 2

    def forward(self, args, attrs):
        a, b = args
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
        return a @ b

    def backward(self, grad, args, out, attrs):
        a, b = args
        return grad @ b.T, a.T @ grad


@primitive("affine")
class Affine(Primitive):
    arity = 3

    def forward(self, args, attrs):
        x, w, b = args
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape[-1] != w.shape[1]:
            raise ValueError(f"affine shapes x{x.shape} W{w.shape} b{b.shape} disagree")
        return x @ w + b

    def backward(self, grad, args, out, attrs):
        x, w, b = args
        return grad @ w.T, x.T @ grad, unbroadcast(grad, b.shape)


@primitive("add")
class Add(Primitive):
    arity = 2

    def forward(self, args, attrs):
        return args[0] + args[1]

    def backward(self, grad, args, out, attrs):
        return unbroadcast(grad, args[0].shape), unbroadcast(grad, args[1].shape)


@primitive("sub")
class Sub(Primitive):
    arity = 2

    def forward(self, args, attrs):
        return args[0] - args[1]

    def backward(self, grad, args, out, attrs):
        return unbroadcast(grad, args[0].shape), unbroadcast(-grad, args[1].shape)


@primitive("mul")
class Mul(Primitive):
    arity = 2

    def forward(self, args, attrs):
        return args[0] * args[1]

    def backward(self, grad, args, out, attrs):
        a, b = args
        return unbroadcast(grad * b, a.shape), unbroadcast(grad * a, b.shape)


@primitive("div")
class Div(Primitive):
    arity = 2

    def forward(self, args, attrs):
        return args[0] / args[1]

    def backward(self, grad, args, out, attrs):
        a, b = args
        return unbroadcast(grad / b, a.shape), unbroadcast(-grad * a / (b * b), b.shape)


@primitive("scale")
class Scale(Primitive):
    def forward(self, args, attrs):
        return attrs["factor"] * args[0]

    def backward(self, grad, args, out, attrs):
        return (attrs["factor"] * grad,)


@primitive("relu")
class Relu(Primitive):
    # subgradient 0 at 0
    def forward(self, args, attrs):
        return np.maximum(args[0], 0.0)

    def backward(self, grad, args, out, attrs):
        return (grad * (args[0] > 0.0),)


@primitive("exp")
class Exp(Primitive):
    def forward(self, args, attrs):
        return np.exp(args[0])

    def backward(self, grad, args, out, attrs):
        return (grad * out,)


@primitive("log")
class Log(Primitive):
    def forward(self, args, attrs):
        return np.log(args[0])

    def backward(self, grad, args, out, attrs):
        return (grad / args[0],)


@primitive("sqrt")
class Sqrt(Primitive):
    def forward(self, args, attrs):
        return np.sqrt(args[0])

    def backward(self, grad, args, out, attrs):
        return (0.5 * grad / out,)


@primitive("clamp")
class Clamp(Primitive):
    def forward(self, args, attrs):
        return np.clip(args[0], attrs["lo"], attrs["hi"])

    def backward(self, grad, args, out, attrs):
        a = args[0]
        return (grad * ((a >= attrs["lo"]) & (a <= attrs["hi"])),)


@primitive("sum")
class Sum(Primitive):
    def forward(self, args, attrs):
        return np.sum(args[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))

    def backward(self, grad, args, out, attrs):
        a = args[0]
        axis = attrs.get("axis")
        if axis is not None and not attrs.get("keepdims", False):
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, a.shape).copy(),)


@primitive("mean")
class Mean(Primitive):
    def forward(self, args, attrs):
        return np.mean(args[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))

    def backward(self, grad, args, out, attrs):
        a = args[0]
        axis = attrs.get("axis")
        count = a.size if axis is None else a.shape[axis]
        if axis is not None and not attrs.get("keepdims", False):
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, a.shape) / count,)


@primitive("max")
class Max(Primitive):
    # ties go to the lowest index (np.argmax returns the first maximum)
    def forward(self, args, attrs):
        return np.max(args[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))

    def backward(self, grad, args, out, attrs):
        a = args[0]
        axis = attrs.get("axis")
        result = np.zeros_like(a)
        if axis is None:
            result.flat[int(np.argmax(a))] = np.asarray(grad).reshape(())
            return (result,)
        idx = np.expand_dims(np.argmax(a, axis=axis), axis)
        if not attrs.get("keepdims", False):
            grad = np.expand_dims(grad, axis)
        np.put_along_axis(result, idx, grad, axis=axis)
        return (result,)


@primitive("log_softmax")
class LogSoftmax(Primitive):
    def forward(self, args, attrs):
        a = args[0]
        shifted = a - np.max(a, axis=-1, keepdims=True)
        return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))

    def backward(self, grad, args, out, attrs):
        return (grad - np.exp(out) * np.sum(grad, axis=-1, keepdims=True),)


@primitive("transpose")
class Transpose(Primitive):
    def forward(self, args, attrs):
        return args[0].T

    def backward(self, grad, args, out, attrs):
        return (grad.T,)


@primitive("reshape")
class Reshape(Primitive):
    def forward(self, args, attrs):
        return args[0].reshape(attrs["shape"])

    def backward(self, grad, args, out, attrs):
        return (grad.reshape(args[0].shape),)


@primitive("stop_gradient")
class StopGradient(Primitive):
    def forward(self, args, attrs):
        return args[0]

    def backward(self, grad, args, out, attrs):
        return (None,)


@primitive("normalize_columns")
class NormalizeColumns(Primitive):
    """
    Divides each column by its sum. Columns whose sum is below `eps` are
    replaced by the uniform column 1/n and pass no gradient.
    """

    def forward(self, args, attrs):
        a = args[0]
        totals = a.sum(axis=0, keepdims=True)
        live = totals >= attrs["eps"]
        safe = np.where(live, totals, 1.0)
        return np.where(live, a / safe, 1.0 / a.shape[0])

    def backward(self, grad, args, out, attrs):
        a = args[0]
        totals = a.sum(axis=0, keepdims=True)
        live = totals >= attrs["eps"]
        safe = np.where(live, totals, 1.0)
        inner = np.sum(grad * a, axis=0, keepdims=True) / (safe * safe)
        return (np.where(live, grad / safe - inner, 0.0),)


@primitive("batchnorm")
class BatchNorm(Primitive):
    """
    Batch normalization over the rows of x followed by scale and shift.

    Training mode normalizes with the biased batch variance; eval mode uses
    the `running_mean` / `running_var` attributes, which are constants.
    """

    arity = 3

    def _normalized(self, x, attrs):
        eps = attrs.get("eps", EPS_BN)
        if attrs["mode"] == "train":
            mean = x.mean(axis=0)
            var = x.var(axis=0)
        else:
            mean = attrs["running_mean"]
            var = attrs["running_var"]
        inv_std = 1.0 / np.sqrt(var + eps)
        return (x - mean) * inv_std, inv_std

    def forward(self, args, attrs):
        x, gamma, beta = args
        if x.ndim != 2 or gamma.shape[-1] != x.shape[1] or beta.shape[-1] != x.shape[1]:
            raise ValueError(f"batchnorm shapes x{x.shape} gamma{gamma.shape} beta{beta.shape} disagree")
        x_hat, _ = self._normalized(x, attrs)
        return gamma * x_hat + beta

    def backward(self, grad, args, out, attrs):
        x, gamma, beta = args
        x_hat, inv_std = self._normalized(x, attrs)
        d_gamma = unbroadcast(grad * x_hat, gamma.shape)
        d_beta = unbroadcast(grad, beta.shape)
        d_xhat = grad * gamma
        if attrs["mode"] == "train":
            n = x.shape[0]
            d_x = (inv_std / n) * (n * d_xhat - d_xhat.sum(axis=0) - x_hat * (d_xhat * x_hat).sum(axis=0))
        else:
            d_x = d_xhat * inv_std
        return d_x, d_gamma, d_beta


@dataclass
class Node:
    op: str
    inputs: Tuple[int, ...] = ()
    attrs: Dict[str, Any] = field(default_factory=dict)
    name: Optional[str] = None
    shape: Optional[Tuple[int, ...]] = None


class Graph:
    """
    Define-then-run computation graph.

    Builder methods append a node and return its integer id; ids are strictly
    increasing, so every node's inputs precede it.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._leaf_ids: Dict[str, int] = {}

    def _leaf(self, kind: str, name: str, shape: Sequence[int]) -> int:
        if name in self._leaf_ids:
            raise ContractViolation(f"leaf '{name}' declared twice")
        self.nodes.append(Node(op=kind, name=name, shape=tuple(int(s) for s in shape)))
        self._leaf_ids[name] = len(self.nodes) - 1
        return self._leaf_ids[name]

    def parameter(self, name: str, shape: Sequence[int]) -> int:
        return self._leaf("parameter", name, shape)

    def input(self, name: str, shape: Sequence[int]) -> int:
        return self._leaf("input", name, shape)

    def constant(self, value: Any) -> int:
        arr = as_tensor(value, "constant")
        self.nodes.append(Node(op="constant", attrs={"value": arr}, shape=arr.shape))
        return len(self.nodes) - 1

    def apply(self, op: str, *inputs: int, **attrs: Any) -> int:
        """Appends a node applying the registered primitive `op` to `inputs`."""
        if op not in PRIMITIVES:
            raise ContractViolation(f"unknown primitive '{op}'")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ContractViolation(f"{op}: input {i} is not an earlier node")
        self.nodes.append(Node(op=op, inputs=tuple(inputs), attrs=attrs))
        return len(self.nodes) - 1

    def leaf_id(self, name: str) -> int:
        return self._leaf_ids[name]

    def leaf_names(self, kind: Optional[str] = None) -> List[str]:
        return [n for n, i in self._leaf_ids.items() if kind is None or self.nodes[i].op == kind]

    # builder shorthands
    def matmul(self, a: int, b: int) -> int:
        return self.apply("matmul", a, b)

    def affine(self, x: int, w: int, b: int) -> int:
        return self.apply("affine", x, w, b)

    def add(self, a: int, b: int) -> int:
        return self.apply("add", a, b)

    def sub(self, a: int, b: int) -> int:
        return self.apply("sub", a, b)

    def mul(self, a: int, b: int) -> int:
        return self.apply("mul", a, b)

    def div(self, a: int, b: int) -> int:
        return self.apply("div", a, b)

    def scale(self, a: int, factor: float) -> int:
        return self.apply("scale", a, factor=float(factor))

    def neg(self, a: int) -> int:
        return self.scale(a, -1.0)

    def relu(self, a: int) -> int:
        return self.apply("relu", a)

    def exp(self, a: int) -> int:
        return self.apply("exp", a)

    def log(self, a: int) -> int:
        return self.apply("log", a)

    def sqrt(self, a: int) -> int:
        return self.apply("sqrt", a)

    def clamp(self, a: int, lo: float = EPS_NUM, hi: float = 1.0) -> int:
        return self.apply("clamp", a, lo=lo, hi=hi)

    def sum(self, a: int, axis: Optional[int] = None, keepdims: bool = False) -> int:
        return self.apply("sum", a, axis=axis, keepdims=keepdims)

    def mean(self, a: int, axis: Optional[int] = None, keepdims: bool = False) -> int:
        return self.apply("mean", a, axis=axis, keepdims=keepdims)

    def max(self, a: int, axis: Optional[int] = None, keepdims: bool = False) -> int:
        return self.apply("max", a, axis=axis, keepdims=keepdims)

    def log_softmax(self, a: int) -> int:
        return self.apply("log_softmax", a)

    def transpose(self, a: int) -> int:
        return self.apply("transpose", a)

    def reshape(self, a: int, shape: Sequence[int]) -> int:
        return self.apply("reshape", a, shape=tuple(shape))

    def stop_gradient(self, a: int) -> int:
        return self.apply("stop_gradient", a)

    def normalize_columns(self, a: int, eps: float = EPS_NUM) -> int:
        return self.apply("normalize_columns", a, eps=eps)

    def batchnorm(self, x: int, gamma: int, beta: int, mode: str, running_mean: Optional[np.ndarray] = None,
                  running_var: Optional[np.ndarray] = None, eps: float = EPS_BN, layer: Optional[int] = None) -> int:
        if mode not in ("train", "eval"):
            raise ContractViolation(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
        if mode == "eval" and (running_mean is None or running_var is None):
            raise ContractViolation("eval-mode batchnorm needs running statistics")
        return self.apply("batchnorm", x, gamma, beta, mode=mode, running_mean=running_mean,
                          running_var=running_var, eps=eps, layer=layer)


def evaluate(graph: Graph, bindings: Bindings) -> List[np.ndarray]:
    """
    Runs the forward pass.

    Args:
        graph: The graph to evaluate.
        bindings: Arrays for every parameter and input leaf, keyed by leaf name.

    Returns:
        The value of every node, indexed by node id.

    Raises:
        ContractViolation: A leaf is unbound.
        ShapeMismatchError: A bound leaf or a primitive's inputs have the wrong shape.
        NonFiniteError: A NaN or Inf was produced.
    """
    values: List[np.ndarray] = []
    for idx, node in enumerate(graph.nodes):
        if node.op == "constant":
            values.append(node.attrs["value"])
            continue
        if node.op in LEAF_KINDS:
            if node.name not in bindings:
                raise ContractViolation(f"leaf '{node.name}' is not bound")
            value = as_tensor(bindings[node.name], node.name)
            if value.shape != node.shape:
                raise ShapeMismatchError(idx, node.op, f"'{node.name}' bound with shape {value.shape}, declared {node.shape}")
            values.append(value)
            continue
        args = [values[i] for i in node.inputs]
        try:
            with np.errstate(all="ignore"):
                out = PRIMITIVES[node.op].forward(args, node.attrs)
        except ValueError as e:
            raise ShapeMismatchError(idx, node.op, str(e)) from e
        out = np.asarray(out, dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"node {idx} ({node.op})", "overflow or invalid value in forward pass")
        values.append(out)
    return values


def backward(graph: Graph, output: int, bindings: Bindings, wrt: Optional[Sequence[str]] = None,
             values: Optional[List[np.ndarray]] = None) -> GradientMap:
    """
    Reverse-mode gradients of a scalar node.

    Args:
        graph: The graph.
        output: Id of a node holding a single value.
        bindings: Leaf bindings, as for `evaluate`.
        wrt: Leaf names to report; defaults to every parameter and input leaf.
        values: Forward values from a previous `evaluate` call, reused if given.

    Returns:
        One gradient per requested leaf, with the leaf's shape.
    """
    if values is None:
        values = evaluate(graph, bindings)
    if values[output].size != 1:
        raise ContractViolation(f"backward needs a scalar output, node {output} has shape {values[output].shape}")
    names = list(wrt) if wrt is not None else graph.leaf_names("parameter") + graph.leaf_names("input")

    adjoints: List[Optional[np.ndarray]] = [None] * len(graph.nodes)
    adjoints[output] = np.ones_like(values[output])
    for idx in range(output, -1, -1):
        node = graph.nodes[idx]
        grad = adjoints[idx]
        if grad is None or node.op in LEAF_KINDS:
            continue
        args = [values[i] for i in node.inputs]
        with np.errstate(all="ignore"):
            input_grads = PRIMITIVES[node.op].backward(grad, args, values[idx], node.attrs)
        for src, g in zip(node.inputs, input_grads):
            if g is None:
                continue
            adjoints[src] = g if adjoints[src] is None else adjoints[src] + g

    gradients: GradientMap = {}
    for name in names:
        idx = graph.leaf_id(name)
        g = adjoints[idx]
        gradients[name] = np.zeros(graph.nodes[idx].shape) if g is None else np.asarray(g, dtype=np.float64).reshape(graph.nodes[idx].shape)
    return gradients


@dataclass
class GradientCheckReport:
    errors: Dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(err < self.tol for err in self.errors.values())


def gradient_check(graph: Graph, output: int, bindings: Bindings, step: float = 1e-5, tol: float = 1e-6,
                   wrt: Optional[Sequence[str]] = None) -> GradientCheckReport:
    """
    Compares `backward` against central finite differences.

    The error for a leaf is its largest entrywise discrepancy divided by the
    leaf's largest gradient magnitude (analytic or numeric, floored at
    GRADCHECK_FLOOR). Each entry's discrepancy is first reduced by the
    roundoff the difference quotient itself carries, about
    GRADCHECK_ULPS * eps * |loss| / step, so a vanishing gradient is not
    failed on rounding noise alone.

    Args:
        graph: The graph.
        output: Scalar node id.
        bindings: Leaf bindings; not modified.
        step: Finite-difference step, > 0.
        tol: Pass threshold on the per-leaf error.
        wrt: Leaves to check; defaults to all parameter and input leaves.

    Returns:
        A GradientCheckReport.
    """
    if step <= 0:
        raise ContractViolation("gradient_check step must be positive")
    analytic = backward(graph, output, bindings, wrt=wrt)
    errors: Dict[str, float] = {}
    for name, grad in analytic.items():
        base = as_tensor(bindings[name], name)
        numeric = np.zeros_like(base)
        noise = np.zeros_like(base)
        for i in range(base.size):
            shifted = {**bindings, name: base.copy()}
            shifted[name].flat[i] = base.flat[i] + step
            up = float(evaluate(graph, shifted)[output].reshape(()))
            shifted[name].flat[i] = base.flat[i] - step
            down = float(evaluate(graph, shifted)[output].reshape(()))
            numeric.flat[i] = (up - down) / (2.0 * step)
            noise.flat[i] = GRADCHECK_ULPS * np.finfo(np.float64).eps * max(abs(up), abs(down)) / step
        scale = max(float(np.max(np.abs(grad), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)),
                    GRADCHECK_FLOOR)
        excess = np.maximum(np.abs(grad - numeric) - noise, 0.0)
        errors[name] = float(np.max(excess, initial=0.0)) / scale
        logger.debug(f"gradient_check {name}: relative error {errors[name]:.3e}")
    return GradientCheckReport(errors=errors, tol=tol)


@dataclass
class LossGraph:
    """A graph, its scalar output node and the bindings it is evaluated with."""
    graph: Graph
    output: int
    bindings: Bindings

    def value(self) -> float:
        return float(evaluate(self.graph, self.bindings)[self.output].reshape(()))

    def gradients(self, wrt: Optional[Sequence[str]] = None) -> GradientMap:
        return backward(self.graph, self.output, self.bindings, wrt=wrt)

    def check(self, step: float = 1e-5, tol: float = 1e-6, wrt: Optional[Sequence[str]] = None) -> GradientCheckReport:
        return gradient_check(self.graph, self.output, self.bindings, step=step, tol=tol, wrt=wrt)
