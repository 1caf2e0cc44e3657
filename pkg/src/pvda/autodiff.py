"""Reverse-mode automatic differentiation over dense float64 matrices.

Every quantity is a 2-D array. Forward values are computed eagerly when an
``op_*`` function is called; each op registers a closure mapping the gradient
of its output to gradients of its parents. :func:`backward` walks the graph
once in reverse topological order.

Shapes are never broadcast implicitly. The only mixed-shape ops are the
explicitly named ones (:func:`op_add_bias`, :func:`op_row_scale`,
:func:`op_scale`).
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, InputError, UsageError

__all__ = [
    "Node",
    "ParamSet",
    "backward",
    "constant",
    "grad_check",
    "no_grad",
    "op_add",
    "op_add_bias",
    "op_clamp_min",
    "op_concat_rows",
    "op_cross_entropy",
    "op_exp",
    "op_grl",
    "op_log_softmax",
    "op_matmul",
    "op_mean",
    "op_mul",
    "op_relu",
    "op_row_scale",
    "op_scale",
    "op_sum_rows",
    "op_tanh",
    "parameter",
]

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    """A vertex of the computation graph holding a value matrix and its gradient."""

    __slots__ = ("_backward", "grad", "op", "parents", "requires_grad", "values")

    def __init__(
        self,
        values: np.ndarray,
        op: str = "leaf",
        parents: tuple[Node, ...] = (),
        requires_grad: bool = False,
        backward_fn: BackwardFn | None = None,
    ):
        if type(values) is not np.ndarray or values.dtype != np.float64:
            values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise ConfigError(f"Node values must be 2-D, got shape {values.shape}")
        self.values = values
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(values) if requires_grad and not parents else None
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def item(self) -> float:
        if self.values.shape != (1, 1):
            raise UsageError(f"item() needs a 1x1 node, got {self.values.shape}")
        return float(self.values[0, 0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"


def constant(values) -> Node:
    """Wrap an array (scalars become 1x1, vectors become one row) as a constant."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return Node(arr, op="const")


def parameter(values) -> Node:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return Node(arr, op="param", requires_grad=True)


class ParamSet:
    """Named trainable nodes, iterated in insertion order."""

    def __init__(self, items: Iterable[tuple[str, Node]] = ()):
        self._nodes: dict[str, Node] = {}
        for name, node in items:
            self.add(name, node)

    def add(self, name: str, node: Node) -> Node:
        if name in self._nodes:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if not node.requires_grad:
            raise ConfigError(f"parameter {name!r} must require grad")
        self._nodes[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._nodes[name]

    def __contains__(self, name: str) -> bool:
        return name in self._nodes

    def __iter__(self) -> Iterator[str]:
        return iter(self._nodes)

    def __len__(self) -> int:
        return len(self._nodes)

    def items(self):
        return self._nodes.items()

    def values(self):
        return self._nodes.values()

    def zero_grad(self) -> None:
        for node in self._nodes.values():
            node.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {name: node.values.copy() for name, node in self._nodes.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, node in self._nodes.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != node.values.shape:
                raise ConfigError(
                    f"parameter {name!r}: expected shape {node.values.shape}, got {arr.shape}"
                )
            node.values[...] = arr


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build forward values only; results never require grad or keep parents."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _make(values: np.ndarray, op: str, parents: tuple[Node, ...], backward_fn: BackwardFn) -> Node:
    if not _GRAD_ENABLED:
        return Node(values, op)
    for p in parents:
        if p.requires_grad:
            return Node(values, op, parents, True, backward_fn)
    return Node(values, op, parents)


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ConfigError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def op_matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def back(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _make(av @ bv, "matmul", (a, b), back)


def op_add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return _make(a.values + b.values, "add", (a, b), lambda g: (g, g))


def op_add_bias(x: Node, bias: Node) -> Node:
    """Add a 1 x c row to every row of an n x c matrix."""
    if bias.shape[0] != 1 or bias.shape[1] != x.shape[1]:
        raise ConfigError(f"add_bias: shape mismatch {x.shape} + {bias.shape}")
    return _make(
        x.values + bias.values,
        "add_bias",
        (x, bias),
        lambda g: (g, g.sum(axis=0, keepdims=True)),
    )


def op_mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _make(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def op_row_scale(x: Node, w: Node) -> Node:
    """Multiply row i of an n x c matrix by w[i] where w is n x 1."""
    if w.shape != (x.shape[0], 1):
        raise ConfigError(f"row_scale: shape mismatch {x.shape} * {w.shape}")
    xv, wv = x.values, w.values

    def back(g):
        return (g * wv, (g * xv).sum(axis=1, keepdims=True) if w.requires_grad else None)

    return _make(xv * wv, "row_scale", (x, w), back)


def op_scale(x: Node, s: float) -> Node:
    s = float(s)
    return _make(x.values * s, "scale", (x,), lambda g: (g * s,))


def op_relu(x: Node) -> Node:
    mask = x.values > 0
    return _make(np.where(mask, x.values, 0.0), "relu", (x,), lambda g: (g * mask,))


def op_tanh(x: Node) -> Node:
    out = np.tanh(x.values)
    return _make(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def op_exp(x: Node) -> Node:
    out = np.exp(x.values)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def op_clamp_min(x: Node, floor: float) -> Node:
    mask = x.values > floor
    return _make(np.where(mask, x.values, floor), "clamp_min", (x,), lambda g: (g * mask,))


def op_mean(x: Node) -> Node:
    n = x.values.size
    shape = x.shape
    return _make(
        np.array([[x.values.mean()]]),
        "mean",
        (x,),
        lambda g: (np.full(shape, g[0, 0] / n),),
    )


def op_sum_rows(x: Node) -> Node:
    """Sum across columns: n x c -> n x 1."""
    shape = x.shape
    return _make(
        x.values.sum(axis=1, keepdims=True),
        "sum_rows",
        (x,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
    )


def op_concat_rows(nodes: Sequence[Node]) -> Node:
    nodes = tuple(nodes)
    if not nodes:
        raise ConfigError("concat_rows: no inputs")
    cols = {n.shape[1] for n in nodes}
    if len(cols) != 1:
        raise ConfigError(f"concat_rows: column mismatch {[n.shape for n in nodes]}")
    bounds = np.cumsum([0] + [n.shape[0] for n in nodes])

    def back(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(nodes)))

    return _make(np.vstack([n.values for n in nodes]), "concat_rows", nodes, back)


def _log_softmax(v: np.ndarray) -> np.ndarray:
    shifted = v - np.maximum.reduce(v, axis=1, keepdims=True)
    return shifted - np.log(np.add.reduce(np.exp(shifted), axis=1, keepdims=True))


def op_log_softmax(logits: Node) -> Node:
    out = _log_softmax(logits.values)
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _make(out, "log_softmax", (logits,), back)


def log_softmax(values) -> np.ndarray:
    """Row-wise, max-stabilized log-softmax of a plain array."""
    return _log_softmax(np.atleast_2d(np.asarray(values, dtype=np.float64)))


def softmax(values) -> np.ndarray:
    return np.exp(log_softmax(values))


def op_cross_entropy(logits: Node, labels) -> Node:
    """Per-row cross-entropy: n x C logits and n labels -> n x 1 losses."""
    labels = np.atleast_1d(np.asarray(labels))
    n, c = logits.shape
    if labels.shape != (n,):
        raise InputError(f"cross_entropy: {n} rows but {labels.shape[0]} labels")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError(f"cross_entropy: labels must be integers, got {labels.dtype}")
    if n and (np.minimum.reduce(labels) < 0 or np.maximum.reduce(labels) >= c):
        raise InputError(f"cross_entropy: label out of range [0, {c}): {labels.tolist()}")
    logp = _log_softmax(logits.values)
    rows = np.arange(n)
    out = -logp[rows, labels].reshape(n, 1)

    def back(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * g,)

    return _make(out, "cross_entropy", (logits,), back)


def op_grl(x: Node, coeff: float) -> Node:
    """Gradient reversal: identity forward, gradient times ``-coeff`` backward."""
    coeff = float(coeff)
    if coeff < 0:
        raise ConfigError(f"grl coefficient must be >= 0, got {coeff}")
    return _make(x.values, "grl", (x,), lambda g: (-coeff * g,))


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every trainable leaf.

    Intermediate gradients are reset on each call, so calling twice without
    zeroing the leaves adds the gradient twice.
    """
    if root.shape != (1, 1):
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topological(root)
    for node in order:
        if node.parents:
            node.grad = None
    root.grad = np.ones((1, 1)) if root.parents else root.grad + 1.0
    for node in reversed(order):
        if not node.parents or node.grad is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64)
            else:
                parent.grad = parent.grad + g


def grad_check(builder: Callable[[], Node], params: ParamSet, eps: float = 1e-5) -> float:
    """Largest relative error between backprop and central differences.

    ``builder`` must rebuild the scalar graph from the current parameter
    values on every call.
    """
    params.zero_grad()
    backward(builder())
    worst = 0.0
    for node in params.values():
        analytic = node.grad.copy()
        flat = node.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = builder().item()
                flat[i] = orig - eps
                down = builder().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1e-8, abs(numeric))
            if math.isnan(err):
                return math.inf
            worst = max(worst, err)
    params.zero_grad()
    return worst
