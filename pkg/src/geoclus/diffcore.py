"""Small reverse-mode automatic differentiation engine over float64 arrays.

Graphs are static: build them once from ``parameter``/``input`` leaves and
operations, then call :func:`forward` with bindings and :func:`backward` to
get gradients for every parameter leaf.  Rebinding and re-running the same
graph is the intended way to iterate.

    >>> x = parameter("x")
    >>> y = reduce_sum(x * x)
    >>> float(forward(y, {"x": np.array([1.0, 2.0, 3.0])}))
    14.0
    >>> backward(y)["x"]
    array([2., 4., 6.])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

ACTIVATIONS = ("identity", "relu", "softplus", "sigmoid", "tanh")


class DiffError(Exception):
    """Base class for graph evaluation errors."""


class ShapeError(DiffError):
    pass


class NonFiniteError(DiffError):
    pass


class GraphStateError(DiffError):
    pass


class Node:
    """One vertex of a computation graph.

    ``op`` is the operation kind, ``inputs`` the parent nodes, ``attrs``
    static operation arguments (axes, shapes, slice keys).  ``value`` is the
    cached forward result.
    """

    __slots__ = ("op", "inputs", "attrs", "name", "value", "cache", "order")
    __array_priority__ = 100.0

    def __init__(self, op, inputs=(), attrs=None, name=None, value=None):
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.name = name
        self.value = value
        self.cache = None
        self.order = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        shape = "" if self.value is None else f" shape={self.value.shape}"
        return f"<Node {self.op}{label}{shape}>"

    @property
    def shape(self):
        if self.value is None:
            raise GraphStateError(f"{self!r} has not been evaluated")
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, negate(as_node(other)))

    def __rsub__(self, other):
        return add(as_node(other), negate(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return constant(x)


# -- leaves -----------------------------------------------------------------

def constant(value) -> Node:
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("constant contains non-finite values")
    return Node("constant", value=arr)


def parameter(name: str) -> Node:
    """Bindable leaf whose gradient :func:`backward` reports."""
    return Node("parameter", name=name)


def input(name: str) -> Node:  # noqa: A001 - mirrors the op-kind name
    """Bindable leaf that is never differentiated."""
    return Node("input", name=name)


# -- op constructors ----------------------------------------------------------

def add(a, b) -> Node:
    return Node("add", (as_node(a), as_node(b)))


def mul(a, b) -> Node:
    return Node("mul", (as_node(a), as_node(b)))


def matmul(a, b) -> Node:
    return Node("matmul", (as_node(a), as_node(b)))


def negate(a) -> Node:
    return Node("negate", (as_node(a),))


def softplus(a) -> Node:
    return Node("softplus", (as_node(a),))


def relu(a) -> Node:
    return Node("relu", (as_node(a),))


def sigmoid(a) -> Node:
    return Node("sigmoid", (as_node(a),))


def tanh(a) -> Node:
    return Node("tanh", (as_node(a),))


def exp(a) -> Node:
    return Node("exp", (as_node(a),))


def log(a) -> Node:
    return Node("log", (as_node(a),))


def square(a) -> Node:
    return Node("square", (as_node(a),))


def reduce_sum(a, axis=None, keepdims=False) -> Node:
    return Node("sum", (as_node(a),), {"axis": axis, "keepdims": keepdims})


def reduce_mean(a, axis=None, keepdims=False) -> Node:
    return Node("mean", (as_node(a),), {"axis": axis, "keepdims": keepdims})


def reshape(a, shape) -> Node:
    return Node("reshape", (as_node(a),), {"shape": tuple(shape)})


def index(a, key) -> Node:
    """Basic (slice/integer) indexing; fancy indexing is not supported."""
    key = key if isinstance(key, tuple) else (key,)
    for k in key:
        if not (isinstance(k, (slice, int)) or k is Ellipsis or k is None):
            raise TypeError(f"unsupported index component {k!r}")
    return Node("slice", (as_node(a),), {"key": key})


def activate(kind: str, a) -> Node:
    if kind == "identity":
        return as_node(a)
    try:
        return _ACTIVATION_OPS[kind](a)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


_ACTIVATION_OPS: dict[str, Callable[[Node], Node]] = {
    "relu": relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


# -- forward / backward kernels ---------------------------------------------

def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _reduced_grad(g, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, in_shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(in_shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, in_shape)


def _mean_count(in_shape, axis):
    if axis is None:
        return int(np.prod(in_shape))
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([in_shape[ax] for ax in axes]))


def _fwd(node: Node, vals):
    op = node.op
    a = vals[0]
    if op == "add":
        return a + vals[1]
    if op == "mul":
        return a * vals[1]
    if op == "matmul":
        b = vals[1]
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul of {a.shape} and {b.shape}")
        return a @ b
    if op == "negate":
        return -a
    if op == "softplus":
        e = np.exp(-np.abs(a))
        node.cache = e
        return np.maximum(a, 0.0) + np.log1p(e)
    if op == "relu":
        return np.maximum(a, 0.0)
    if op == "sigmoid":
        return 0.5 * (np.tanh(0.5 * a) + 1.0)
    if op == "tanh":
        return np.tanh(a)
    if op == "exp":
        return np.exp(a)
    if op == "log":
        return np.log(a)
    if op == "square":
        return a * a
    if op == "sum":
        return np.sum(a, axis=node.attrs["axis"], keepdims=node.attrs["keepdims"])
    if op == "mean":
        return np.mean(a, axis=node.attrs["axis"], keepdims=node.attrs["keepdims"])
    if op == "reshape":
        return a.reshape(node.attrs["shape"])
    if op == "slice":
        return a[node.attrs["key"]]
    raise GraphStateError(f"unknown op {op!r}")


def _bwd(node: Node, g, vals, out):
    op = node.op
    a = vals[0]
    if op == "add":
        return _unbroadcast(g, a.shape), _unbroadcast(g, vals[1].shape)
    if op == "mul":
        b = vals[1]
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
    if op == "matmul":
        b = vals[1]
        return g @ b.T, a.T @ g
    if op == "negate":
        return (-g,)
    if op == "softplus":
        e = node.cache
        inv = 1.0 / (1.0 + e)
        sig = np.where(a >= 0, inv, e * inv)
        return (g * sig,)
    if op == "relu":
        return (g * (a > 0),)
    if op == "sigmoid":
        return (g * out * (1.0 - out),)
    if op == "tanh":
        return (g * (1.0 - out * out),)
    if op == "exp":
        return (g * out,)
    if op == "log":
        return (g / a,)
    if op == "square":
        return (2.0 * g * a,)
    if op == "sum":
        return (_reduced_grad(g, a.shape, node.attrs["axis"], node.attrs["keepdims"]),)
    if op == "mean":
        n = _mean_count(a.shape, node.attrs["axis"])
        return (_reduced_grad(g, a.shape, node.attrs["axis"], node.attrs["keepdims"]) / n,)
    if op == "reshape":
        return (g.reshape(a.shape),)
    if op == "slice":
        full = np.zeros_like(a)
        full[node.attrs["key"]] = g
        return (full,)
    raise GraphStateError(f"no gradient for op {op!r}")


def topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.inputs):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def leaves(root: Node, kind: str = "parameter") -> dict[str, Node]:
    return {n.name: n for n in topological_order(root) if n.op == kind}


def forward(root: Node, bindings: Mapping[str, np.ndarray] | None = None,
            check_finite: bool = True) -> np.ndarray:
    """Evaluate ``root``, caching every intermediate value on its node.

    Raises ShapeError when operand shapes do not compose and NonFiniteError
    when any intermediate is NaN/Inf (unless ``check_finite`` is False).
    """
    bindings = bindings or {}
    order = topological_order(root)
    for node in order:
        if node.op in ("parameter", "input"):
            if node.name not in bindings:
                raise GraphStateError(f"no binding for {node.op} {node.name!r}")
            value = np.asarray(bindings[node.name], dtype=np.float64)
        elif node.op == "constant":
            continue
        else:
            vals = [p.value for p in node.inputs]
            try:
                with np.errstate(all="ignore"):
                    value = _fwd(node, vals)
            except ValueError as exc:
                shapes = [v.shape for v in vals]
                raise ShapeError(f"{node.op} on shapes {shapes}: {exc}") from None
        if check_finite and not np.all(np.isfinite(value)):
            where = f" {node.name!r}" if node.name else ""
            raise NonFiniteError(f"non-finite value from {node.op}{where}")
        node.value = value
    root.order = order
    return root.value


def evaluate(root: Node) -> np.ndarray:
    """Forward pass for graphs without bindable leaves."""
    return forward(root, {})


def backward(root: Node, params: Mapping[str, np.ndarray] | None = None,
             check_finite: bool = True) -> dict[str, np.ndarray]:
    """Gradients of scalar ``root`` w.r.t. every parameter leaf.

    Names in ``params`` that do not occur in the graph get zero gradients
    shaped like the given array.
    """
    order = root.order
    if order is None or root.value is None:
        raise GraphStateError("backward called before forward")
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.value.shape}")

    needs: dict[int, bool] = {}
    for node in order:
        needs[id(node)] = node.op == "parameter" or any(needs[id(p)] for p in node.inputs)

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    out: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not needs[id(node)]:
            continue
        if node.op == "parameter":
            g = np.array(np.broadcast_to(g, node.value.shape), dtype=np.float64)
            if node.name in out:
                out[node.name] = out[node.name] + g
            else:
                out[node.name] = g
            continue
        with np.errstate(all="ignore"):
            parent_grads = _bwd(node, g, [p.value for p in node.inputs], node.value)
        for parent, pg in zip(node.inputs, parent_grads):
            if not needs[id(parent)]:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    if check_finite:
        for name, g in out.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name!r}")
    for name, value in (params or {}).items():
        if name not in out:
            out[name] = np.zeros_like(np.asarray(value, dtype=np.float64))
    return out


def value_and_grad(root: Node, bindings: Mapping[str, np.ndarray]):
    value = forward(root, bindings)
    names = leaves(root)
    grads = backward(root, {k: v for k, v in bindings.items() if k in names})
    return float(value), grads


# -- multi-layer perceptrons -----------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"bad layer widths {self.widths}")
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError("need one activation per layer")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def n_layers(self) -> int:
        return len(self.activations)

    def param_names(self, prefix: str) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"{prefix}.W{i}", f"{prefix}.b{i}"]
        return names

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "activations": list(self.activations)}

    @classmethod
    def from_dict(cls, d) -> "MlpSpec":
        return cls(tuple(d["widths"]), tuple(d["activations"]))


def init_mlp(spec: MlpSpec, rng: np.random.Generator, prefix: str) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases."""
    params = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{prefix}.W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{prefix}.b{i}"] = np.zeros(fan_out)
    return params


def mlp_apply(spec: MlpSpec, params: Sequence, x) -> Node:
    """Build the MLP graph on ``x``.

    ``params`` is the flat [W0, b0, W1, b1, ...] list; entries may be nodes
    (e.g. parameter leaves) or arrays, which become constants.
    """
    if len(params) != 2 * spec.n_layers:
        raise ValueError(f"expected {2 * spec.n_layers} parameter arrays, got {len(params)}")
    h = as_node(x)
    for i, act in enumerate(spec.activations):
        W, b = as_node(params[2 * i]), as_node(params[2 * i + 1])
        h = activate(act, h @ W + b)
    return h


def mlp_graph(spec: MlpSpec, prefix: str, x) -> Node:
    """MLP on ``x`` with parameter leaves named ``prefix.W{i}``/``prefix.b{i}``."""
    return mlp_apply(spec, [parameter(n) for n in spec.param_names(prefix)], x)


def mlp_eval(spec: MlpSpec, params: Mapping[str, np.ndarray], prefix: str,
             x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.widths[0]:
        raise ShapeError(f"MLP input width {spec.widths[0]} but got shape {x.shape}")
    node = mlp_apply(spec, [params[n] for n in spec.param_names(prefix)], x)
    return evaluate(node)


# -- optimizer -------------------------------------------------------------------

def adam_update(param, grad, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (param, m, v).

    ``step`` is the 1-based count after this update.  With ``beta2 == 0`` the
    second-moment preconditioner is switched off, so beta1 = beta2 = 0 is
    plain gradient descent.
    """
    m = beta1 * m + (1.0 - beta1) * grad
    m_hat = m / (1.0 - beta1 ** step)
    if beta2 == 0.0:
        return param - lr * m_hat, m, v
    v = beta2 * v + (1.0 - beta2) * grad * grad
    v_hat = v / (1.0 - beta2 ** step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def step(self, params: Mapping[str, np.ndarray],
             grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name!r}")
        self.step_count += 1
        new = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            elif g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            new[name], self.m[name], self.v[name] = adam_update(
                p, g, m, v, self.step_count, self.lr, self.beta1, self.beta2, self.eps)
        return new


def optimizer_step(state: Adam, params, grads):
    return state.step(params, grads)
