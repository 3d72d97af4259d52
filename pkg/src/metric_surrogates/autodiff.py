"""Minimal reverse-mode automatic differentiation on dense float64 tensors.

The engine is deliberately small: values are computed eagerly while an
append-only tape records every operation, and ``Graph.backward`` replays the
tape in reverse to accumulate vector-Jacobian products. Graphs are
single-owner and single-threaded; ``Tensor`` values are immutable and safe to
share between threads.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "GraphMeter",
    "graph_meter",
    "Optimizer",
    "ShapeMismatch",
    "DomainError",
    "grad_check",
    "step",
    "OP_KINDS",
]


class ShapeMismatch(ValueError):
    """Operand shapes are invalid for the requested operation."""


class DomainError(ValueError):
    """Numeric input outside the mathematical domain of an operation."""


class Tensor:
    """Immutable dense array of 64-bit floats, row-major.

    Scalars are canonicalized to shape ``(1,)``. Construction rejects NaN and
    Inf entries so downstream code never has to re-check finiteness.
    """

    __slots__ = ("_array",)

    def __init__(self, values, shape=None):
        arr = np.array(values, dtype=np.float64, copy=True)
        if shape is not None:
            arr = arr.reshape(tuple(shape))
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.all(np.isfinite(arr)):
            raise DomainError("Tensor entries must be finite (got NaN or Inf)")
        arr.setflags(write=False)
        self._array = arr

    @property
    def shape(self) -> tuple:
        return self._array.shape

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray view of the value."""
        return self._array

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the entries."""
        return self._array.reshape(-1)

    @property
    def size(self) -> int:
        return self._array.size

    def item(self) -> float:
        if self._array.size != 1:
            raise ShapeMismatch(f"item() needs a scalar, got shape {self.shape}")
        return float(self._array.reshape(-1)[0])

    def tolist(self):
        return self._array.tolist()

    @staticmethod
    def zeros(shape) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float64))

    @staticmethod
    def full(shape, value: float) -> "Tensor":
        return Tensor(np.full(shape, value, dtype=np.float64))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={self._array!r})"

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._array, other._array))

    def __hash__(self):
        return hash((self.shape, self._array.tobytes()))


class GraphMeter:
    """Tracks elements held by live graphs, a proxy for tape memory."""

    def __init__(self):
        self.live_elements = 0
        self.peak_elements = 0

    def reset(self):
        self.live_elements = 0
        self.peak_elements = 0

    def add(self, n: int):
        self.live_elements += n
        if self.live_elements > self.peak_elements:
            self.peak_elements = self.live_elements

    def remove(self, n: int):
        self.live_elements -= n


_METER = GraphMeter()


def graph_meter() -> GraphMeter:
    """Process-wide meter that all graphs report their node sizes to."""
    return _METER


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch form keeps exp() arguments non-positive; needed because callers
    # divide by temperatures as small as 0.01.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


_NORM_FLOOR = 1e-12


def _require_2d(op: str, *arrays: np.ndarray):
    for a in arrays:
        if a.ndim != 2:
            raise ShapeMismatch(f"{op} requires 2-D operands, got shape {a.shape}")


def _broadcast_pair(op: str, a: np.ndarray, b: np.ndarray):
    """Allow equal shapes, or a 1-D vector applied row-wise to a 2-D matrix."""
    if a.shape == b.shape:
        return None
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return "b"
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return "a"
    raise ShapeMismatch(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_broadcast(grad: np.ndarray, target_shape: tuple) -> np.ndarray:
    if grad.shape == target_shape:
        return grad
    return grad.sum(axis=0)


OP_KINDS = (
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "matmul",
    "neg",
    "exp",
    "log",
    "sigmoid",
    "relu",
    "sum",
    "mean",
    "scale",
    "l2-normalize-rows",
    "concat-rows",
    "softmax-rows",
    "gather-rows",
)


class _Node:
    __slots__ = ("op", "inputs", "value", "attrs")

    def __init__(self, op, inputs, value, attrs):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.attrs = attrs


class Graph:
    """Append-only computation tape with eager forward evaluation.

    Node inputs always reference earlier node ids, so the graph is acyclic by
    construction. ``backward`` resets gradient slots on every call, making
    repeated backward passes idempotent.
    """

    def __init__(self, meter: GraphMeter | None = None):
        self.nodes: list[_Node] = []
        self._meter = meter if meter is not None else _METER
        self._elements = 0
        self._released = False

    # -- construction ------------------------------------------------------

    def node(self, op: str, inputs, **attrs) -> int:
        """Append a node computing ``op`` over earlier node ids; returns its id."""
        if self._released:
            raise RuntimeError("graph has been released")
        if op not in OP_KINDS:
            raise ShapeMismatch(f"unknown op kind {op!r}")
        inputs = tuple(inputs)
        for i in inputs:
            if not (0 <= i < len(self.nodes)):
                raise ShapeMismatch(f"{op}: input id {i} out of range")
        vals = [self.nodes[i].value for i in inputs]
        out = _FORWARD[op](vals, attrs)
        out.setflags(write=False)
        nid = len(self.nodes)
        self.nodes.append(_Node(op, inputs, out, attrs))
        self._elements += out.size
        self._meter.add(out.size)
        return nid

    def constant(self, value) -> int:
        t = value if isinstance(value, Tensor) else Tensor(value)
        return self.node("constant", (), tensor=t)

    def parameter(self, value) -> int:
        t = value if isinstance(value, Tensor) else Tensor(value)
        return self.node("parameter", (), tensor=t)

    def add(self, a: int, b: int) -> int:
        return self.node("add", (a, b))

    def sub(self, a: int, b: int) -> int:
        return self.node("sub", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self.node("mul", (a, b))

    def matmul(self, a: int, b: int, transpose_b: bool = False) -> int:
        return self.node("matmul", (a, b), transpose_b=transpose_b)

    def neg(self, a: int) -> int:
        return self.node("neg", (a,))

    def exp(self, a: int) -> int:
        return self.node("exp", (a,))

    def log(self, a: int) -> int:
        return self.node("log", (a,))

    def sigmoid(self, a: int) -> int:
        return self.node("sigmoid", (a,))

    def relu(self, a: int) -> int:
        return self.node("relu", (a,))

    def sum(self, a: int) -> int:
        return self.node("sum", (a,))

    def mean(self, a: int) -> int:
        return self.node("mean", (a,))

    def scale(self, a: int, factor: float) -> int:
        return self.node("scale", (a,), factor=float(factor))

    def l2_normalize_rows(self, a: int) -> int:
        return self.node("l2-normalize-rows", (a,))

    def concat_rows(self, ids) -> int:
        return self.node("concat-rows", tuple(ids))

    def softmax_rows(self, a: int) -> int:
        return self.node("softmax-rows", (a,))

    def gather_rows(self, a: int, indices) -> int:
        return self.node("gather-rows", (a,), indices=tuple(int(i) for i in indices))

    # -- access ------------------------------------------------------------

    def value(self, nid: int) -> Tensor:
        arr = self.nodes[nid].value
        t = Tensor.__new__(Tensor)
        t._array = arr
        return t

    def __len__(self):
        return len(self.nodes)

    # -- backward ----------------------------------------------------------

    def backward(self, loss: int) -> dict[int, Tensor]:
        """Gradient of a scalar loss node with respect to every node.

        Nodes unreachable from the loss get zero gradients. The returned map
        covers all node ids; gradient shapes match value shapes.
        """
        if self.nodes[loss].value.size != 1:
            raise ShapeMismatch(
                f"backward needs a scalar loss, got shape {self.nodes[loss].value.shape}"
            )
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss] = np.ones_like(self.nodes[loss].value)
        for nid in range(loss, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if not node.inputs:
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            in_grads = _VJP[node.op](g, vals, node.value, node.attrs)
            for i, ig in zip(node.inputs, in_grads):
                if ig is None:
                    continue
                # Accumulation always reallocates, so views returned by VJPs
                # (concat slices) are safe to store.
                grads[i] = ig if grads[i] is None else grads[i] + ig
        out: dict[int, Tensor] = {}
        for nid, node in enumerate(self.nodes):
            arr = grads[nid]
            if arr is None:
                arr = np.zeros_like(node.value)
            t = Tensor.__new__(Tensor)
            a = np.ascontiguousarray(arr)
            a.setflags(write=False)
            t._array = a
            out[nid] = t
        return out

    def release(self):
        """Drop the tape and report freed elements to the meter. Idempotent."""
        if not self._released:
            self._meter.remove(self._elements)
            self._elements = 0
            self.nodes = []
            self._released = True


# -- forward rules ----------------------------------------------------------


def _fwd_leaf(vals, attrs):
    return attrs["tensor"].array


def _fwd_add(vals, attrs):
    a, b = vals
    _broadcast_pair("add", a, b)
    return a + b


def _fwd_sub(vals, attrs):
    a, b = vals
    _broadcast_pair("sub", a, b)
    return a - b


def _fwd_mul(vals, attrs):
    a, b = vals
    _broadcast_pair("mul", a, b)
    return a * b


def _fwd_matmul(vals, attrs):
    a, b = vals
    _require_2d("matmul", a, b)
    if attrs.get("transpose_b", False):
        if a.shape[1] != b.shape[1]:
            raise ShapeMismatch(f"matmul(transpose_b): {a.shape} x {b.shape}^T")
        return a @ b.T
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} x {b.shape}")
    return a @ b


def _fwd_neg(vals, attrs):
    return -vals[0]


def _fwd_exp(vals, attrs):
    with np.errstate(over="ignore"):
        out = np.exp(vals[0])
    if not np.all(np.isfinite(out)):
        raise DomainError("exp overflowed to Inf")
    return out


def _fwd_log(vals, attrs):
    x = vals[0]
    if np.any(x <= 0):
        raise DomainError("log of non-positive input")
    return np.log(x)


def _fwd_sigmoid(vals, attrs):
    return _sigmoid(vals[0])


def _fwd_relu(vals, attrs):
    return np.maximum(vals[0], 0.0)


def _fwd_sum(vals, attrs):
    return np.array([vals[0].sum()])


def _fwd_mean(vals, attrs):
    return np.array([vals[0].mean()])


def _fwd_scale(vals, attrs):
    f = attrs["factor"]
    if not math.isfinite(f):
        raise DomainError("scale factor must be finite")
    return vals[0] * f


def _fwd_l2norm(vals, attrs):
    x = vals[0]
    _require_2d("l2-normalize-rows", x)
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norms, _NORM_FLOOR)


def _fwd_concat(vals, attrs):
    _require_2d("concat-rows", *vals)
    cols = {v.shape[1] for v in vals}
    if len(cols) != 1:
        raise ShapeMismatch(f"concat-rows: column counts differ {sorted(cols)}")
    return np.concatenate(vals, axis=0)


def _fwd_softmax(vals, attrs):
    _require_2d("softmax-rows", vals[0])
    return _softmax_rows(vals[0])


def _fwd_gather(vals, attrs):
    x = vals[0]
    _require_2d("gather-rows", x)
    idx = attrs["indices"]
    for i in idx:
        if not (0 <= i < x.shape[0]):
            raise ShapeMismatch(f"gather-rows: index {i} out of range for {x.shape}")
    return x[list(idx), :]


_FORWARD = {
    "constant": _fwd_leaf,
    "parameter": _fwd_leaf,
    "add": _fwd_add,
    "sub": _fwd_sub,
    "mul": _fwd_mul,
    "matmul": _fwd_matmul,
    "neg": _fwd_neg,
    "exp": _fwd_exp,
    "log": _fwd_log,
    "sigmoid": _fwd_sigmoid,
    "relu": _fwd_relu,
    "sum": _fwd_sum,
    "mean": _fwd_mean,
    "scale": _fwd_scale,
    "l2-normalize-rows": _fwd_l2norm,
    "concat-rows": _fwd_concat,
    "softmax-rows": _fwd_softmax,
    "gather-rows": _fwd_gather,
}


# -- vector-Jacobian products -------------------------------------------------


def _vjp_add(g, vals, out, attrs):
    a, b = vals
    return [_reduce_broadcast(g, a.shape), _reduce_broadcast(g, b.shape)]


def _vjp_sub(g, vals, out, attrs):
    a, b = vals
    return [_reduce_broadcast(g, a.shape), _reduce_broadcast(-g, b.shape)]


def _vjp_mul(g, vals, out, attrs):
    a, b = vals
    return [_reduce_broadcast(g * b, a.shape), _reduce_broadcast(g * a, b.shape)]


def _vjp_matmul(g, vals, out, attrs):
    a, b = vals
    if attrs.get("transpose_b", False):
        return [g @ b, g.T @ a]
    return [g @ b.T, a.T @ g]


def _vjp_neg(g, vals, out, attrs):
    return [-g]


def _vjp_exp(g, vals, out, attrs):
    return [g * out]


def _vjp_log(g, vals, out, attrs):
    return [g / vals[0]]


def _vjp_sigmoid(g, vals, out, attrs):
    return [g * out * (1.0 - out)]


def _vjp_relu(g, vals, out, attrs):
    return [g * (vals[0] > 0)]


def _vjp_sum(g, vals, out, attrs):
    return [np.full_like(vals[0], g[0])]


def _vjp_mean(g, vals, out, attrs):
    return [np.full_like(vals[0], g[0] / vals[0].size)]


def _vjp_scale(g, vals, out, attrs):
    return [g * attrs["factor"]]


def _vjp_l2norm(g, vals, out, attrs):
    x = vals[0]
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    floored = norms < _NORM_FLOOR
    denom = np.maximum(norms, _NORM_FLOOR)
    # Rows at or below the floor are scaled by a constant, so the Jacobian is
    # diagonal there; elsewhere it is the usual projection.
    proj = (g - out * (out * g).sum(axis=1, keepdims=True)) / denom
    flat = g / denom
    return [np.where(floored, flat, proj)]


def _vjp_concat(g, vals, out, attrs):
    grads = []
    offset = 0
    for v in vals:
        grads.append(g[offset : offset + v.shape[0], :])
        offset += v.shape[0]
    return grads


def _vjp_softmax(g, vals, out, attrs):
    dot = (g * out).sum(axis=1, keepdims=True)
    return [out * (g - dot)]


def _vjp_gather(g, vals, out, attrs):
    x = vals[0]
    grad = np.zeros_like(x)
    np.add.at(grad, list(attrs["indices"]), g)
    return [grad]


_VJP = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "matmul": _vjp_matmul,
    "neg": _vjp_neg,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "sigmoid": _vjp_sigmoid,
    "relu": _vjp_relu,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "scale": _vjp_scale,
    "l2-normalize-rows": _vjp_l2norm,
    "concat-rows": _vjp_concat,
    "softmax-rows": _vjp_softmax,
    "gather-rows": _vjp_gather,
}


# -- gradient checking --------------------------------------------------------


def grad_check(f, x: Tensor, eps: float = 1e-6) -> float:
    """Compare analytic and central-difference gradients of a scalar function.

    ``f(graph, x_node_id) -> loss_node_id`` builds the computation for a given
    input. Returns ``max_i |analytic_i - numeric_i| / max(1, |numeric_i|)``.
    Non-finite intermediates make the result ``inf`` instead of raising.
    """
    if not (0 < eps <= 1e-2):
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")

    def evaluate(arr: np.ndarray) -> float:
        g = Graph()
        loss = f(g, g.parameter(Tensor(arr)))
        val = g.value(loss).item()
        g.release()
        return val

    try:
        g = Graph()
        xid = g.parameter(x)
        loss = f(g, xid)
        analytic = g.backward(loss)[xid].array.copy()
        g.release()

        base = x.array
        worst = 0.0
        flat = base.reshape(-1)
        for i in range(flat.size):
            perturbed = flat.copy()
            perturbed[i] = flat[i] + eps
            fp = evaluate(perturbed.reshape(base.shape))
            perturbed[i] = flat[i] - eps
            fm = evaluate(perturbed.reshape(base.shape))
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        if not math.isfinite(worst):
            return math.inf
        return worst
    except (DomainError, FloatingPointError, OverflowError):
        return math.inf


# -- optimizers ---------------------------------------------------------------


class Optimizer:
    """SGD or Adam over an ordered parameter list.

    Moment slots are keyed by position, so callers must pass parameters in a
    stable order across steps.
    """

    def __init__(self, kind: str, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.kind = kind
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._moments: list[tuple[np.ndarray, np.ndarray]] | None = None

    @staticmethod
    def sgd(lr: float) -> "Optimizer":
        return Optimizer("sgd", lr)

    @staticmethod
    def adam(lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "Optimizer":
        return Optimizer("adam", lr, beta1, beta2, eps)

    def apply(self, params: list[Tensor], grads: list[Tensor]) -> list[Tensor]:
        """One update step; returns new parameter tensors."""
        if len(params) != len(grads):
            raise ValueError("params and grads length mismatch")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if self.kind == "sgd":
            self.step_count += 1
            return [Tensor(p.array - self.lr * g.array) for p, g in zip(params, grads)]
        if self._moments is None:
            self._moments = [
                (np.zeros(p.shape), np.zeros(p.shape)) for p in params
            ]
        if len(self._moments) != len(params):
            raise ValueError("parameter list size changed between steps")
        self.step_count += 1
        t = self.step_count
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            m, v = self._moments[i]
            m = self.beta1 * m + (1.0 - self.beta1) * g.array
            v = self.beta2 * v + (1.0 - self.beta2) * g.array * g.array
            self._moments[i] = (m, v)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            out.append(Tensor(p.array - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)))
        return out


def step(opt: Optimizer, graph: Graph, params: list[int], grads: dict[int, Tensor]) -> list[Tensor]:
    """Apply one optimizer step to parameter nodes given a gradient map."""
    missing = [p for p in params if p not in grads]
    if missing:
        raise KeyError(f"missing gradient for parameter node(s) {missing}")
    return opt.apply([graph.value(p) for p in params], [grads[p] for p in params])
