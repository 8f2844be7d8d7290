"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

A :class:`Graph` records every operation applied to its :class:`Var` handles.
``backward`` walks the record in reverse, and ``grad_check`` replays the
forward pass with a perturbed parameter to compare against central
differences.

Each primitive is a forward/backward pair registered in :data:`PRIMITIVES`.
Backward rules are looked up at backward time, so the registry can be
patched (the gradcheck harness uses that to verify it catches a bad rule).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

CLAMP = 1e-12


class ShapeError(ValueError):
    pass


@dataclass
class Primitive:
    forward: Callable
    backward: Callable


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name):
    def register(fwd):
        def attach(bwd):
            PRIMITIVES[name] = Primitive(fwd, bwd)
            return bwd
        fwd.backward = attach
        return fwd
    return register


def _unbroadcast(adj, shape):
    if adj.shape == shape:
        return adj
    while adj.ndim > len(shape):
        adj = adj.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and adj.shape[axis] != 1:
            adj = adj.sum(axis=axis, keepdims=True)
    return adj


def _broadcast_check(tag, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{tag}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ---------------------------------------------------

@primitive("add")
def _add_fwd(a, b):
    _broadcast_check("add", a, b)
    return a + b


@_add_fwd.backward
def _add_bwd(adj, ins, out):
    a, b = ins
    return [_unbroadcast(adj, a.shape), _unbroadcast(adj, b.shape)]


@primitive("sub")
def _sub_fwd(a, b):
    _broadcast_check("sub", a, b)
    return a - b


@_sub_fwd.backward
def _sub_bwd(adj, ins, out):
    a, b = ins
    return [_unbroadcast(adj, a.shape), _unbroadcast(-adj, b.shape)]


@primitive("mul")
def _mul_fwd(a, b):
    _broadcast_check("mul", a, b)
    return a * b


@_mul_fwd.backward
def _mul_bwd(adj, ins, out):
    a, b = ins
    return [_unbroadcast(adj * b, a.shape), _unbroadcast(adj * a, b.shape)]


@primitive("div")
def _div_fwd(a, b):
    _broadcast_check("div", a, b)
    return a / np.maximum(b, CLAMP)


@_div_fwd.backward
def _div_bwd(adj, ins, out):
    a, b = ins
    safe = np.maximum(b, CLAMP)
    db = np.where(b > CLAMP, -adj * a / (safe * safe), 0.0)
    return [_unbroadcast(adj / safe, a.shape), _unbroadcast(db, b.shape)]


@primitive("neg")
def _neg_fwd(a):
    return -a


@_neg_fwd.backward
def _neg_bwd(adj, ins, out):
    return [-adj]


# -- linear algebra -------------------------------------------------------------

@primitive("matmul")
def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


@_matmul_fwd.backward
def _matmul_bwd(adj, ins, out):
    a, b = ins
    return [adj @ b.T, a.T @ adj]


# -- nonlinearities -------------------------------------------------------------

@primitive("relu")
def _relu_fwd(x):
    return np.maximum(x, 0.0)


@_relu_fwd.backward
def _relu_bwd(adj, ins, out):
    return [adj * (ins[0] > 0)]


@primitive("sigmoid")
def _sigmoid_fwd(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@_sigmoid_fwd.backward
def _sigmoid_bwd(adj, ins, out):
    return [adj * out * (1.0 - out)]


@primitive("log")
def _log_fwd(x):
    return np.log(np.maximum(x, CLAMP))


@_log_fwd.backward
def _log_bwd(adj, ins, out):
    x = ins[0]
    return [np.where(x > CLAMP, adj / np.maximum(x, CLAMP), 0.0)]


@primitive("exp")
def _exp_fwd(x):
    return np.exp(x)


@_exp_fwd.backward
def _exp_bwd(adj, ins, out):
    return [adj * out]


@primitive("softmax_rows")
def _softmax_fwd(x):
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows: expected a matrix, got shape {x.shape}")
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


@_softmax_fwd.backward
def _softmax_bwd(adj, ins, out):
    inner = (adj * out).sum(axis=1, keepdims=True)
    return [out * (adj - inner)]


@primitive("clip")
def _clip_fwd(x, lo, hi):
    return np.clip(x, lo, hi)


@_clip_fwd.backward
def _clip_bwd(adj, ins, out, lo, hi):
    x = ins[0]
    return [adj * ((x >= lo) & (x <= hi))]


@primitive("clamp_min")
def _clamp_min_fwd(x, lo):
    return np.maximum(x, lo)


@_clamp_min_fwd.backward
def _clamp_min_bwd(adj, ins, out, lo):
    return [adj * (ins[0] > lo)]


# -- reductions and reshaping ---------------------------------------------------

@primitive("maxpool_cols")
def _maxpool_fwd(x):
    if x.ndim != 2:
        raise ShapeError(f"maxpool_cols: expected a matrix, got shape {x.shape}")
    return x.max(axis=0, keepdims=True)


@_maxpool_fwd.backward
def _maxpool_bwd(adj, ins, out):
    x = ins[0]
    # adjoint routed to the first row attaining the max
    arg = x.argmax(axis=0)
    dx = np.zeros_like(x)
    dx[arg, np.arange(x.shape[1])] = adj[0]
    return [dx]


@primitive("row_norm")
def _row_norm_fwd(x, eps):
    if x.ndim != 2:
        raise ShapeError(f"row_norm: expected a matrix, got shape {x.shape}")
    return np.maximum(np.sqrt((x * x).sum(axis=1, keepdims=True)), eps)


@_row_norm_fwd.backward
def _row_norm_bwd(adj, ins, out, eps):
    x = ins[0]
    live = out > eps
    return [np.where(live, adj * x / out, 0.0)]


@primitive("sum")
def _sum_fwd(x, axis):
    if axis is None:
        return np.asarray(x.sum())
    return x.sum(axis=axis, keepdims=True)


@_sum_fwd.backward
def _sum_bwd(adj, ins, out, axis):
    return [np.broadcast_to(adj, ins[0].shape).copy()]


@primitive("mean")
def _mean_fwd(x):
    return np.asarray(x.mean())


@_mean_fwd.backward
def _mean_bwd(adj, ins, out):
    x = ins[0]
    return [np.full(x.shape, adj / x.size)]


@primitive("concat_cols")
def _concat_fwd(*xs):
    rows = {x.shape[0] for x in xs}
    if len(rows) != 1 or any(x.ndim != 2 for x in xs):
        raise ShapeError("concat_cols: incompatible shapes " + " and ".join(str(x.shape) for x in xs))
    return np.concatenate(xs, axis=1)


@_concat_fwd.backward
def _concat_bwd(adj, ins, out):
    edges = np.cumsum([x.shape[1] for x in ins])[:-1]
    return np.split(adj, edges, axis=1)


@primitive("gather_rows")
def _gather_fwd(x, index):
    return x[index]


@_gather_fwd.backward
def _gather_bwd(adj, ins, out, index):
    dx = np.zeros_like(ins[0])
    np.add.at(dx, index, adj)
    return [dx]


@primitive("broadcast_rows")
def _broadcast_rows_fwd(x, n):
    if x.ndim != 2 or x.shape[0] != 1:
        raise ShapeError(f"broadcast_rows: expected a 1xd row, got shape {x.shape}")
    return np.repeat(x, n, axis=0)


@_broadcast_rows_fwd.backward
def _broadcast_rows_bwd(adj, ins, out, n):
    return [adj.sum(axis=0, keepdims=True)]


@primitive("stop_gradient")
def _stop_fwd(x):
    return x.copy()


@_stop_fwd.backward
def _stop_bwd(adj, ins, out):
    return [np.zeros_like(ins[0])]


# -- graph ---------------------------------------------------------------------

@dataclass
class Node:
    tag: str
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    requires_grad: bool


class Var:
    """Handle to one node of a :class:`Graph`."""

    __slots__ = ("graph", "id")
    __array_ufunc__ = None  # keep numpy from hijacking reflected operators

    def __init__(self, graph: Graph, node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other):
        return other if isinstance(other, Var) else self.graph.const(other)

    def __add__(self, other):
        return self.graph.apply("add", self, self._lift(other))

    def __radd__(self, other):
        return self.graph.apply("add", self._lift(other), self)

    def __sub__(self, other):
        return self.graph.apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.apply("sub", self._lift(other), self)

    def __mul__(self, other):
        return self.graph.apply("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.graph.apply("mul", self._lift(other), self)

    def __truediv__(self, other):
        return self.graph.apply("div", self, self._lift(other))

    def __matmul__(self, other):
        return self.graph.apply("matmul", self, self._lift(other))

    def __neg__(self):
        return self.graph.apply("neg", self)

    def __repr__(self):
        node = self.graph.nodes[self.id]
        return f"Var(id={self.id}, tag={node.tag}, shape={node.value.shape})"


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}
        self.stop_flags: set[int] = set()

    def _push(self, tag, inputs, attrs, value, requires_grad):
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(Node(tag, tuple(inputs), attrs, value, requires_grad))
        return Var(self, len(self.nodes) - 1)

    def param(self, value, name: str) -> Var:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        var = self._push("param", (), {}, np.array(value, dtype=np.float64), True)
        self.params[name] = var.id
        return var

    def const(self, value) -> Var:
        return self._push("const", (), {}, np.array(value, dtype=np.float64), False)

    def apply(self, tag: str, *inputs: Var, **attrs) -> Var:
        for v in inputs:
            if v.graph is not self:
                raise ValueError(f"{tag}: input belongs to another graph")
        values = [self.nodes[v.id].value for v in inputs]
        out = PRIMITIVES[tag].forward(*values, **attrs)
        grad = tag != "stop_gradient" and any(self.nodes[v.id].requires_grad for v in inputs)
        var = self._push(tag, [v.id for v in inputs], attrs, out, grad)
        if tag == "stop_gradient":
            self.stop_flags.add(var.id)
        return var

    def param_var(self, name: str) -> Var:
        return Var(self, self.params[name])

    def replay(self, overrides: dict[int, np.ndarray]) -> list[np.ndarray]:
        """Re-run the recorded forward pass with some leaf values replaced.

        Stop-gradient outputs keep their recorded values: the operand is a
        constant by definition, so a perturbation must not leak through.
        Index attributes (gathers, selections) are likewise frozen.
        """
        values: list[np.ndarray] = []
        for i, node in enumerate(self.nodes):
            if i in overrides:
                values.append(overrides[i])
            elif node.tag in ("param", "const") or i in self.stop_flags:
                values.append(node.value)
            else:
                ins = [values[j] for j in node.inputs]
                values.append(np.asarray(PRIMITIVES[node.tag].forward(*ins, **node.attrs), dtype=np.float64))
        return values


# -- functional API --------------------------------------------------------------

def relu(x: Var) -> Var:
    return x.graph.apply("relu", x)


def sigmoid(x: Var) -> Var:
    return x.graph.apply("sigmoid", x)


def log(x: Var) -> Var:
    return x.graph.apply("log", x)


def exp(x: Var) -> Var:
    return x.graph.apply("exp", x)


def softmax_rows(x: Var) -> Var:
    return x.graph.apply("softmax_rows", x)


def maxpool_cols(x: Var) -> Var:
    return x.graph.apply("maxpool_cols", x)


def row_norm(x: Var, eps: float = CLAMP) -> Var:
    return x.graph.apply("row_norm", x, eps=eps)


def clip(x: Var, lo: float, hi: float) -> Var:
    return x.graph.apply("clip", x, lo=lo, hi=hi)


def clamp_min(x: Var, lo: float) -> Var:
    return x.graph.apply("clamp_min", x, lo=lo)


def sum(x: Var, axis: int | None = None) -> Var:  # noqa: A001
    return x.graph.apply("sum", x, axis=axis)


def mean(x: Var) -> Var:
    return x.graph.apply("mean", x)


def concat_cols(xs: Sequence[Var]) -> Var:
    return xs[0].graph.apply("concat_cols", *xs)


def gather_rows(x: Var, index) -> Var:
    return x.graph.apply("gather_rows", x, index=np.asarray(index, dtype=np.intp))


def broadcast_rows(x: Var, n: int) -> Var:
    return x.graph.apply("broadcast_rows", x, n=int(n))


def stop_gradient(x: Var) -> Var:
    return x.graph.apply("stop_gradient", x)


def primitives() -> set[str]:
    return set(PRIMITIVES)


# -- differentiation -------------------------------------------------------------

def backward(graph: Graph, loss: Var) -> dict[str, np.ndarray]:
    """Adjoints of ``loss`` with respect to every parameter, keyed by name."""
    if loss.value.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    adjoints: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for i in range(loss.id, -1, -1):
        adj = adjoints.pop(i, None) if graph.nodes[i].tag != "param" else adjoints.get(i)
        node = graph.nodes[i]
        if adj is None or not node.inputs or i in graph.stop_flags or not node.requires_grad:
            continue
        ins = [graph.nodes[j].value for j in node.inputs]
        grads = PRIMITIVES[node.tag].backward(adj, ins, node.value, **node.attrs)
        for j, g in zip(node.inputs, grads):
            if not graph.nodes[j].requires_grad:
                continue
            if j in adjoints:
                adjoints[j] = adjoints[j] + g
            else:
                adjoints[j] = np.asarray(g, dtype=np.float64)
    return {
        name: adjoints.get(pid, np.zeros_like(graph.nodes[pid].value))
        for name, pid in graph.params.items()
    }


def numeric_grad(graph: Graph, loss: Var, name: str, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss`` w.r.t. parameter ``name``."""
    pid = graph.params[name]
    base = graph.nodes[pid].value
    out = np.zeros_like(base)
    flat = out.reshape(-1)
    for k in range(base.size):
        plus = base.copy().reshape(-1)
        minus = base.copy().reshape(-1)
        plus[k] += h
        minus[k] -= h
        fp = graph.replay({pid: plus.reshape(base.shape)})[loss.id]
        fm = graph.replay({pid: minus.reshape(base.shape)})[loss.id]
        flat[k] = (float(fp) - float(fm)) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(graph: Graph, loss: Var, name: str, h: float = 1e-5,
               analytic: dict[str, np.ndarray] | None = None) -> float:
    """Max relative error between backward() and central differences."""
    if h <= 0:
        raise ValueError("step h must be positive")
    if analytic is None:
        analytic = backward(graph, loss)
    return relative_error(analytic[name], numeric_grad(graph, loss, name, h))
