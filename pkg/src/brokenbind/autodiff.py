"""Reverse-accumulation gradients over 2-D float64 arrays.

A minimal graph engine carrying exactly the primitive set the training
objective needs: affine pieces (matmul, add, transpose, scale), the two
nonlinearities, row normalization, log-sum-exp over rows, diagonal
extraction, squaring and full summation. Every op builds a Var node
holding the forward value and its parents; backward() walks the graph
in reverse topological order.

Two leaf kinds exist. "param" leaves carry a name and collect gradient;
"const" leaves never receive gradient, which is how frozen
pseudo-inverses are excluded from backpropagation by construction
rather than by masking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import NumericalFailure, ensure_matrix


class DegenerateEmbeddingError(NumericalFailure):
    """A row collapsed to (numerically) zero before unit normalization."""


class Var:
    """One node of the computation graph: value plus provenance."""

    __slots__ = ("value", "op", "inputs", "extra", "name")

    def __init__(self, value, op, inputs=(), extra=None, name=None):
        self.value = value
        self.op = op
        self.inputs = inputs
        self.extra = extra
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __float__(self):
        if self.value.size != 1:
            raise ValueError(f"not a scalar node, shape {self.value.shape}")
        return float(self.value.reshape(()))

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Var({self.op}, shape={self.value.shape}{tag})"


def const(value) -> Var:
    """Wrap an array as a gradient-less leaf (stop-gradient)."""
    return Var(ensure_matrix(value, "const"), "const")


def param(value, name: str) -> Var:
    """Wrap an array as a named trainable leaf."""
    if not name:
        raise ValueError("param requires a nonempty name")
    return Var(ensure_matrix(value, name), "param", name=name)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else const(x)


def value_of(x) -> np.ndarray:
    """Forward value of a Var, or the array itself."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# primitive registry
#
# Forward functions are the single source of truth for both graph
# construction and ComputationRecord.replay(), so a replay is bitwise
# identical to the recorded pass.

_FORWARD = {}
_VJP = {}


def _unbroadcast(g, shape):
    # collapse a gradient back to the shape of a broadcast operand
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _fwd_add(vals, extra):
    return vals[0] + vals[1]


def _vjp_add(g, vals, out, extra):
    return _unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)


def _fwd_sub(vals, extra):
    return vals[0] - vals[1]


def _vjp_sub(g, vals, out, extra):
    return _unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape)


def _fwd_scale(vals, extra):
    return vals[0] * extra


def _vjp_scale(g, vals, out, extra):
    return (g * extra,)


def _fwd_matmul(vals, extra):
    a, b = vals
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul mismatch: {a.shape} @ {b.shape}")
    return a @ b


def _vjp_matmul(g, vals, out, extra):
    a, b = vals
    return g @ b.T, a.T @ g


def _fwd_transpose(vals, extra):
    return vals[0].T.copy()


def _vjp_transpose(g, vals, out, extra):
    return (g.T,)


def _fwd_tanh(vals, extra):
    return np.tanh(vals[0])


def _vjp_tanh(g, vals, out, extra):
    return (g * (1.0 - out * out),)


def _fwd_relu(vals, extra):
    return np.maximum(vals[0], 0.0)


def _vjp_relu(g, vals, out, extra):
    return (g * (vals[0] > 0.0),)


def _fwd_square(vals, extra):
    return vals[0] * vals[0]


def _vjp_square(g, vals, out, extra):
    return (2.0 * vals[0] * g,)


def _fwd_unit_rows(vals, extra):
    a = vals[0]
    norms = np.sqrt((a * a).sum(axis=1, keepdims=True))
    if (norms < 1e-12).any():
        bad = int(np.argmin(norms))
        raise DegenerateEmbeddingError(
            f"row {bad} has norm {float(norms[bad, 0]):.3e} before normalization"
        )
    return a / norms


def _vjp_unit_rows(g, vals, out, extra):
    a = vals[0]
    norms = np.sqrt((a * a).sum(axis=1, keepdims=True))
    return ((g - (g * out).sum(axis=1, keepdims=True) * out) / norms,)


def _fwd_logsumexp_rows(vals, extra):
    a = vals[0]
    m = a.max(axis=1, keepdims=True)
    return m + np.log(np.exp(a - m).sum(axis=1, keepdims=True))


def _vjp_logsumexp_rows(g, vals, out, extra):
    # d lse / d a_ij = softmax over the row
    return (g * np.exp(vals[0] - out),)


def _fwd_diag_part(vals, extra):
    a = vals[0]
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"diag_part needs a square matrix, got {a.shape}")
    return np.diagonal(a).reshape(-1, 1).copy()


def _vjp_diag_part(g, vals, out, extra):
    z = np.zeros_like(vals[0])
    n = z.shape[0]
    z[np.arange(n), np.arange(n)] = g[:, 0]
    return (z,)


def _fwd_sum_all(vals, extra):
    return vals[0].sum().reshape(1, 1)


def _vjp_sum_all(g, vals, out, extra):
    return (g * np.ones_like(vals[0]),)


for _name in (
    "add", "sub", "scale", "matmul", "transpose", "tanh", "relu",
    "square", "unit_rows", "logsumexp_rows", "diag_part", "sum_all",
):
    _FORWARD[_name] = globals()[f"_fwd_{_name}"]
    _VJP[_name] = globals()[f"_vjp_{_name}"]


def _apply(op, inputs, extra=None):
    vals = [v.value for v in inputs]
    return Var(_FORWARD[op](vals, extra), op, tuple(inputs), extra)


# ---------------------------------------------------------------------------
# public op builders


def add(a, b) -> Var:
    return _apply("add", (as_var(a), as_var(b)))


def sub(a, b) -> Var:
    return _apply("sub", (as_var(a), as_var(b)))


def scale(a, c) -> Var:
    """Multiply by a plain (non-differentiated) float."""
    return _apply("scale", (as_var(a),), float(c))


def matmul(a, b) -> Var:
    return _apply("matmul", (as_var(a), as_var(b)))


def transpose(a) -> Var:
    return _apply("transpose", (as_var(a),))


def tanh(a) -> Var:
    return _apply("tanh", (as_var(a),))


def relu(a) -> Var:
    return _apply("relu", (as_var(a),))


def square(a) -> Var:
    return _apply("square", (as_var(a),))


def unit_rows(a) -> Var:
    """Normalize each row to unit Euclidean norm."""
    return _apply("unit_rows", (as_var(a),))


def logsumexp_rows(a) -> Var:
    """Row-wise max-shifted log(sum(exp)); output shape (rows, 1)."""
    return _apply("logsumexp_rows", (as_var(a),))


def diag_part(a) -> Var:
    """Main diagonal of a square matrix as a (rows, 1) column."""
    return _apply("diag_part", (as_var(a),))


def sum_all(a) -> Var:
    """Sum every entry; output shape (1, 1)."""
    return _apply("sum_all", (as_var(a),))


# ---------------------------------------------------------------------------
# reverse pass


def topo_order(root: Var) -> list:
    """Ancestors of root in topological order (root last), iteratively."""
    order = []
    seen = set()
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
        for child in node.inputs:
            if id(child) not in seen:
                stack.append((child, False))
    return order


def backward(loss: Var) -> dict:
    """Gradients of a scalar loss w.r.t. every named param leaf.

    Returns {param name: gradient array}. Gradient never flows into
    const leaves. A non-finite contribution aborts with an error naming
    the primitive that produced it.
    """
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    if not np.isfinite(loss.value).all():
        raise NumericalFailure("loss value is not finite")

    order = topo_order(loss)
    grads = {id(loss): np.ones_like(loss.value)}
    param_grads = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op == "param":
            prev = param_grads.get(node.name)
            param_grads[node.name] = g if prev is None else prev + g
            continue
        if node.op == "const":
            continue
        vjps = _VJP[node.op](g, [v.value for v in node.inputs], node.value, node.extra)
        for child, cg in zip(node.inputs, vjps):
            if child.op == "const":
                continue
            if not np.isfinite(cg).all():
                raise NumericalFailure(
                    f"non-finite gradient out of primitive '{node.op}'"
                )
            prev = grads.get(id(child))
            grads[id(child)] = cg if prev is None else prev + cg
    return param_grads


@dataclass
class ComputationRecord:
    """Topologically ordered snapshot of one forward pass (loss last)."""

    nodes: list

    @property
    def loss(self) -> Var:
        return self.nodes[-1]

    def replay(self) -> np.ndarray:
        """Recompute the loss value from leaf values.

        Uses the same forward functions as graph construction, so the
        result is bitwise identical to the recorded value.
        """
        vals = {}
        for node in self.nodes:
            if node.op in ("const", "param"):
                vals[id(node)] = node.value
            else:
                vals[id(node)] = _FORWARD[node.op](
                    [vals[id(c)] for c in node.inputs], node.extra
                )
        return vals[id(self.nodes[-1])]


def record(loss: Var) -> ComputationRecord:
    return ComputationRecord(topo_order(loss))
