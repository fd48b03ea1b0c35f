"""Dense-matrix reverse-mode automatic differentiation.

Values are 2-D float64 numpy arrays ("matrices" throughout); a Node wraps a
value together with the references and vector-Jacobian products needed to run
the chain rule backwards. Graphs are built eagerly by the free functions in
this module (matmul, add, softmax_rows, ...) and differentiated by
``backward``.

Rules the rest of the package relies on:

* double precision everywhere; node values are C-contiguous float64;
* fixed traversal order (parents left to right, reverse topological order in
  backward) so repeated evaluations are bit-identical;
* gradients accumulate across fan-out and must be reset explicitly
  (``reset_grads``) before a graph that shares leaves is differentiated
  again -- ``backward`` refuses to run over stale gradients;
* subgraphs that cannot reach a trainable leaf are pruned at construction,
  so inference-only forwards carry no backward closures.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import backend
from .errors import ContractError, ShapeError

Matrix = np.ndarray

__all__ = [
    "Matrix",
    "Node",
    "leaf",
    "constant",
    "as_node",
    "matmul",
    "add",
    "scale",
    "transpose",
    "concat_cols",
    "concat_rows",
    "slice_cols",
    "slice_rows",
    "exp_elem",
    "sum_all",
    "mse",
    "softmax_rows",
    "ones",
    "backward",
    "reset_grads",
    "finite_diff_grad",
]


def _as_matrix(value) -> Matrix:
    m = np.ascontiguousarray(value, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"matrices must be 2-D, got ndim={m.ndim} shape={m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"matrices must be non-empty, got shape={m.shape}")
    return m


class Node:
    """One vertex of the computation graph.

    ``grad`` is None until ``backward`` runs; parents/vjps are dropped at
    construction when no ancestor requires gradients.
    """

    __slots__ = ("value", "requires_grad", "op", "parents", "grad", "_vjps")

    def __init__(self, value, *, requires_grad: bool = False, op: str = "leaf",
                 parents: Sequence["Node"] = (), vjps: Sequence[Callable] = ()):
        self.value = _as_matrix(value)
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = tuple(parents)
        self._vjps = tuple(vjps)
        self.grad: Matrix | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.value.shape}, requires_grad={self.requires_grad})"


def leaf(value, requires_grad: bool = False) -> Node:
    return Node(value, requires_grad=requires_grad, op="leaf")


def constant(value) -> Node:
    return Node(value, requires_grad=False, op="const")


def as_node(value) -> Node:
    return value if isinstance(value, Node) else constant(value)


def ones(rows: int, cols: int) -> Node:
    return constant(np.ones((rows, cols)))


def _make(op: str, value, parents: Sequence[Node], vjps: Sequence[Callable]) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, requires_grad=True, op=op, parents=parents, vjps=vjps)
    return Node(value, requires_grad=False, op=op)


def _require_same_shape(op: str, a: Node, b: Node) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def matmul(a: Node | Matrix, b: Node | Matrix) -> Node:
    """Matrix product; backward: dA = g @ B^T, dB = A^T @ g."""
    a, b = as_node(a), as_node(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: shapes {a.value.shape} and {b.value.shape} do not chain")
    av, bv = a.value, b.value
    return _make(
        "matmul", av @ bv, (a, b),
        (lambda g: g @ bv.T, lambda g: av.T @ g),
    )


def add(a: Node | Matrix, b: Node | Matrix) -> Node:
    a, b = as_node(a), as_node(b)
    _require_same_shape("add", a, b)
    return _make("add", a.value + b.value, (a, b), (lambda g: g, lambda g: g))


def scale(a: Node | Matrix, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    return _make("scale", c * a.value, (a,), (lambda g: c * g,))


def transpose(a: Node | Matrix) -> Node:
    a = as_node(a)
    return _make("transpose", a.value.T, (a,), (lambda g: g.T,))


def concat_cols(parts: Sequence[Node | Matrix]) -> Node:
    parts = [as_node(p) for p in parts]
    if not parts:
        raise ShapeError("concat_cols: need at least one matrix")
    rows = parts[0].value.shape[0]
    for p in parts:
        if p.value.shape[0] != rows:
            raise ShapeError(
                f"concat_cols: row counts differ ({rows} vs {p.value.shape[0]})"
            )
    offsets = np.cumsum([0] + [p.value.shape[1] for p in parts])
    vjps = [
        (lambda lo, hi: lambda g: g[:, lo:hi])(offsets[i], offsets[i + 1])
        for i in range(len(parts))
    ]
    return _make("concat_cols", np.hstack([p.value for p in parts]), parts, vjps)


def concat_rows(parts: Sequence[Node | Matrix]) -> Node:
    parts = [as_node(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows: need at least one matrix")
    cols = parts[0].value.shape[1]
    for p in parts:
        if p.value.shape[1] != cols:
            raise ShapeError(
                f"concat_rows: column counts differ ({cols} vs {p.value.shape[1]})"
            )
    offsets = np.cumsum([0] + [p.value.shape[0] for p in parts])
    vjps = [
        (lambda lo, hi: lambda g: g[lo:hi, :])(offsets[i], offsets[i + 1])
        for i in range(len(parts))
    ]
    return _make("concat_rows", np.vstack([p.value for p in parts]), parts, vjps)


def slice_cols(a: Node | Matrix, start: int, stop: int) -> Node:
    a = as_node(a)
    cols = a.value.shape[1]
    if not (0 <= start < stop <= cols):
        raise IndexError(f"slice_cols: [{start}:{stop}] out of range for {cols} columns")

    def vjp(g, _shape=a.value.shape, _start=start, _stop=stop):
        out = np.zeros(_shape)
        out[:, _start:_stop] = g
        return out

    return _make("slice_cols", a.value[:, start:stop], (a,), (vjp,))


def slice_rows(a: Node | Matrix, start: int, stop: int) -> Node:
    a = as_node(a)
    rows = a.value.shape[0]
    if not (0 <= start < stop <= rows):
        raise IndexError(f"slice_rows: [{start}:{stop}] out of range for {rows} rows")

    def vjp(g, _shape=a.value.shape, _start=start, _stop=stop):
        out = np.zeros(_shape)
        out[_start:_stop, :] = g
        return out

    return _make("slice_rows", a.value[start:stop, :], (a,), (vjp,))


def exp_elem(a: Node | Matrix) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make("exp_elem", out, (a,), (lambda g: g * out,))


def sum_all(a: Node | Matrix) -> Node:
    a = as_node(a)
    shape = a.value.shape
    return _make(
        "sum_all", [[a.value.sum()]], (a,),
        (lambda g: np.full(shape, g[0, 0]),)
    )


def mse(a: Node | Matrix, b: Node | Matrix) -> Node:
    """Mean squared error over all entries, as a 1x1 node."""
    a, b = as_node(a), as_node(b)
    _require_same_shape("mse", a, b)
    diff = a.value - b.value
    count = diff.size
    return _make(
        "mse", [[(diff * diff).sum() / count]], (a, b),
        (
            lambda g: (2.0 * g[0, 0] / count) * diff,
            lambda g: (-2.0 * g[0, 0] / count) * diff,
        ),
    )


def softmax_rows(a: Node | Matrix) -> Node:
    """Row-wise softmax, computed with per-row max subtraction."""
    a = as_node(a)
    out = backend.softmax_rows(a.value)
    return _make(
        "softmax_rows", out, (a,),
        (lambda g: backend.softmax_rows_vjp(out, g),),
    )


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
    # Iterative post-order DFS, parents visited left to right.
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
        for parent in reversed(node.parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> dict[Node, Matrix]:
    """Accumulate gradients of a scalar loss into every requires-grad ancestor.

    Returns a map from node to its gradient. Raises ContractError if the loss
    is not 1x1 or if any reachable node still carries a gradient from an
    earlier pass (call reset_grads first).
    """
    if loss.value.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 loss, got shape {loss.value.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    for node in order:
        if node.grad is not None:
            raise ContractError(
                "stale gradients present; call reset_grads before reusing leaves"
            )
    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        g = node.grad
        for parent, vjp in zip(node.parents, node._vjps):
            if not parent.requires_grad:
                continue
            contribution = vjp(g)
            if parent.grad is None:
                parent.grad = contribution
            else:
                parent.grad = parent.grad + contribution
    return {node: node.grad for node in order}


def reset_grads(nodes: Iterable[Node]) -> None:
    for node in nodes:
        node.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[Matrix], float], at: Matrix, step: float = 1e-5) -> Matrix:
    """Central-difference gradient estimate of a scalar function of a matrix."""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    at = _as_matrix(at)
    out = np.zeros_like(at)
    probe = at.copy()
    for i in range(at.shape[0]):
        for j in range(at.shape[1]):
            orig = probe[i, j]
            probe[i, j] = orig + step
            f_plus = float(f(probe))
            probe[i, j] = orig - step
            f_minus = float(f(probe))
            probe[i, j] = orig
            out[i, j] = (f_plus - f_minus) / (2.0 * step)
    return out
