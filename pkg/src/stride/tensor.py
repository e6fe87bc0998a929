"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything trainable in this package is expressed through the ops in this
module. Tensors hold row-major float64 numpy arrays; ops build an implicit
computation graph (parent references plus a backward closure per node), and
``backward`` replays that graph in reverse topological order. Gradients
accumulate additively on leaf tensors until ``zero_grad`` is called.

Design constraints, fixed deliberately:

* float64 only — this is a desk-scale library, precision beats speed;
* no views or strides — every op materializes its output;
* deterministic accumulation order — the topological order depends only on
  graph construction order, so repeated backward passes are bit-identical.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationRecord",
    "ShapeError",
    "GraphError",
    "NumericalDomainError",
    "no_grad",
    "backward",
    "finite_difference_check",
    "add",
    "sub",
    "mul",
    "matmul",
    "vec_matmul",
    "transpose",
    "tanh",
    "softmax_rows",
    "log_softmax_rows",
    "mean_over_rows",
    "mean_all",
    "sum_all",
    "layer_norm_rows",
    "lookup_rows",
    "concat_rows",
    "concat_cols",
    "stack_rows",
    "slice_rows",
    "slice_cols",
    "replace_rows",
    "take_row",
    "pick_entries",
    "maximum",
    "permute_within_rows",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op's contract."""


class GraphError(RuntimeError):
    """Raised on malformed backward requests (non-scalar loss, bad ordering)."""


class NumericalDomainError(ArithmeticError):
    """Raised when an evaluation leaves the finite floating-point domain."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording inside its block."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A dense float64 array plus optional gradient accumulator.

    ``grad`` is ``None`` until backward first touches this tensor; repeated
    backward passes add into it. Only leaf tensors (no parents) retain
    gradients across a backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op: str = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make_node(data: np.ndarray, op: str, parents: Sequence[Tensor], bwd: Callable) -> Tensor:
    out = Tensor(data)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if needs:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bwd
        out._op = op
    return out


# ---------------------------------------------------------------------------
# backward machinery
# ---------------------------------------------------------------------------


class ComputationRecord:
    """Topologically ordered op nodes reachable from a root tensor.

    The order guarantees every node's inputs precede it, so a single reverse
    sweep visits each node exactly once with its output gradient complete.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        # Iterative DFS; graphs from long training batches exceed the
        # default recursion limit.
        stack: list[tuple[Tensor, int]] = [(root, 0)]
        while stack:
            node, child_idx = stack.pop()
            if child_idx == 0:
                if id(node) in seen:
                    continue
                seen.add(id(node))
            if child_idx < len(node._parents):
                stack.append((node, child_idx + 1))
                parent = node._parents[child_idx]
                if id(parent) not in seen:
                    stack.append((parent, 0))
            else:
                order.append(node)
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf below loss.

    ``loss`` must be a scalar (a single element). Intermediate gradients live
    in a per-pass table and are discarded; only leaves keep ``grad``, which
    accumulates additively across calls until explicitly reset.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    record = ComputationRecord(loss)

    # Count consumers so the reverse sweep can verify ordering: a node may
    # only be processed once all ops consuming it have contributed gradient.
    pending: dict[int, int] = {}
    for node in record.nodes:
        for p in node._parents:
            if p.requires_grad:
                pending[id(p)] = pending.get(id(p), 0) + 1

    table: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def accumulate(t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in table:
            table[key] = table[key] + g
        else:
            table[key] = g
        pending[key] -= 1

    for node in reversed(record.nodes):
        if not node.requires_grad:
            continue
        if pending.get(id(node), 0) != 0:
            raise GraphError(f"node {node._op} visited before all of its consumers")
        g = table.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            node._backward(g, accumulate)
        else:
            # Leaf: fold the pass-local gradient into the persistent slot.
            node.grad = g if node.grad is None else node.grad + g


# ---------------------------------------------------------------------------
# elementwise and broadcast arithmetic
# ---------------------------------------------------------------------------


def _broadcast_ok(a: Tensor, b: Tensor) -> str:
    """Classify the supported add/sub/mul operand pairing."""
    if a.shape == b.shape:
        return "same"
    if b.data.ndim == 0 or b.data.size == 1:
        return "scalar_b"
    if a.data.ndim == 0 or a.data.size == 1:
        return "scalar_a"
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return "row_b"
    if b.data.ndim == 2 and a.data.ndim == 1 and b.shape[1] == a.shape[0]:
        return "row_a"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor, kind: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "scalar":
        return np.asarray(g.sum()).reshape(t.data.shape)
    if kind == "row":
        return g.sum(axis=0)
    raise AssertionError(kind)


def _binary(op_name, a, b, fwd, da, db):
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _broadcast_ok(a, b)
    kind_a = {"same": "same", "scalar_b": "same", "row_b": "same",
              "scalar_a": "scalar", "row_a": "row"}[kind]
    kind_b = {"same": "same", "scalar_a": "same", "row_a": "same",
              "scalar_b": "scalar", "row_b": "row"}[kind]

    out_data = fwd(a.data, b.data)

    def bwd(g, accumulate):
        if a.requires_grad:
            accumulate(a, _reduce_to(da(g, a.data, b.data), a, kind_a))
        if b.requires_grad:
            accumulate(b, _reduce_to(db(g, a.data, b.data), b, kind_b))

    return _make_node(out_data, op_name, (a, b), bwd)


def add(a, b) -> Tensor:
    """Elementwise sum; also broadcasts a row vector or scalar onto a matrix."""
    return _binary("add", a, b,
                   lambda x, y: x + y,
                   lambda g, x, y: g,
                   lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b,
                   lambda x, y: x - y,
                   lambda g, x, y: g,
                   lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    """Elementwise product; broadcasts a row vector or scalar like add."""
    return _binary("mul", a, b,
                   lambda x, y: x * y,
                   lambda g, x, y: g * y,
                   lambda g, x, y: g * x)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route gradient to the first operand."""
    return _binary("maximum", a, b,
                   lambda x, y: np.maximum(x, y),
                   lambda g, x, y: g * (x >= y),
                   lambda g, x, y: g * (x < y))


# ---------------------------------------------------------------------------
# matrix ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")

    def bwd(g, accumulate):
        if a.requires_grad:
            accumulate(a, g @ b.data.T)
        if b.requires_grad:
            accumulate(b, a.data.T @ g)

    return _make_node(a.data @ b.data, "matmul", (a, b), bwd)


def vec_matmul(v, m) -> Tensor:
    """Row vector (k,) times matrix (k, n) -> vector (n,)."""
    v, m = _as_tensor(v), _as_tensor(m)
    if v.data.ndim != 1 or m.data.ndim != 2 or v.shape[0] != m.shape[0]:
        raise ShapeError(f"vec_matmul shapes disagree: {v.shape} vs {m.shape}")

    def bwd(g, accumulate):
        if v.requires_grad:
            accumulate(v, g @ m.data.T)
        if m.requires_grad:
            accumulate(m, np.outer(v.data, g))

    return _make_node(v.data @ m.data, "vec_matmul", (v, m), bwd)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")

    def bwd(g, accumulate):
        accumulate(a, np.ascontiguousarray(g.T))

    return _make_node(np.ascontiguousarray(a.data.T), "transpose", (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities and normalizations
# ---------------------------------------------------------------------------


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def bwd(g, accumulate):
        accumulate(a, g * (1.0 - out_data * out_data))

    return _make_node(out_data, "tanh", (a,), bwd)


def softmax_rows(a) -> Tensor:
    """Row-wise softmax, stabilized by subtracting each row's max."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g, accumulate):
        dot = (g * s).sum(axis=1, keepdims=True)
        accumulate(a, s * (g - dot))

    return _make_node(s, "softmax_rows", (a,), bwd)


def log_softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows needs a matrix, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_data = shifted - logz
    s = np.exp(out_data)

    def bwd(g, accumulate):
        accumulate(a, g - s * g.sum(axis=1, keepdims=True))

    return _make_node(out_data, "log_softmax_rows", (a,), bwd)


def layer_norm_rows(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with learnable per-feature gain and bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm_rows needs a matrix, got shape {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g, accumulate):
        if gain.requires_grad:
            accumulate(gain, (g * xhat).sum(axis=0))
        if bias.requires_grad:
            accumulate(bias, g.sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=1, keepdims=True)
            m2 = (gy * xhat).mean(axis=1, keepdims=True)
            accumulate(x, inv * (gy - m1 - xhat * m2))

    return _make_node(out_data, "layer_norm", (x, gain, bias), bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def mean_over_rows(x) -> Tensor:
    """Column means of a matrix: (L, d) -> (d,). Requires L >= 1."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"mean_over_rows needs a matrix, got shape {x.shape}")
    rows = x.shape[0]
    if rows == 0:
        raise ShapeError("mean_over_rows over an empty sequence")

    def bwd(g, accumulate):
        accumulate(x, np.broadcast_to(g / rows, x.data.shape).copy())

    return _make_node(x.data.mean(axis=0), "mean_over_rows", (x,), bwd)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)

    def bwd(g, accumulate):
        accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return _make_node(np.asarray(x.data.sum()), "sum_all", (x,), bwd)


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    if n == 0:
        raise ShapeError("mean_all over an empty tensor")

    def bwd(g, accumulate):
        accumulate(x, np.broadcast_to(g / n, x.data.shape).copy())

    return _make_node(np.asarray(x.data.mean()), "mean_all", (x,), bwd)


# ---------------------------------------------------------------------------
# indexing, gathering, structural ops
# ---------------------------------------------------------------------------


def lookup_rows(table, ids) -> Tensor:
    """Gather rows of an embedding table by integer id."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"lookup_rows needs a matrix table, got shape {table.shape}")
    if idx.ndim != 1:
        raise ShapeError("lookup_rows needs a flat id sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"row id out of range for table with {table.shape[0]} rows")

    def bwd(g, accumulate):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        accumulate(table, gt)

    return _make_node(table.data[idx].copy(), "lookup_rows", (table,), bwd)


def concat_rows(parts: Sequence) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows of nothing")
    widths = {p.shape[1] for p in parts if p.data.ndim == 2}
    if len(widths) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(f"concat_rows needs matrices of equal width, got {[p.shape for p in parts]}")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, accumulate):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                accumulate(p, g[lo:hi].copy())

    return _make_node(np.concatenate([p.data for p in parts], axis=0), "concat_rows", parts, bwd)


def concat_cols(parts: Sequence) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_cols of nothing")
    heights = {p.shape[0] for p in parts if p.data.ndim == 2}
    if len(heights) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(f"concat_cols needs matrices of equal height, got {[p.shape for p in parts]}")
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, accumulate):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                accumulate(p, np.ascontiguousarray(g[:, lo:hi]))

    return _make_node(np.concatenate([p.data for p in parts], axis=1), "concat_cols", parts, bwd)


def stack_rows(vectors: Sequence) -> Tensor:
    """Stack 1-d tensors of equal length into a matrix, one per row."""
    vecs = [_as_tensor(v) for v in vectors]
    if not vecs:
        raise ShapeError("stack_rows of nothing")
    if any(v.data.ndim != 1 for v in vecs) or len({v.shape[0] for v in vecs}) != 1:
        raise ShapeError(f"stack_rows needs equal-length vectors, got {[v.shape for v in vecs]}")

    def bwd(g, accumulate):
        for i, v in enumerate(vecs):
            if v.requires_grad:
                accumulate(v, g[i].copy())

    return _make_node(np.stack([v.data for v in vecs], axis=0), "stack_rows", vecs, bwd)


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"slice_rows needs a matrix, got shape {x.shape}")
    if not (0 <= start <= stop <= x.shape[0]):
        raise ShapeError(f"row slice [{start}:{stop}] out of range for shape {x.shape}")

    def bwd(g, accumulate):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        accumulate(x, gx)

    return _make_node(x.data[start:stop].copy(), "slice_rows", (x,), bwd)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols needs a matrix, got shape {x.shape}")
    if not (0 <= start <= stop <= x.shape[1]):
        raise ShapeError(f"column slice [{start}:{stop}] out of range for shape {x.shape}")

    def bwd(g, accumulate):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        accumulate(x, gx)

    return _make_node(np.ascontiguousarray(x.data[:, start:stop]), "slice_cols", (x,), bwd)


def replace_rows(x, indices, rows) -> Tensor:
    """Copy of x with the given row indices overwritten by ``rows``.

    Gradient flows to x everywhere except the replaced rows, and to ``rows``
    at exactly those positions.
    """
    x, rows = _as_tensor(x), _as_tensor(rows)
    idx = np.asarray(indices, dtype=np.int64)
    if x.data.ndim != 2 or rows.data.ndim != 2:
        raise ShapeError(f"replace_rows needs matrices, got {x.shape} and {rows.shape}")
    if rows.shape != (idx.size, x.shape[1]):
        raise ShapeError(f"replacement shape {rows.shape} does not match {idx.size} rows of width {x.shape[1]}")
    if len(np.unique(idx)) != idx.size:
        raise ShapeError("replace_rows indices must be distinct")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"row index out of range for shape {x.shape}")
    out_data = x.data.copy()
    out_data[idx] = rows.data

    def bwd(g, accumulate):
        if x.requires_grad:
            gx = g.copy()
            gx[idx] = 0.0
            accumulate(x, gx)
        if rows.requires_grad:
            accumulate(rows, g[idx].copy())

    return _make_node(out_data, "replace_rows", (x, rows), bwd)


def take_row(x, i: int) -> Tensor:
    """Extract row i of a matrix as a vector."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"take_row needs a matrix, got shape {x.shape}")
    if not 0 <= i < x.shape[0]:
        raise ShapeError(f"row {i} out of range for shape {x.shape}")

    def bwd(g, accumulate):
        gx = np.zeros_like(x.data)
        gx[i] = g
        accumulate(x, gx)

    return _make_node(x.data[i].copy(), "take_row", (x,), bwd)


def pick_entries(x, row_idx, col_idx) -> Tensor:
    """Gather x[r, c] for paired index sequences -> vector."""
    x = _as_tensor(x)
    r = np.asarray(row_idx, dtype=np.int64)
    c = np.asarray(col_idx, dtype=np.int64)
    if x.data.ndim != 2 or r.shape != c.shape or r.ndim != 1:
        raise ShapeError("pick_entries needs a matrix and two equal-length flat index arrays")

    def bwd(g, accumulate):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (r, c), g)
        accumulate(x, gx)

    return _make_node(x.data[r, c].copy(), "pick_entries", (x,), bwd)


def permute_within_rows(x, src_cols) -> Tensor:
    """Reorder each row by per-cell source column indices.

    out[i, j] = x[i, src_cols[i, j]]. Used to repair quantile crossings by
    sorting along the level axis while keeping the op differentiable (it is a
    fixed permutation once the forward values are known).
    """
    x = _as_tensor(x)
    src = np.asarray(src_cols, dtype=np.int64)
    if x.data.ndim != 2 or src.shape != x.data.shape:
        raise ShapeError(f"permute_within_rows needs matching shapes, got {x.shape} and {src.shape}")
    rows = np.arange(x.shape[0])[:, None]

    def bwd(g, accumulate):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (np.broadcast_to(rows, src.shape), src), g)
        accumulate(x, gx)

    return _make_node(x.data[rows, src].copy(), "permute_within_rows", (x,), bwd)


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map the tensor to a scalar. Every coordinate of x is probed
    with a central difference of the given step; the analytic gradient comes
    from one backward pass. Returns max_i |analytic_i - central_i| /
    max(1, |central_i|).
    """
    x.zero_grad()
    out = f(x)
    backward(out)
    if x.grad is None:
        analytic = np.zeros_like(x.data)
    else:
        analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(x).item()
            flat[i] = orig - step
            lo = f(x).item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericalDomainError(f"non-finite evaluation while probing coordinate {i}")
            numeric[i] = (hi - lo) / (2.0 * step)

    a = analytic.reshape(-1)
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
