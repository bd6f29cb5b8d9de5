"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Each operation returns a new Tensor holding parent links and a backward
rule; ``backward(loss)`` walks the recorded graph once in reverse
topological order and accumulates gradients into ``.grad`` buffers,
summing over fan-out. Broadcasting is deliberately narrow: elementwise
ops accept scalars or exact shape matches, and the one structured form
(``add_broadcast``) adds a small tensor across leading axes. Everything
is float64; there is no dtype promotion to think about.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, StateError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager: operations inside record no graph.

    Forward values are identical; only the tape is suppressed. Used for
    matching and evaluation where gradients are never needed.
    """

    def __enter__(self) -> None:
        self._prev = grad_enabled()
        _state.grad_enabled = False

    def __exit__(self, *exc) -> bool:
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A float64 array plus an optional position in an autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_rule", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._rule: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor(self.data)
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; the real implementations are the module functions.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], rule) -> Tensor:
    """Wrap an op result, recording the graph only when it can matter."""
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._rule = rule
    return out


def _as_scalar_operand(other) -> tuple[float | None, Tensor | None]:
    """Classify the second elementwise operand.

    Returns (scalar, tensor): exactly one is set. Python numbers and
    size-1 arrays become plain floats; tensors stay tensors (a size-1
    tensor broadcasts as a scalar but keeps its gradient path).
    """
    if isinstance(other, Tensor):
        return None, other
    if np.isscalar(other) or (isinstance(other, np.ndarray) and other.size == 1):
        return float(np.asarray(other).reshape(())), None
    raise ContractError(f"unsupported elementwise operand of type {type(other).__name__}")


def _check_elementwise(a: Tensor, b: Tensor, opname: str) -> bool:
    """True when b broadcasts as a scalar, False for an exact shape match."""
    if b.data.size == 1:
        return True
    if a.shape != b.shape:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} are incompatible")
    return False


def add(a: Tensor, b) -> Tensor:
    scalar, bt = _as_scalar_operand(b)
    if bt is None:
        return _make(a.data + scalar, (a,), lambda g: (g,))
    scalar_b = _check_elementwise(a, bt, "add")
    data = a.data + bt.data

    def rule(g):
        gb = np.sum(g).reshape(bt.shape) if scalar_b else g
        return g, gb

    return _make(data, (a, bt), rule)


def sub(a: Tensor, b) -> Tensor:
    scalar, bt = _as_scalar_operand(b)
    if bt is None:
        return _make(a.data - scalar, (a,), lambda g: (g,))
    scalar_b = _check_elementwise(a, bt, "sub")
    data = a.data - bt.data

    def rule(g):
        gb = -np.sum(g).reshape(bt.shape) if scalar_b else -g
        return g, gb

    return _make(data, (a, bt), rule)


def mul(a: Tensor, b) -> Tensor:
    scalar, bt = _as_scalar_operand(b)
    if bt is None:
        return _make(a.data * scalar, (a,), lambda g: (g * scalar,))
    scalar_b = _check_elementwise(a, bt, "mul")
    data = a.data * bt.data

    def rule(g):
        ga = g * bt.data
        gb = np.sum(g * a.data).reshape(bt.shape) if scalar_b else g * a.data
        return ga, gb

    return _make(data, (a, bt), rule)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-function form, not the tanh approximation."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * phi

    def rule(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (phi + x.data * pdf),)

    return _make(data, (x,), rule)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    return _make(data, (x,), lambda g: (g * data,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-d by 2-d, batched by 2-d, or batched by batched.

    Batched operands must share identical leading dimensions; general
    broadcasting is out of scope.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if b.ndim == 2:
        if a.shape[-1] != b.shape[0]:
            raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} differ")
    else:
        if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    data = np.matmul(a.data, b.data)

    def rule(g):
        if b.ndim == 2:
            ga = np.matmul(g, b.data.T)
            # Fold every leading axis into rows so dW sums over the batch.
            k = a.shape[-1]
            n = b.shape[1]
            gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
        else:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(data, (a, b), rule)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis with row-max subtraction."""
    m = np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    data = e / np.sum(e, axis=-1, keepdims=True)

    def rule(g):
        dot = np.sum(g * data, axis=-1, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis with population variance; epsilon sits
    inside the square root."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} and beta {beta.shape} must be ({d},)"
        )
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.mean((x.data - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def rule(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = np.sum(g * xhat, axis=lead)
        dbeta = np.sum(g, axis=lead)
        gh = g * gamma.data
        m1 = np.mean(gh, axis=-1, keepdims=True)
        m2 = np.mean(gh * xhat, axis=-1, keepdims=True)
        dx = (gh - m1 - xhat * m2) * inv
        return dx, dgamma, dbeta

    return _make(data, (x, gamma, beta), rule)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row (last axis) to unit length.

    Rows with norm below eps pass through unchanged rather than dividing
    by almost-zero; their gradient is likewise the identity.
    """
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    degenerate = norm < eps
    safe = np.where(degenerate, 1.0, norm)
    data = x.data / safe

    def rule(g):
        dot = np.sum(g * data, axis=-1, keepdims=True)
        dx = (g - data * dot) / safe
        return (np.where(degenerate, g, dx),)

    return _make(data, (x,), rule)


def mean_rows(x: Tensor, indices: Iterable[int]) -> Tensor:
    """Average the selected rows of a 2-d tensor into one vector.

    The index set is deduplicated; it must be non-empty and in range.
    """
    if x.ndim != 2:
        raise DimensionError(f"mean_rows: expected a 2-d tensor, got {x.shape}")
    idx = sorted(set(int(i) for i in indices))
    if not idx:
        raise ContractError("mean_rows: empty index set")
    m = x.shape[0]
    if idx[0] < 0 or idx[-1] >= m:
        raise ContractError(f"mean_rows: index out of range for {m} rows: {idx}")
    sel = np.asarray(idx, dtype=np.intp)
    data = np.mean(x.data[sel], axis=0)
    inv = 1.0 / len(idx)

    def rule(g):
        dx = np.zeros_like(x.data)
        dx[sel] = g * inv
        return (dx,)

    return _make(data, (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    data = np.array(np.sum(x.data))

    def rule(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(data, (x,), rule)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    data = np.sum(x.data, axis=axis)

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(data, (x,), rule)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = np.reshape(x.data, shape)
    return _make(data, (x,), lambda g: (np.reshape(g, x.shape),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    data = np.transpose(x.data, axes)
    return _make(data, (x,), lambda g: (np.transpose(g, inv),))


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice `length` entries from `start` along one axis."""
    if not (0 <= start and start + length <= x.shape[axis]):
        raise DimensionError(
            f"narrow: [{start}:{start + length}] out of range for axis {axis} of {x.shape}"
        )
    slicer = [slice(None)] * x.ndim
    slicer[axis] = slice(start, start + length)
    slicer = tuple(slicer)
    data = x.data[slicer]

    def rule(g):
        dx = np.zeros_like(x.data)
        dx[slicer] = g
        return (dx,)

    return _make(data, (x,), rule)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ContractError("concat: no tensors given")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        outs = []
        for i in range(len(parts)):
            slicer = [slice(None)] * g.ndim
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(slicer)])
        return tuple(outs)

    return _make(data, tuple(parts), rule)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids of any integer shape, result gains a trailing dim."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.shape[0]:
        raise ContractError(f"embedding: id out of range for table with {table.shape[0]} rows")
    data = table.data[ids]

    def rule(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (dt,)

    return _make(data, (table,), rule)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one row per batch element: (B, L, d) with idx (B,) -> (B, d)."""
    if x.ndim != 3:
        raise DimensionError(f"gather_rows: expected (B, L, d), got {x.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    bsz = x.shape[0]
    if idx.shape != (bsz,):
        raise DimensionError(f"gather_rows: index shape {idx.shape} does not match batch {bsz}")
    rows = np.arange(bsz)
    data = x.data[rows, idx]

    def rule(g):
        dx = np.zeros_like(x.data)
        dx[rows, idx] = g
        return (dx,)

    return _make(data, (x,), rule)


def take(x: Tensor, index: int) -> Tensor:
    """Select one slice along axis 0."""
    if not 0 <= index < x.shape[0]:
        raise DimensionError(f"take: index {index} out of range for {x.shape}")
    data = x.data[index]

    def rule(g):
        dx = np.zeros_like(x.data)
        dx[index] = g
        return (dx,)

    return _make(data, (x,), rule)


def tile_leading(x: Tensor, reps: int) -> Tensor:
    """Repeat a tensor along a new leading axis; backward sums it away."""
    data = np.broadcast_to(x.data, (reps,) + x.shape).copy()
    return _make(data, (x,), lambda g: (np.sum(g, axis=0),))


def add_broadcast(x: Tensor, v: Tensor) -> Tensor:
    """Add v across leading axes of x; v.shape must equal x.shape's tail."""
    k = v.ndim
    if k == 0 or x.shape[x.ndim - k:] != v.shape:
        raise DimensionError(f"add_broadcast: {v.shape} is not a trailing match for {x.shape}")
    data = x.data + v.data
    lead = tuple(range(x.ndim - k))

    def rule(g):
        return g, np.sum(g, axis=lead) if lead else g

    return _make(data, (x, v), rule)


def add_const(x: Tensor, arr: np.ndarray) -> Tensor:
    """Add a constant array that numpy-broadcasts against x.

    The constant carries no gradient, so the usual same-shape restriction
    is unnecessary; this is how attention masks enter the graph.
    """
    arr = np.asarray(arr, dtype=np.float64)
    data = x.data + arr
    if data.shape != x.shape:
        raise DimensionError(f"add_const: {arr.shape} must broadcast into {x.shape}, not expand it")
    return _make(data, (x,), lambda g: (g,))


def diag_part(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"diag_part: expected a square matrix, got {x.shape}")
    n = x.shape[0]
    data = np.diagonal(x.data).copy()

    def rule(g):
        dx = np.zeros_like(x.data)
        dx[np.arange(n), np.arange(n)] = g
        return (dx,)

    return _make(data, (x,), rule)


def clamp_max(x: Tensor, cmax: float) -> Tensor:
    """Elementwise min(x, cmax); gradient is passed where x <= cmax."""
    mask = x.data <= cmax
    data = np.where(mask, x.data, cmax)
    return _make(data, (x,), lambda g: (g * mask,))


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(node) to every reachable requires_grad tensor.

    The loss must be scalar. Each recorded node may be consumed once;
    walking any part of an already-consumed graph raises StateError, so
    double backward without rebuilding the graph is rejected. Gradients
    accumulate into ``.grad`` (callers reset between steps).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not require grad (no graph recorded)")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._rule is None:
            continue
        if node._done:
            raise StateError("backward: graph already consumed; rebuild it before differentiating again")
        node._done = True
        parent_grads = node._rule(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
