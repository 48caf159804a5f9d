"""Dense reverse-mode automatic differentiation on 2-D float64 arrays.

Every tensor is a matrix (rows, cols); scalars are (1, 1).  Operations are
recorded on the active :class:`Tape` only when at least one input requires a
gradient, so code running outside a ``with Tape():`` block builds no graph.

    with Tape() as tape:
        loss = softmax_cross_entropy(x @ w, labels)
    tape.backward(loss)
    w.grad  # d loss / d w
"""

from __future__ import annotations

import threading

import numpy as np
import scipy.sparse as sp

__all__ = [
    "NonFiniteError",
    "Tensor",
    "Tape",
    "tensor",
    "parameter",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "spmm",
    "concat_rows",
    "gather_rows",
    "tanh",
    "relu",
    "exp",
    "log",
    "sqrt",
    "square",
    "absolute",
    "sum_all",
    "sum_cols",
    "sum_rows",
    "mean_rows",
    "mean_all",
    "softmax",
    "softmax_cross_entropy",
    "cosine_distance_rows",
]


class NonFiniteError(FloatingPointError):
    """A forward value contained NaN or Inf."""


_state = threading.local()


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records differentiable operations in execution order.

    Parents are always created before children, so walking ``nodes`` in
    reverse is a valid reverse topological order.  A tape belongs to the
    thread that entered it.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: "Tensor", grad=None):
        if loss.shape != (1, 1) and grad is None:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=np.float64)
        loss._accumulate(seed)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"tensors are 2-D, got ndim={arr.ndim}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data, op):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _record(data, parents, backward, op):
    """Wrap a forward result; attach ``backward`` when something needs grads."""
    _check_finite(data, op)
    tape = _active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._backward = backward
        tape.nodes.append(out)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _push(t: Tensor, g):
    if t.requires_grad:
        t._accumulate(_unbroadcast(g, t.shape))


# ---------------------------------------------------------------------------
# elementwise arithmetic (2-D broadcasting)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _push(a, g)
        _push(b, g)

    return _record(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _push(a, g)
        _push(b, -g)

    return _record(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _push(a, g * b.data)
        _push(b, g * a.data)

    return _record(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def backward(g):
        _push(a, g / b.data)
        _push(b, -g * out / b.data)

    return _record(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    return scale(a, -1.0)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = _as_tensor(a)
    c = float(c)

    def backward(g):
        _push(a, g * c)

    return _record(a.data * c, (a,), backward, "scale")


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.cols != b.rows:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _record(a.data @ b.data, (a, b), backward, "matmul")


def spmm(m, b) -> Tensor:
    """Constant sparse (or dense ndarray) matrix times a tensor."""
    b = _as_tensor(b)
    if m.shape[1] != b.rows:
        raise ValueError(f"spmm shape mismatch {m.shape} @ {b.shape}")
    out = np.asarray(m @ b.data)
    if sp.issparse(m) and m.format == "csr":
        # the same buffers read column-major are the transpose
        mt = sp.csc_matrix((m.data, m.indices, m.indptr), shape=(m.shape[1], m.shape[0]))
    else:
        mt = m.T

    def backward(g):
        _push(b, np.asarray(mt @ g))

    return _record(out, (b,), backward, "spmm")


def concat_rows(*parts) -> Tensor:
    """Join tensors side by side: (m, a) and (m, b) give (m, a + b)."""
    parts = [_as_tensor(p) for p in parts]
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise ValueError(f"concat_rows needs equal row counts, got {sorted(rows)}")
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            _push(p, g[:, lo:hi])

    return _record(np.hstack([p.data for p in parts]), tuple(parts), backward, "concat_rows")


def gather_rows(a, index) -> Tensor:
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            a._accumulate(full)

    return _record(a.data[index], (a,), backward, "gather_rows")


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        _push(a, g * (1.0 - out * out))

    return _record(out, (a,), backward, "tanh")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0  # subgradient at 0 is 0

    def backward(g):
        _push(a, g * mask)

    return _record(np.where(mask, a.data, 0.0), (a,), backward, "relu")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        _push(a, g * out)

    return _record(out, (a,), backward, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g):
        _push(a, g / a.data)

    return _record(out, (a,), backward, "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore"):
            _push(a, g * 0.5 / out)

    return _record(out, (a,), backward, "sqrt")


def square(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _push(a, g * 2.0 * a.data)

    return _record(a.data * a.data, (a,), backward, "square")


def absolute(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _push(a, g * np.sign(a.data))

    return _record(np.abs(a.data), (a,), backward, "absolute")


# ---------------------------------------------------------------------------
# reductions


def sum_all(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _push(a, np.broadcast_to(g, a.shape))

    return _record(a.data.sum().reshape(1, 1), (a,), backward, "sum_all")


def sum_cols(a) -> Tensor:
    """Sum across columns: (m, n) -> (m, 1)."""
    a = _as_tensor(a)

    def backward(g):
        _push(a, np.broadcast_to(g, a.shape))

    return _record(a.data.sum(axis=1, keepdims=True), (a,), backward, "sum_cols")


def sum_rows(a) -> Tensor:
    """Sum down rows: (m, n) -> (1, n)."""
    a = _as_tensor(a)

    def backward(g):
        _push(a, np.broadcast_to(g, a.shape))

    return _record(a.data.sum(axis=0, keepdims=True), (a,), backward, "sum_rows")


def mean_rows(a) -> Tensor:
    """Average of the rows: (m, n) -> (1, n)."""
    a = _as_tensor(a)
    if a.rows == 0:
        raise ValueError("mean_rows of an empty tensor")
    return scale(sum_rows(a), 1.0 / a.rows)


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.size == 0:
        raise ValueError("mean_all of an empty tensor")
    return scale(sum_all(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# composite losses


def softmax(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        _push(a, out * (g - (g * out).sum(axis=1, keepdims=True)))

    return _record(out, (a,), backward, "softmax")


def softmax_cross_entropy(logits, labels, class_weights=(1.0, 1.0)) -> Tensor:
    """Class-weighted mean negative log-likelihood of integer ``labels``.

    The mean is normalised by the summed weights of the targets, so equal
    weights give the plain average.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    w = np.asarray(class_weights, dtype=np.float64)
    if labels.shape[0] != logits.rows:
        raise ValueError(f"{labels.shape[0]} labels for {logits.rows} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.cols):
        raise ValueError("label out of range")
    if (w <= 0).any():
        raise ValueError("class weights must be positive")
    _check_finite(logits.data, "softmax_cross_entropy input")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)
    nll = lse[:, 0] - z[rows, labels]
    sample_w = w[labels]
    total_w = sample_w.sum()
    value = np.array([[(sample_w * nll).sum() / total_w]])

    def backward(g):
        if logits.requires_grad:
            probs = np.exp(z - lse)
            probs[rows, labels] -= 1.0
            logits._accumulate(g[0, 0] * probs * (sample_w / total_w)[:, None])

    return _record(value, (logits,), backward, "softmax_cross_entropy")


def cosine_distance_rows(a, b):
    """Row-wise ``1 - cos(a_i, b_i)`` as an (m, 1) tensor.

    Rows where either vector has zero norm get distance 1.0 and zero
    gradient.  Returns ``(distance, degenerate_mask)``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"cosine distance shape mismatch {a.shape} vs {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=1, keepdims=True))
    denom = na * nb
    degenerate = denom[:, 0] == 0.0
    safe = np.where(denom == 0.0, 1.0, denom)
    dot = (a.data * b.data).sum(axis=1, keepdims=True)
    cos = np.where(denom == 0.0, 0.0, dot / safe)
    cos = np.clip(cos, -1.0, 1.0)
    live = ~degenerate[:, None]

    def backward(g):
        # d cos / d a = b / (|a||b|) - cos * a / |a|^2
        gn = -g * live
        if a.requires_grad:
            sa = np.where(na == 0.0, 1.0, na)
            a._accumulate(gn * (b.data / safe - cos * a.data / (sa * sa)))
        if b.requires_grad:
            sb = np.where(nb == 0.0, 1.0, nb)
            b._accumulate(gn * (a.data / safe - cos * b.data / (sb * sb)))

    return _record(1.0 - cos, (a, b), backward, "cosine_distance_rows"), degenerate
