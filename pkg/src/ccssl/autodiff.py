"""Dense float64 tensors with reverse-mode gradients.

Each differentiable op returns a new :class:`Tensor` that remembers its
inputs and a closure mapping the upstream gradient to input gradients.
:func:`trace` linearizes that graph into a :class:`ComputationRecord`
and :func:`backward` replays it in reverse.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> backward((x * x).sum())
    >>> x.grad
    array([2., 4.])
"""

import contextlib
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateEmbeddingError, DimensionError

_ids = itertools.count()
_grad_enabled = True

NORM_EPS = 1e-12


@contextlib.contextmanager
def no_grad():
    """Run forward computations without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "id", "op", "parents", "_backward")

    def __init__(self, values, requires_grad=False):
        self.data = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.id = next(_ids)
        self.op = None
        self.parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.id = next(_ids)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out.op = op
        out.parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.op = None
        out.parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, "add", (a, b), bw)


def neg(a):
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, "mul", (a, b), bw)


def exp(a):
    data = np.exp(a.data)
    return _make(data, "exp", (a,), lambda g: (g * data,))


def log(a):
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def relu(a):
    """Elementwise ``max(a, 0)``; subgradient 0 at the kink."""
    keep = a.data > 0
    return _make(np.where(keep, a.data, 0.0), "relu", (a,), lambda g: (g * keep,))


def maximum(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.data >= b.data
    data = np.where(pick_a, a.data, b.data)

    def bw(g):
        return (_unbroadcast(g * pick_a, a.shape),
                _unbroadcast(g * ~pick_a, b.shape))

    return _make(data, "maximum", (a, b), bw)


# --------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, "matmul", (a, b), bw)


def transpose(a):
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def concat_rows(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=0)
    bounds = np.cumsum([0] + [len(t.data) for t in tensors])

    def bw(g):
        return tuple(g[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(data, "concat_rows", tensors, bw)


def slice_rows(a, start, stop):
    data = a.data[start:stop].copy()

    def bw(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _make(data, "slice_rows", (a,), bw)


def take_rows(a, index):
    """Gather rows by integer index; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.intp)
    data = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(data, "take_rows", (a,), bw)


# --------------------------------------------------------------------------
# reductions


def tsum(a, axis=None):
    data = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(data, "sum", (a,), bw)


def mean(a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / n)


# --------------------------------------------------------------------------
# row-wise normalizations


def row_softmax(a):
    if a.ndim != 2:
        raise DimensionError(f"row_softmax expects a matrix, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, "row_softmax", (a,), bw)


def row_log_softmax(a, exclude=None):
    """Row-wise log-softmax of a matrix.

    ``exclude`` is an optional boolean mask of entries removed from the
    normalizer; those outputs are set to 0 and receive no gradient.
    """
    if a.ndim != 2:
        raise DimensionError(f"row_log_softmax expects a matrix, got shape {a.shape}")
    x = a.data
    if exclude is not None:
        exclude = np.asarray(exclude, dtype=bool)
        if exclude.shape != x.shape:
            raise DimensionError(f"exclude mask {exclude.shape} vs input {x.shape}")
        if exclude.all(axis=1).any():
            raise ContractError("row_log_softmax: a row has every entry excluded")
        x = np.where(exclude, -np.inf, x)
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    out = x - lse
    p = np.exp(out)
    if exclude is not None:
        out = np.where(exclude, 0.0, out)

    def bw(g):
        if exclude is not None:
            g = np.where(exclude, 0.0, g)
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make(out, "row_log_softmax", (a,), bw)


def l2_normalize_rows(a):
    if a.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects a matrix, got shape {a.shape}")
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    bad = np.flatnonzero(norms[:, 0] < NORM_EPS)
    if bad.size:
        raise DegenerateEmbeddingError(f"rows with norm < {NORM_EPS}: {bad.tolist()}")
    y = a.data / norms

    def bw(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return _make(y, "l2_normalize_rows", (a,), bw)


# --------------------------------------------------------------------------
# backward pass


@dataclass
class RecordEntry:
    op: str
    inputs: tuple
    output: int


@dataclass
class ComputationRecord:
    """Topologically ordered operations that produced a tensor."""

    entries: list = field(default_factory=list)
    tensors: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.entries)

    def leaves(self):
        produced = {e.output for e in self.entries}
        return [t for tid, t in self.tensors.items() if tid not in produced]


def trace(out):
    """Linearize the graph ending at ``out`` (iterative DFS, postorder)."""
    record = ComputationRecord()
    seen = set()
    stack = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            record.tensors[node.id] = node
            if node.op is not None:
                record.entries.append(
                    RecordEntry(node.op, tuple(p.id for p in node.parents), node.id))
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return record


def backward(loss, record=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Nodes whose incoming gradient is identically zero are not expanded, so a
    branch scaled by an exact 0 leaves every other gradient bit-for-bit
    untouched.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if record is None:
        record = trace(loss)
    grads = {loss.id: np.ones_like(loss.data)}
    for entry in reversed(record.entries):
        g = grads.pop(entry.output, None)
        if g is None or not g.any():
            continue
        node = record.tensors[entry.output]
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    # whatever remains belongs to leaves
    for tid, g in grads.items():
        leaf = record.tensors.get(tid)
        if leaf is None or leaf.op is not None:
            continue
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def finite_difference_grad(fn, x, h=1e-5):
    """Central finite-difference gradient of scalar ``fn`` at array ``x``.

    ``fn`` maps a float64 array of ``x.shape`` to a float.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    """``||a - n|| / max(||a||, ||n||, floor)`` over the flattened arrays."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)
