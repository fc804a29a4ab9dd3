"""Dense-tensor reverse-mode automatic differentiation.

A Tensor wraps a numpy array and records, for every derived value, the
inputs it came from and a closure that pushes gradients back to them.
Calling :func:`backward` on a scalar node topologically sorts the tape and
accumulates ``d loss / d leaf`` into every leaf created with
``requires_grad=True``. The tape is rebuilt on every forward pass and
consumed by the backward pass, which is the simplest correct design for
unrolled recurrent networks.

Precision policy: parameters and activations are float32 by default, full
reductions (sum / mean) accumulate and return in float64, and the whole
graph runs in float64 when fed float64 arrays (used by the finite
difference checks in the test suite). Only the operations the two staging
architectures need are provided; there is no general broadcasting beyond
scalars, row vectors and column vectors.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, DomainError

_COUNTER = 0


def _next_id() -> int:
    global _COUNTER
    _COUNTER += 1
    return _COUNTER


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = _next_id()
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are python numbers only
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _make(data, parents, backward) -> Tensor:
    """Create a graph node; the backward closure is kept only when needed."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        # always copy: closures may hand the same buffer to several parents
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor):
    """Accumulate d loss / d leaf for every requires-grad leaf of the tape.

    ``loss`` must be a scalar node. The traversed part of the graph is
    released afterwards so activations do not outlive the step.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.node_id not in visited and p._backward is not None:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
    # consume the tape: interior nodes drop their closures and buffers
    for node in topo:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node.grad = None


# ---------------------------------------------------------------------------
# basic algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), bwd)


def _binary_check(a, b, name):
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and b_t and a.data.shape != b.data.shape:
        raise DimensionError(f"{name} shapes differ: {a.data.shape} vs {b.data.shape}")
    if not a_t and not b_t:
        raise ContractError(f"{name} needs at least one Tensor operand")
    return a_t, b_t


def add(a, b) -> Tensor:
    a_t, b_t = _binary_check(a, b, "add")
    if not b_t:
        out = _make(a.data + b, (a,), lambda g: _accum(a, g))
        return out
    if not a_t:
        return _make(b.data + a, (b,), lambda g: _accum(b, g))

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a_t, b_t = _binary_check(a, b, "sub")
    if not b_t:
        return _make(a.data - b, (a,), lambda g: _accum(a, g))
    if not a_t:
        return _make(a - b.data, (b,), lambda g: _accum(b, -g))

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a_t, b_t = _binary_check(a, b, "mul")
    if not b_t:
        return _make(a.data * b, (a,), lambda g: _accum(a, g * b))
    if not a_t:
        return _make(b.data * a, (b,), lambda g: _accum(b, g * a))

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accum(a, -g))


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _make(s, (a,), lambda g: _accum(a, g * s * (1.0 - s)))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: _accum(a, g * (1.0 - t * t)))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: _accum(a, g * e))


def log(a: Tensor, floor: float | None = None) -> Tensor:
    """Natural log. Without ``floor`` the input must be strictly positive;
    callers that tolerate zeros (spectrogram, cross-entropy) opt in by
    passing a floor that is added before the log."""
    if floor is None:
        if np.any(a.data <= 0.0):
            raise DomainError("log requires strictly positive input")
        shifted = a.data
    else:
        shifted = a.data + floor
    out = np.log(shifted)
    return _make(out, (a,), lambda g: _accum(a, g / shifted))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: _accum(a, g * (a.data > 0.0)))


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for stability."""
    if a.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = np.sum(g * s, axis=1, keepdims=True)
        _accum(a, s * (g - dot))

    return _make(s, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions (64-bit accumulation)


def sum_all(a: Tensor) -> Tensor:
    out = np.array(np.sum(a.data, dtype=np.float64))

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(out, (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.array(np.sum(a.data, dtype=np.float64) / n)

    def bwd(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape))

    return _make(out, (a,), bwd)


def row_sums(a: Tensor) -> Tensor:
    """Per-row sum of a matrix, returned as an (n, 1) column."""
    if a.data.ndim != 2:
        raise DimensionError(f"row_sums expects a matrix, got shape {a.data.shape}")
    out = np.sum(a.data, axis=1, keepdims=True, dtype=np.float64).astype(a.data.dtype)

    def bwd(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# structural ops for batched recurrent unrolling


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a length-k vector (or 1 x k row) to every row of an n x k matrix."""
    vk = v.data.reshape(-1)
    if a.data.ndim != 2 or vk.shape[0] != a.data.shape[1]:
        raise DimensionError(f"add_rowvec shapes incompatible: {a.data.shape} + {v.data.shape}")

    def bwd(g):
        _accum(a, g)
        _accum(v, g.sum(axis=0, dtype=np.float64).astype(g.dtype).reshape(v.data.shape))

    return _make(a.data + vk[None, :], (a, v), bwd)


def add_colvec(a: Tensor, c: Tensor) -> Tensor:
    """Add an (n, 1) column to every column of an n x k matrix."""
    if a.data.ndim != 2 or c.data.shape != (a.data.shape[0], 1):
        raise DimensionError(f"add_colvec shapes incompatible: {a.data.shape} + {c.data.shape}")

    def bwd(g):
        _accum(a, g)
        _accum(c, g.sum(axis=1, keepdims=True, dtype=np.float64).astype(g.dtype))

    return _make(a.data + c.data, (a, c), bwd)


def mul_colvec(a: Tensor, c: Tensor) -> Tensor:
    """Scale every row of an n x k matrix by the matching (n, 1) entry."""
    if a.data.ndim != 2 or c.data.shape != (a.data.shape[0], 1):
        raise DimensionError(f"mul_colvec shapes incompatible: {a.data.shape} * {c.data.shape}")

    def bwd(g):
        _accum(a, g * c.data)
        _accum(c, np.sum(g * a.data, axis=1, keepdims=True, dtype=np.float64).astype(g.dtype))

    return _make(a.data * c.data, (a, c), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.data.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: _accum(a, g.T))


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows by integer index; rows may repeat."""
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, idx, g)
            _accum(a, buf)

    return _make(a.data[idx], (a,), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.data.shape[0]):
        raise DimensionError(f"slice_rows [{start}:{stop}] out of range for shape {a.data.shape}")

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[start:stop] = g
            _accum(a, buf)

    return _make(a.data[start:stop].copy(), (a,), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start < stop <= a.data.shape[1]):
        raise DimensionError(f"slice_cols [{start}:{stop}] out of range for shape {a.data.shape}")

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[:, start:stop] = g
            _accum(a, buf)

    return _make(a.data[:, start:stop].copy(), (a,), bwd)


def concat_rows(parts: list[Tensor]) -> Tensor:
    widths = {p.data.shape[1] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows column counts differ: {sorted(widths)}")
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bwd)


def concat_cols(parts: list[Tensor]) -> Tensor:
    heights = {p.data.shape[0] for p in parts}
    if len(heights) != 1:
        raise DimensionError(f"concat_cols row counts differ: {sorted(heights)}")
    sizes = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[:, lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bwd)


# ---------------------------------------------------------------------------
# parameter helpers


def init_uniform(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)], float32."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)
