"""Dense float64 matrices with reverse-mode differentiation on an explicit tape.

Graph-building operations are module-level functions taking and returning
:class:`Matrix` nodes. Recording happens only inside a ``with Tape() as tape:``
block; outside of one the same functions just compute values (inference mode).
``tape.backward(loss)`` replays the record in exact reverse order and
accumulates into the ``.grad`` buffers of every node that participated.

The active tape is tracked per thread, so independent models may run forward
passes concurrently as long as they do not share nodes.
"""

from __future__ import annotations

import threading

import numpy as np

EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Tape used outside its single record-once / backward-once life cycle."""


_tapes = threading.local()


def _active_tape():
    stack = getattr(_tapes, "stack", None)
    return stack[-1] if stack else None


class Matrix:
    """A rows x cols float64 value, doubling as a node in the recorded graph.

    ``grad`` is None for constants (anything not derived from a Parameter
    while a tape is active) and a same-shaped accumulator otherwise.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"Matrix needs scalar, 1-D or 2-D data, got ndim={arr.ndim}")
        self.data = arr
        self.grad = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape})"

    def __matmul__(self, other):
        return matmul(self, other)

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

    def __neg__(self):
        return neg(self)


class Parameter(Matrix):
    """A trainable leaf: owns its value plus gradient and momentum buffers."""

    __slots__ = ("momentum", "trainable", "name")

    def __init__(self, data, trainable: bool = True, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64))
        self.grad = np.zeros_like(self.data)
        self.momentum = np.zeros_like(self.data)
        self.trainable = trainable
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape}, trainable={self.trainable})"


class Tape:
    """Ordered record of one forward pass, replayable exactly once in reverse."""

    def __init__(self):
        self._backs = []
        self._spent = False

    def __enter__(self):
        stack = getattr(_tapes, "stack", None)
        if stack is None:
            stack = _tapes.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.stack.pop()
        return False

    def __len__(self):
        return len(self._backs)

    def backward(self, loss: Matrix):
        """Seed d(loss)/d(loss) = 1 and sweep the record in reverse order."""
        if self._spent:
            raise TapeError("tape already ran backward; record a fresh forward pass")
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a 1x1 loss node, got {loss.shape}")
        if loss.grad is None:
            raise TapeError("loss does not depend on any tracked node on this tape")
        self._spent = True
        loss.grad[...] = 1.0
        for back in reversed(self._backs):
            back()


def _as_matrix(x) -> Matrix:
    if isinstance(x, Matrix):
        return x
    return Matrix(x)


def _track(out: Matrix, parents: tuple, back) -> None:
    # Record only when a tape is active and some input can receive gradient;
    # constant-only subgraphs stay untracked and cost nothing on backward.
    tape = _active_tape()
    if tape is None:
        return
    if not any(p.grad is not None for p in parents):
        return
    out.grad = np.zeros_like(out.data)
    tape._backs.append(back)


def _broadcastable(a: tuple, b: tuple) -> bool:
    return all(m == n or m == 1 or n == 1 for m, n in zip(a, b))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] > 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] > 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def matmul(a, b) -> Matrix:
    """Standard matrix product; gradient flows to both operands."""
    a, b = _as_matrix(a), _as_matrix(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Matrix(a.data @ b.data)

    def back():
        g = out.grad
        if a.grad is not None:
            a.grad += g @ b.data.T
        if b.grad is not None:
            b.grad += a.data.T @ g

    _track(out, (a, b), back)
    return out


def _elementwise_pair(a, b, op_name):
    a, b = _as_matrix(a), _as_matrix(b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(f"{op_name} cannot broadcast {a.shape} with {b.shape}")
    return a, b


def add(a, b) -> Matrix:
    a, b = _elementwise_pair(a, b, "add")
    out = Matrix(a.data + b.data)

    def back():
        g = out.grad
        if a.grad is not None:
            a.grad += _unbroadcast(g, a.shape)
        if b.grad is not None:
            b.grad += _unbroadcast(g, b.shape)

    _track(out, (a, b), back)
    return out


def sub(a, b) -> Matrix:
    a, b = _elementwise_pair(a, b, "sub")
    out = Matrix(a.data - b.data)

    def back():
        g = out.grad
        if a.grad is not None:
            a.grad += _unbroadcast(g, a.shape)
        if b.grad is not None:
            b.grad -= _unbroadcast(g, b.shape)

    _track(out, (a, b), back)
    return out


def mul(a, b) -> Matrix:
    """Elementwise product with numpy-style broadcasting (scalars included)."""
    a, b = _elementwise_pair(a, b, "mul")
    out = Matrix(a.data * b.data)

    def back():
        g = out.grad
        if a.grad is not None:
            a.grad += _unbroadcast(g * b.data, a.shape)
        if b.grad is not None:
            b.grad += _unbroadcast(g * a.data, b.shape)

    _track(out, (a, b), back)
    return out


def neg(x) -> Matrix:
    x = _as_matrix(x)
    out = Matrix(-x.data)

    def back():
        if x.grad is not None:
            x.grad -= out.grad

    _track(out, (x,), back)
    return out


def exp(x) -> Matrix:
    x = _as_matrix(x)
    out = Matrix(np.exp(x.data))

    def back():
        if x.grad is not None:
            x.grad += out.grad * out.data

    _track(out, (x,), back)
    return out


def log(x) -> Matrix:
    x = _as_matrix(x)
    if np.any(x.data <= 0.0):
        raise ValueError("log requires strictly positive entries")
    out = Matrix(np.log(x.data))

    def back():
        if x.grad is not None:
            x.grad += out.grad / x.data

    _track(out, (x,), back)
    return out


def relu(x) -> Matrix:
    x = _as_matrix(x)
    out = Matrix(np.maximum(x.data, 0.0))

    def back():
        if x.grad is not None:
            x.grad += out.grad * (x.data > 0.0)

    _track(out, (x,), back)
    return out


def transpose(x) -> Matrix:
    x = _as_matrix(x)
    out = Matrix(x.data.T.copy())

    def back():
        if x.grad is not None:
            x.grad += out.grad.T

    _track(out, (x,), back)
    return out


def sum_rows(x) -> Matrix:
    """Row sums as a rows x 1 column."""
    x = _as_matrix(x)
    out = Matrix(x.data.sum(axis=1, keepdims=True))

    def back():
        if x.grad is not None:
            x.grad += out.grad  # broadcasts the column across the row

    _track(out, (x,), back)
    return out


def concat_rows(*parts) -> Matrix:
    """Stack matrices vertically; all operands must agree on column count."""
    parts = tuple(_as_matrix(p) for p in parts)
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows needs equal column counts, got {sorted(cols)}")
    out = Matrix(np.vstack([p.data for p in parts]))
    offsets = np.cumsum([0] + [p.rows for p in parts])

    def back():
        g = out.grad
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.grad is not None:
                p.grad += g[lo:hi]

    _track(out, parts, back)
    return out


def slice_rows(x, start: int, stop: int) -> Matrix:
    x = _as_matrix(x)
    if not (0 <= start <= stop <= x.rows):
        raise ShapeError(f"row slice [{start}:{stop}] out of range for {x.rows} rows")
    out = Matrix(x.data[start:stop].copy())

    def back():
        if x.grad is not None:
            x.grad[start:stop] += out.grad

    _track(out, (x,), back)
    return out


def gather_rows(x, indices) -> Matrix:
    """Select rows by index (duplicates allowed; gradients scatter-add back)."""
    x = _as_matrix(x)
    idx = np.asarray(indices, dtype=np.intp).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= x.rows):
        raise IndexError(f"row index out of range for {x.rows} rows")
    out = Matrix(x.data[idx])

    def back():
        if x.grad is not None:
            np.add.at(x.grad, idx, out.grad)

    _track(out, (x,), back)
    return out


def embed_block(x, rows: int, cols: int, row_offset: int, col_offset: int) -> Matrix:
    """Place x into an otherwise-zero rows x cols matrix at the given offset."""
    x = _as_matrix(x)
    if row_offset < 0 or col_offset < 0 or row_offset + x.rows > rows or col_offset + x.cols > cols:
        raise ShapeError(f"block {x.shape} at ({row_offset},{col_offset}) exceeds ({rows},{cols})")
    value = np.zeros((rows, cols))
    value[row_offset:row_offset + x.rows, col_offset:col_offset + x.cols] = x.data
    out = Matrix(value)

    def back():
        if x.grad is not None:
            x.grad += out.grad[row_offset:row_offset + x.rows, col_offset:col_offset + x.cols]

    _track(out, (x,), back)
    return out


def row_normalize(x) -> Matrix:
    """Divide each row by max(||row||, EPS); rows with norm <= EPS pass through.

    Degenerate rows are returned unchanged and receive zero gradient, so a
    collapsed prototype cannot inject NaNs into the rest of the graph.
    """
    x = _as_matrix(x)
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    small = norms <= EPS
    safe = np.where(small, 1.0, norms)
    out = Matrix(x.data / safe)

    def back():
        if x.grad is not None:
            g = out.grad
            y = out.data
            radial = (g * y).sum(axis=1, keepdims=True)
            x.grad += np.where(small, 0.0, (g - y * radial) / safe)

    _track(out, (x,), back)
    return out


def _softmax_stable(z) -> Matrix:
    z = _as_matrix(z)
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = Matrix(e / e.sum(axis=1, keepdims=True))

    def back():
        if z.grad is not None:
            g = out.grad
            s = out.data
            z.grad += s * (g - (g * s).sum(axis=1, keepdims=True))

    _track(out, (z,), back)
    return out


def softmax_rows(x, inv_temperature=1.0) -> Matrix:
    """Row-wise softmax of inv_temperature * x, computed with max subtraction.

    inv_temperature may be a positive float or a 1x1 node (e.g. exp of an
    unconstrained Parameter), in which case gradient flows into it.
    """
    x = _as_matrix(x)
    if isinstance(inv_temperature, Matrix):
        if inv_temperature.shape != (1, 1):
            raise ShapeError("inv_temperature node must be 1x1")
        if inv_temperature.item() <= 0.0:
            raise ValueError("inv_temperature must be positive")
        return _softmax_stable(mul(x, inv_temperature))
    t = float(inv_temperature)
    if t <= 0.0:
        raise ValueError("inv_temperature must be positive")
    if t == 1.0:
        return _softmax_stable(x)
    return _softmax_stable(mul(x, t))


def cosine_similarity(a, b) -> Matrix:
    """Pairwise cosine similarities: entry (i, j) compares row i of a with row j of b."""
    a, b = _as_matrix(a), _as_matrix(b)
    if a.cols != b.cols:
        raise ShapeError(f"cosine_similarity needs equal feature dims: {a.shape} vs {b.shape}")
    return matmul(row_normalize(a), transpose(row_normalize(b)))


def cross_entropy(log_probs, labels) -> Matrix:
    """Mean of -log_probs[i, labels[i]] as a 1x1 node."""
    log_probs = _as_matrix(log_probs)
    idx = np.asarray(labels, dtype=np.intp).ravel()
    if idx.shape[0] != log_probs.rows:
        raise ShapeError(f"{idx.shape[0]} labels for {log_probs.rows} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= log_probs.cols):
        raise IndexError(f"label out of range for {log_probs.cols} classes")
    rows = np.arange(idx.shape[0])
    out = Matrix(-log_probs.data[rows, idx].mean())

    def back():
        if log_probs.grad is not None:
            g = out.grad[0, 0] / idx.shape[0]
            np.subtract.at(log_probs.grad, (rows, idx), g)

    _track(out, (log_probs,), back)
    return out


def sgd_step(params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
    """One SGD update: g = grad + wd*value; buf = momentum*buf + g; value -= lr*buf."""
    for p in params:
        if not p.trainable:
            continue
        g = p.grad
        if weight_decay != 0.0:
            g = g + weight_decay * p.data
        p.momentum *= momentum
        p.momentum += g
        p.data -= lr * p.momentum


def zero_grads(params):
    for p in params:
        p.zero_grad()


def finite_difference_check(f, params, h: float = 1e-5) -> float:
    """Compare tape gradients of a scalar computation against central differences.

    f rebuilds the loss node from the current parameter values on every call
    and must not open a tape itself. Returns the worst relative error over all
    entries of all given parameters, with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        ref = ga.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            f_plus = f().item()
            flat[i] = keep - h
            f_minus = f().item()
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(numeric - ref[i]) / max(abs(numeric), abs(ref[i]), 1e-8)
            worst = max(worst, err)
    return worst
