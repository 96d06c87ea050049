"""Minimal reverse-mode differentiation over dense float64 arrays.

Tensors are either constants (``tape is None``) or nodes recorded on a
:class:`Tape`.  Every op appends its output to the tape of its inputs, so the
tape's node list is topologically ordered by construction and a backward pass
is a single reverse sweep.

Broadcasting is limited to the one case the models need: a matrix combined
with a row vector of matching width (bias add, per-column standardization).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12
BN_EPS = 1e-5
JVP_REL_EPS = 1e-3


class NonFiniteError(ValueError):
    """Raised when a tensor would contain NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tape:
    """Ordered record of recorded tensors for one backward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __len__(self):
        return len(self.nodes)

    def _record(self, t: Tensor) -> Tensor:
        t.tape = self
        t.node = len(self.nodes)
        self.nodes.append(t)
        return t

    def leaf(self, values, name: str | None = None) -> Tensor:
        """Register a differentiable input (a parameter or a probed feature)."""
        return self._record(Tensor(values, name=name))

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.is_leaf]


class Tensor:
    __array_priority__ = 100

    def __init__(self, values, name: str | None = None, _parents: Sequence[Tensor] = (),
                 _backward: Callable | None = None):
        arr = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.values = arr
        self.name = name
        self.tape: Tape | None = None
        self.node: int | None = None
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        where = f"node={self.node}" if self.tape is not None else "const"
        return f"Tensor(shape={self.shape}, {where})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Detached copy: the result never receives or forwards gradient."""
    return Tensor(x.values if isinstance(x, Tensor) else x)


def _common_tape(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("tensors belong to different tapes")
            tape = t.tape
    return tape


def _make(values, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Build an op output; record it only when some input is tape-attached."""
    tape = _common_tape(*parents)
    if tape is None:
        return Tensor(values)
    out = Tensor(values, _parents=parents, _backward=backward)
    return tape._record(out)


def _row_broadcast(a: Tensor, b: Tensor, op: str) -> bool:
    if a.shape == b.shape:
        return False
    if len(a.shape) == 2 and len(b.shape) == 1 and a.shape[1] == b.shape[0]:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_like(g: np.ndarray, shape) -> np.ndarray:
    return g.sum(axis=0) if g.shape != shape else g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _row_broadcast(a, b, "add")
    return _make(a.values + b.values, (a, b),
                 lambda g: (g, _reduce_like(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _row_broadcast(a, b, "sub")
    return _make(a.values - b.values, (a, b),
                 lambda g: (g, -_reduce_like(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _row_broadcast(a, b, "mul")
    av, bv = a.values, b.values
    return _make(av * bv, (a, b),
                 lambda g: (g * bv, _reduce_like(g * av, b.shape)))


def div(a, s) -> Tensor:
    """Divide a tensor by a scalar tensor."""
    a, s = as_tensor(a), as_tensor(s)
    if s.shape != ():
        raise ShapeError(f"div: divisor must be a scalar, got shape {s.shape}")
    av, sv = a.values, float(s.values)
    return _make(av / sv, (a, s),
                 lambda g: (g / sv, -np.sum(g * av) / sv ** 2))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.values * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.values > 0
    return _make(np.where(on, a.values, 0.0), (a,), lambda g: (g * on,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.values)
    return _make(np.abs(a.values), (a,), lambda g: (g * sign,))


def sqrt(a) -> Tensor:
    """Elementwise square root; the gradient at exactly 0 is taken as 0."""
    a = as_tensor(a)
    if np.any(a.values < 0):
        raise ValueError("sqrt of a negative value")
    r = np.sqrt(a.values)
    safe = np.where(r > 0, r, 1.0)
    return _make(r, (a,), lambda g: (np.where(r > 0, 0.5 * g / safe, 0.0),))


def log(a, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log of ``max(a, floor)``; clamped entries pass no gradient."""
    a = as_tensor(a)
    live = a.values > floor
    clamped = np.where(live, a.values, floor)
    return _make(np.log(clamped), (a,), lambda g: (np.where(live, g / clamped, 0.0),))


def softmax(a) -> Tensor:
    """Row-wise softmax of a B x C matrix (a vector is treated as one row)."""
    a = as_tensor(a)
    v = a.values
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _make(s, (a,), back)


def total(a, axis: int | None = None) -> Tensor:
    """Sum over one axis, or over everything when ``axis`` is None."""
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(a.values.sum(axis=axis), (a,), back)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.values.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    return scale(total(a, axis), 1.0 / n)


def take_rows(a, index) -> Tensor:
    """Select rows of a matrix by integer index (or boolean mask)."""
    a = as_tensor(a)
    idx = np.flatnonzero(index) if np.asarray(index).dtype == bool else np.asarray(index, dtype=int)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.values[idx], (a,), back)


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: need equal-length vectors, got {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    return _make(float(av @ bv), (a, b), lambda g: (g * bv, g * av))


def norm(a) -> Tensor:
    """Euclidean norm of a vector; gradient at the zero vector is taken as 0."""
    a = as_tensor(a)
    if a.values.ndim != 1:
        raise ShapeError(f"norm: expected a vector, got shape {a.shape}")
    n = float(np.sqrt(a.values @ a.values))
    av = a.values
    return _make(n, (a,), lambda g: (g * av / n if n > 0 else np.zeros_like(av),))


def standardize(a, eps: float = BN_EPS) -> Tensor:
    """Per-column batch standardization: ``(a - mean) / (std + eps)``."""
    a = as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeError(f"standardize: expected B x D, got {a.shape}")
    c = a.values - a.values.mean(axis=0)
    sd = np.sqrt(np.mean(c * c, axis=0))
    s = sd + eps
    y = c / s

    def back(g):
        gm = g.mean(axis=0)
        gc = np.mean(g * c, axis=0)
        safe = np.where(sd > 0, sd, 1.0)
        corr = np.where(sd > 0, gc / (s * s * safe), 0.0)
        return ((g - gm) / s - c * corr,)

    return _make(y, (a,), back)


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar loss with respect to leaves of its tape.

    Returns a mapping ``leaf -> gradient`` covering every leaf on the tape
    (or only ``wrt`` when given); leaves the loss does not depend on get an
    all-zero gradient.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    targets = list(wrt) if wrt is not None else (tape.leaves() if tape else [])
    if tape is None:
        return {t: np.zeros(t.shape) for t in targets}
    grads: dict[int, np.ndarray] = {loss.node: np.ones(())}
    for node in reversed(tape.nodes[: loss.node + 1]):
        g = grads.get(node.node)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if parent.tape is None:
                continue
            prev = grads.get(parent.node)
            grads[parent.node] = pg if prev is None else prev + pg
    out = {}
    for t in targets:
        g = grads.get(t.node) if t.tape is tape else None
        out[t] = np.zeros(t.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
    return out


def jvp_probe(head_fn: Callable[[Tensor], Tensor], z, v, epsilon: float | None = None) -> Tensor:
    """Directional derivative of ``head_fn`` at every row of ``z`` along ``v``.

    Computed as ``(head(z + eps*v) - head(z)) / eps`` with both evaluations
    recorded, so the result is differentiable in the head parameters and in
    ``z``.  Exact for heads that are affine in ``z``.  The default step is
    ``1e-3`` times the mean feature norm divided by ``|v|``.

    ``v`` is normally a constant array.  A tape-attached Tensor is also
    accepted, in which case gradient flows into ``v`` as well.
    """
    z = as_tensor(z)
    attached = isinstance(v, Tensor) and v.tape is not None
    vt = v if attached else Tensor(np.asarray(v.values if isinstance(v, Tensor) else v,
                                              dtype=np.float64))
    if z.values.ndim != 2 or vt.shape != (z.shape[1],):
        raise ShapeError(f"jvp_probe: direction of shape {vt.shape} does not match features {z.shape}")
    vn = float(np.linalg.norm(vt.values))
    if epsilon is None:
        if vn == 0.0:
            epsilon = 1.0
        else:
            feat = float(np.mean(np.linalg.norm(z.values, axis=1)))
            epsilon = JVP_REL_EPS * (feat if feat > 0 else 1.0) / vn
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = head_fn(z)
    moved = head_fn(add(z, scale(vt, epsilon)))
    return scale(sub(moved, base), 1.0 / epsilon)
