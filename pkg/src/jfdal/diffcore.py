"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records primitive operations in execution order.  Tensors
created through :meth:`Tape.leaf` are differentiable; :meth:`Tape.const`
tensors (and results computed only from constants) are not recorded.

    tape = Tape()
    w = tape.leaf(np.ones((3, 2)))
    x = tape.const(np.ones((2, 3)))
    loss = sum_(relu(matmul(x, w)))
    grads = backward(loss)        # {w: ndarray of shape (3, 2)}

Only scalar-to-tensor broadcasting is supported.  Row-vector bias addition
goes through the explicit :func:`add_rowvec` primitive.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "mean",
    "sum_",
    "l2_norm",
    "exp",
    "log",
    "softmax_cross_entropy",
    "transpose",
    "add_rowvec",
    "row_norms",
    "normalize_rows",
    "take_rows",
    "concat_rows",
    "numerical_gradient",
    "check_gradients",
]


class ShapeError(ValueError):
    pass


class Tensor:
    """An immutable array value, optionally attached to a tape."""

    __slots__ = ("data", "tape", "requires_grad", "name")

    def __init__(self, data, tape: "Tape | None" = None, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        arr.setflags(write=False)
        self.data = arr
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations for one backward pass.

    Nodes are appended in execution order, which is a topological order
    because an operation can only consume tensors that already exist.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []

    def leaf(self, data, name: str | None = None) -> Tensor:
        t = Tensor(data, tape=self, requires_grad=True, name=name)
        self.leaves.append(t)
        return t

    def const(self, data) -> Tensor:
        return Tensor(data, tape=self)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.nodes.append(_Node(out, inputs, vjp))


def _as_tensor(x, tape: Tape | None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, tape=tape)


def _tape_of(*xs: Tensor) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("tensors belong to different tapes")
            tape = x.tape
    return tape


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, tape=tape, requires_grad=needs)
    if needs:
        tape._record(out, inputs, vjp)
    return out


def _same_or_scalar(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a, None), _as_tensor(b, None)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ B.T, A.T @ g

    return _make(A @ B, (a, b), vjp)


def add(a, b) -> Tensor:
    tape = _tape_of(*(x for x in (a, b) if isinstance(x, Tensor)))
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _same_or_scalar(a, b, "add")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    tape = _tape_of(*(x for x in (a, b) if isinstance(x, Tensor)))
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _same_or_scalar(a, b, "sub")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _make(a.data - b.data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal shapes (or one scalar tensor)."""
    tape = _tape_of(*(x for x in (a, b) if isinstance(x, Tensor)))
    a, b = _as_tensor(a, tape), _as_tensor(b, tape)
    _same_or_scalar(a, b, "mul")
    A, B = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _make(A * B, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return (c * g,)

    return _make(c * a.data, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient 0 at exactly 0

    def vjp(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), vjp)


def sum_(a: Tensor) -> Tensor:
    shape = a.shape

    def vjp(g):
        return (np.full(shape, float(g)),)

    return _make(np.asarray(a.data.sum()), (a,), vjp)


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    if n == 0:
        raise ShapeError("mean: empty tensor")

    def vjp(g):
        return (np.full(shape, float(g) / n),)

    return _make(np.asarray(a.data.mean()), (a,), vjp)


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of a vector (any shape is flattened)."""
    x = a.data
    n = float(np.sqrt(np.sum(x * x)))

    def vjp(g):
        if n == 0.0:
            return (np.zeros_like(x),)
        return (float(g) * x / n,)

    return _make(np.asarray(n), (a,), vjp)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def vjp(g):
        return (g * y,)

    return _make(y, (a,), vjp)


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log: non-positive input")

    def vjp(g):
        return (g / x,)

    return _make(np.log(x), (a,), vjp)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer labels."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected a matrix, got shape {z.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {z.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError("softmax_cross_entropy: label out of range")
    rows = np.arange(z.shape[0])
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[rows, labels]))

    def vjp(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (float(g) * p / z.shape[0],)

    return _make(np.asarray(loss), (logits,), vjp)


# ---------------------------------------------------------------------------
# structural helpers (also primitives: each has its own backward rule)
# ---------------------------------------------------------------------------


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")

    def vjp(g):
        return (g.T,)

    return _make(a.data.T, (a,), vjp)


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """x[i, :] + b for a B x H matrix and an H vector."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_rowvec: incompatible shapes {x.shape} and {b.shape}")

    def vjp(g):
        return g, g.sum(axis=0)

    return _make(x.data + b.data, (x, b), vjp)


def row_norms(x: Tensor) -> Tensor:
    """Per-row Euclidean norms of a matrix; zero rows get subgradient 0."""
    if x.data.ndim != 2:
        raise ShapeError(f"row_norms: expected a matrix, got shape {x.shape}")
    X = x.data
    n = np.sqrt(np.sum(X * X, axis=1))

    def vjp(g):
        safe = np.where(n > 0, n, 1.0)
        coef = np.where(n > 0, g / safe, 0.0)
        return (coef[:, None] * X,)

    return _make(n, (x,), vjp)


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm.  Zero rows are rejected."""
    if x.data.ndim != 2:
        raise ShapeError(f"normalize_rows: expected a matrix, got shape {x.shape}")
    X = x.data
    n = np.sqrt(np.sum(X * X, axis=1, keepdims=True))
    if np.any(n == 0):
        raise ValueError("normalize_rows: zero-norm row")
    Y = X / n

    def vjp(g):
        return ((g - Y * np.sum(g * Y, axis=1, keepdims=True)) / n,)

    return _make(Y, (x,), vjp)


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), vjp)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    widths = {p.shape[1:] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: incompatible shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``root`` with respect to every leaf on its tape.

    Leaves the root does not depend on receive zero gradients.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    tape = root.tape
    if tape is None:
        raise ValueError("backward: root is not attached to a tape")
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=DTYPE)
    return {leaf: grads.get(id(leaf), np.zeros(leaf.shape)) for leaf in tape.leaves}


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def numerical_gradient(fn: Callable[..., float], arrays: Sequence[np.ndarray], eps: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of a scalar function of several arrays."""
    arrays = [np.array(a, dtype=DTYPE) for a in arrays]
    out = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(*arrays)
            flat[i] = orig - eps
            fm = fn(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def check_gradients(
    build: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    eps: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-7,
) -> float:
    """Compare analytic gradients of ``build`` with central differences.

    ``build`` receives one leaf tensor per array and returns a scalar tensor.
    Returns the worst elementwise violation ratio; values <= 1 pass, i.e.
    ``|analytic - numeric| <= atol + rtol * |numeric|`` everywhere.
    """

    def value(*arrs):
        tape = Tape()
        return float(build(*[tape.leaf(a) for a in arrs]).data)

    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    grads = backward(build(*leaves))
    numeric = numerical_gradient(value, arrays, eps)
    worst = 0.0
    for leaf, num in zip(leaves, numeric):
        ana = grads[leaf]
        ratio = np.abs(ana - num) / (atol + rtol * np.abs(num))
        worst = max(worst, float(ratio.max(initial=0.0)))
    return worst
