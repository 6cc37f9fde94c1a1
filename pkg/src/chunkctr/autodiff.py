"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

One tensor type, the operations the model actually needs, and a
finite-difference checker. A fresh graph is built during every forward
pass and discarded after backward(); leaf tensors keep their .grad
buffers across graphs so an optimizer can consume them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import GraphError, InvariantError, ShapeError

# Additive mask sentinel standing in for -inf: large enough that exp()
# underflows to exactly 0 after row-max subtraction, small enough that
# sums stay finite and NaN-free.
MASK_NEG_INF = -1e30
_MASKED_BELOW = MASK_NEG_INF / 2

# float64 sigmoid saturates to exactly 0.0 or 1.0 near |x| ~ 37; outputs
# are pinned inside the open interval instead.
_SIGMOID_CLAMP = 1e-15

BCE_CLAMP = 1e-7


def f32_grid(a: np.ndarray) -> np.ndarray:
    """Snap float64 values onto the float32-representable grid.

    Persisted tensors are stored on disk as little-endian f32, so any
    value that can reach a checkpoint or cache is kept f32-representable
    in memory; save/load round-trips are then bit-exact.
    """
    return np.asarray(a, dtype=np.float32).astype(np.float64)


class Tensor:
    """A dense 2-D float64 array acting as a node in a computation graph.

    Leaves (parameters and inputs) have no parents and carry a
    zero-initialized .grad buffer. Operations return fresh interior nodes
    whose backward closure routes the incoming gradient into the
    operands' grads; interior grads are allocated lazily during
    backward() since most exist only for one pass.
    """

    __slots__ = ("value", "grad", "op", "_parents", "_backward")

    def __init__(self, value) -> None:
        arr = np.array(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"expected a 2-D array, got shape {arr.shape}")
        self.value = arr
        self.grad = np.zeros_like(arr)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad[...] = 0.0

    def backward(self) -> None:
        """Accumulate gradients of this 1x1 scalar into every ancestor.

        Nodes are visited exactly once, in reverse topological order.
        """
        if self.value.shape != (1, 1):
            raise GraphError(f"backward() needs a 1x1 loss, got shape {self.value.shape}")
        order = _topo_order(self)
        _accum(self, np.ones((1, 1)))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, op={self.op})"


def _node(value: np.ndarray, parents: tuple, backward: Callable[[np.ndarray], None], op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.op = op
    out._parents = parents
    out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution, allocating on first touch.

    np.array copies, so a lazily claimed grad never aliases the caller's
    buffer or a view of it.
    """
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad += g


def _grad_buffer(t: Tensor) -> np.ndarray:
    """Grad buffer for closures that scatter into sub-regions."""
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    return t.grad


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; gradient flows to both operands."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def bw(g: np.ndarray) -> None:
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return _node(a.value @ b.value, (a, b), bw, "matmul")


def matmul_nt(a: Tensor, b: Tensor, k: float = 1.0) -> Tensor:
    """Fused k * (a @ b.T); one node for the attention score stage."""
    if a.cols != b.cols:
        raise ShapeError(f"matmul_nt: column widths differ, {a.shape} vs {b.shape}")

    def bw(g: np.ndarray) -> None:
        _accum(a, k * (g @ b.value))
        _accum(b, k * (g.T @ a.value))

    return _node(k * (a.value @ b.value.T), (a, b), bw, "matmul_nt")


def transpose(a: Tensor) -> Tensor:
    def bw(g: np.ndarray) -> None:
        _accum(a, g.T)

    return _node(np.ascontiguousarray(a.value.T), (a,), bw, "transpose")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")

    def bw(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g)

    return _node(a.value + b.value, (a, b), bw, "add")


def add_row(x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1 x cols bias row to every row of x (the only broadcast allowed)."""
    if bias.shape != (1, x.cols):
        raise ShapeError(f"add_row: bias shape {bias.shape} does not match row width {x.cols}")

    def bw(g: np.ndarray) -> None:
        _accum(x, g)
        _accum(bias, g.sum(axis=0, keepdims=True))

    return _node(x.value + bias.value, (x, bias), bw, "add_row")


def scale(x: Tensor, k: float) -> Tensor:
    def bw(g: np.ndarray) -> None:
        _accum(x, k * g)

    return _node(k * x.value, (x,), bw, "scale")


def relu(x: Tensor) -> Tensor:
    positive = x.value > 0.0

    def bw(g: np.ndarray) -> None:
        _accum(x, g * positive)

    return _node(np.where(positive, x.value, 0.0), (x,), bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function with output pinned strictly inside (0, 1)."""
    s = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    s = np.clip(s, _SIGMOID_CLAMP, 1.0 - _SIGMOID_CLAMP)

    def bw(g: np.ndarray) -> None:
        _accum(x, g * s * (1.0 - s))

    return _node(s, (x,), bw, "sigmoid")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to mean 0 / variance 1, then an affine map.

    eps is added to the variance before the square root, so constant rows
    normalize to zero instead of dividing by zero.
    """
    n = x.cols
    if n == 0:
        raise ShapeError("layer_norm: rows have zero width")
    if gain.shape != (1, n) or bias.shape != (1, n):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must be (1, {n})"
        )
    if eps < 0.0:
        raise ShapeError(f"layer_norm: eps must be >= 0, got {eps}")
    mu = x.value.mean(axis=1, keepdims=True)
    centered = x.value - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std

    def bw(g: np.ndarray) -> None:
        d_normed = g * gain.value
        _accum(
            x,
            inv_std
            * (
                d_normed
                - d_normed.mean(axis=1, keepdims=True)
                - normed * (d_normed * normed).mean(axis=1, keepdims=True)
            ),
        )
        _accum(gain, (g * normed).sum(axis=0, keepdims=True))
        _accum(bias, g.sum(axis=0, keepdims=True))

    return _node(normed * gain.value + bias.value, (x, gain, bias), bw, "layer_norm")


def masked_softmax_rows(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax of scores + mask with exact zeros at masked slots.

    Mask entries are 0 (visible) or MASK_NEG_INF (hidden). Every row must
    keep at least one visible entry; the bucket masks guarantee this by
    never masking the diagonal.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != scores.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match scores {scores.shape}")
    visible = mask > _MASKED_BELOW
    if not visible.any(axis=1).all():
        raise InvariantError("masked_softmax_rows: a row is fully masked")
    shifted = scores.value + mask
    shifted -= shifted.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    weights *= visible  # exact zeros regardless of score magnitude
    probs = weights / weights.sum(axis=1, keepdims=True)

    def bw(g: np.ndarray) -> None:
        inner = (g * probs).sum(axis=1, keepdims=True)
        _accum(scores, probs * (g - inner))

    return _node(probs, (scores,), bw, "masked_softmax_rows")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add_row(matmul(x, w), b)


def concat_cols(*xs: Tensor) -> Tensor:
    """Horizontal concatenation; operands must share the row count."""
    rows = xs[0].rows
    for x in xs[1:]:
        if x.rows != rows:
            raise ShapeError(f"concat_cols: row counts differ, {[x.shape for x in xs]}")
    offsets = np.cumsum([0] + [x.cols for x in xs])

    def bw(g: np.ndarray) -> None:
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            _accum(x, g[:, lo:hi])

    return _node(np.concatenate([x.value for x in xs], axis=1), tuple(xs), bw, "concat_cols")


def concat_rows(*xs: Tensor) -> Tensor:
    """Vertical concatenation; operands must share the column count."""
    cols = xs[0].cols
    for x in xs[1:]:
        if x.cols != cols:
            raise ShapeError(f"concat_rows: column counts differ, {[x.shape for x in xs]}")
    offsets = np.cumsum([0] + [x.rows for x in xs])

    def bw(g: np.ndarray) -> None:
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            _accum(x, g[lo:hi])

    return _node(np.concatenate([x.value for x in xs], axis=0), tuple(xs), bw, "concat_rows")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.rows:
        raise ShapeError(f"slice_rows: [{start}, {stop}) out of range for {x.rows} rows")

    def bw(g: np.ndarray) -> None:
        _grad_buffer(x)[start:stop] += g

    return _node(x.value[start:stop], (x,), bw, "slice_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.cols:
        raise ShapeError(f"slice_cols: [{start}, {stop}) out of range for {x.cols} columns")

    def bw(g: np.ndarray) -> None:
        _grad_buffer(x)[:, start:stop] += g

    return _node(x.value[:, start:stop], (x,), bw, "slice_cols")


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Row gather: output row k is input row index[k]. Repeats are allowed."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: index must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.rows):
        raise ShapeError(f"gather_rows: index out of range for {x.rows} rows")
    # fancy-index += is valid (and much faster than add.at) iff no repeats
    unique = idx.size == 0 or np.bincount(idx, minlength=x.rows).max() <= 1

    def bw(g: np.ndarray) -> None:
        buf = _grad_buffer(x)
        if unique:
            buf[idx] += g
        else:
            np.add.at(buf, idx, g)

    return _node(x.value[idx], (x,), bw, "gather_rows")


def pad_rows(x: Tensor, count: int) -> Tensor:
    """Append `count` zero rows; their gradient is dropped."""
    if count < 0:
        raise ShapeError(f"pad_rows: count must be >= 0, got {count}")
    if count == 0:
        value = x.value.copy()
    else:
        value = np.concatenate([x.value, np.zeros((count, x.cols))], axis=0)
    rows = x.rows

    def bw(g: np.ndarray) -> None:
        _accum(x, g[:rows])

    return _node(value, (x,), bw, "pad_rows")


def repeat_rows(x: Tensor, count: int) -> Tensor:
    """Tile a single row `count` times; gradients sum back into the row."""
    if x.rows != 1:
        raise ShapeError(f"repeat_rows: expected one row, got {x.rows}")
    if count < 1:
        raise ShapeError(f"repeat_rows: count must be >= 1, got {count}")

    def bw(g: np.ndarray) -> None:
        _accum(x, g.sum(axis=0, keepdims=True))

    return _node(np.repeat(x.value, count, axis=0), (x,), bw, "repeat_rows")


def mean_rows(x: Tensor) -> Tensor:
    """Average all rows into a 1 x cols vector."""
    if x.rows == 0:
        raise ShapeError("mean_rows: no rows to average")
    rows = x.rows

    def bw(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(g / rows, x.value.shape))

    return _node(x.value.mean(axis=0, keepdims=True), (x,), bw, "mean_rows")


def sum_all(x: Tensor) -> Tensor:
    """Sum every entry into a 1x1 scalar."""

    def bw(g: np.ndarray) -> None:
        _accum(x, np.broadcast_to(g[0, 0], x.value.shape))

    return _node(np.array([[x.value.sum()]]), (x,), bw, "sum_all")


def binary_cross_entropy(pred: Tensor, labels: np.ndarray) -> Tensor:
    """Mean BCE of an (N, 1) prediction column against 0/1 labels.

    Predictions are clamped to [1e-7, 1 - 1e-7] before the logs; entries
    that were clamped receive zero gradient.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if pred.rows == 0:
        raise ShapeError("binary_cross_entropy: empty batch")
    if pred.shape != y.shape:
        raise ShapeError(f"binary_cross_entropy: preds {pred.shape} vs labels {y.shape}")
    p = np.clip(pred.value, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (pred.value >= BCE_CLAMP) & (pred.value <= 1.0 - BCE_CLAMP)
    n = pred.rows
    value = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean()

    def bw(g: np.ndarray) -> None:
        _accum(pred, g[0, 0] * inside * (p - y) / (p * (1.0 - p) * n))

    return _node(np.array([[value]]), (pred,), bw, "binary_cross_entropy")


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient comparison."""

    h: float
    tol: float
    max_rel_error: float
    per_param: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare reverse-mode gradients of f() against central differences.

    f must rebuild its graph from the given leaves on every call. The
    relative error uses max(|analytic|, |numeric|, 1e-8) as denominator,
    so parameters unused by f report an exact zero error.
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError(f"grad_check: h must lie in [1e-6, 1e-3], got {h}")
    named = list(params)
    for _, p in named:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in named}

    per_param: dict[str, float] = {}
    worst = 0.0
    for name, p in named:
        flat = p.value.reshape(-1)
        ana = analytic[name].reshape(-1)
        worst_here = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().value[0, 0]
            flat[i] = orig - h
            f_minus = f().value[0, 0]
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(numeric), abs(ana[i]), 1e-8)
            worst_here = max(worst_here, abs(numeric - ana[i]) / denom)
        per_param[name] = worst_here
        worst = max(worst, worst_here)
    return GradCheckReport(h=h, tol=tol, max_rel_error=worst, per_param=per_param)
