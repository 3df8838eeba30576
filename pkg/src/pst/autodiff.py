"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a contiguous row-major numpy array (float32 or float64)
and optionally records how it was produced. ``backward`` replays the
recorded operations in reverse topological order, summing gradient
contributions wherever a value is used more than once. Every operation
validates that its output is finite; NaN or Inf anywhere raises
``NonFiniteError`` immediately instead of corrupting a training run.

Broadcasting is supported over leading batch dimensions only (numpy
rules); gradients of broadcast operands are reduced back to the operand
shape by summation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)
DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Shapes or axes do not satisfy an operation's contract."""


class ContractError(ValueError):
    """A non-shape precondition was violated."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(DEFAULT_DTYPE)
    # asarray keeps 0-d arrays 0-d; ascontiguousarray would promote to (1,)
    return np.asarray(arr, order="C")


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """Immutable n-dimensional value, optionally part of an autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        self.data = _as_float_array(data, dtype)
        _check_finite(self.data, "tensor creation")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{grad})"

    # operator sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, _promote(other, self.dtype))

    def __radd__(self, other):
        return add(_promote(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _promote(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _promote(other, self.dtype))

    def __rmul__(self, other):
        return mul(_promote(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _promote(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _from_op(data: np.ndarray, parents: Sequence[Tensor], bwd, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, order="C")
    _check_finite(out.data, op)
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
    return out


def _check_same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise DimensionError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for ndim {ndim}")
    return axis % ndim


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the dimensions numpy broadcast up from ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural operations


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape}: {exc}") from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape}: {exc}") from None

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _from_op(data, (a, b), bwd, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    if not math.isfinite(c):
        raise ContractError(f"scale: non-finite factor {c}")

    def bwd(g):
        return (g * c,)

    return _from_op(x.data * c, (x,), bwd, "scale")


def div_scalar(x: Tensor, c: float) -> Tensor:
    # true division, not multiply-by-reciprocal: keeps x/c exact in the float
    # representation, which downstream scale checks assert bitwise
    c = float(c)
    if not math.isfinite(c) or c == 0.0:
        raise ContractError(f"div_scalar: divisor must be finite and nonzero, got {c}")

    def bwd(g):
        return (g / c,)

    return _from_op(x.data / c, (x,), bwd, "div_scalar")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _from_op(np.where(mask, x.data, 0), (x,), bwd, "relu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions {a.shape} @ {b.shape}")
    _check_same_dtype("matmul", a, b)
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(f"matmul: shapes {a.shape} @ {b.shape}: {exc}") from None

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _from_op(data, (a, b), bwd, "matmul")


def transpose_last2(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise DimensionError(f"transpose_last2: needs ndim >= 2, got {x.shape}")

    def bwd(g):
        return (np.swapaxes(g, -1, -2),)

    return _from_op(np.swapaxes(x.data, -1, -2), (x,), bwd, "transpose_last2")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape {x.shape} -> {shape}: {exc}") from None

    def bwd(g):
        return (g.reshape(x.shape),)

    return _from_op(data, (x,), bwd, "reshape")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat: empty input list")
    _check_same_dtype("concat", *tensors)
    axis = _norm_axis(axis, tensors[0].ndim, "concat")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat along axis {axis}: {exc}") from None
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _from_op(data, tuple(tensors), bwd, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    """Split into consecutive chunks of the given sizes along ``axis``."""
    axis = _norm_axis(axis, x.ndim, "split")
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split: sizes {list(sizes)} do not cover axis {axis} of {x.shape}")
    parts = []
    offset = 0
    for size in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(offset, offset + size)
        sl = tuple(sl)

        def bwd(g, sl=sl):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[sl] = g
            return (full,)

        parts.append(_from_op(x.data[sl], (x,), bwd, "split"))
        offset += size
    return parts


def max_over_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, x.ndim, "max_over_axis")
    if x.shape[axis] == 0:
        raise DimensionError("max_over_axis: empty axis")
    data = x.data.max(axis=axis, keepdims=keepdims)
    # ties route the gradient to the lowest index (argmax picks the first)
    idx = np.argmax(x.data, axis=axis)

    def bwd(g):
        if keepdims:
            g = np.squeeze(g, axis=axis)
        full = np.zeros(x.shape, dtype=g.dtype)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return _from_op(data, (x,), bwd, "max_over_axis")


def mean_over_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, x.ndim, "mean_over_axis")
    if x.shape[axis] == 0:
        raise DimensionError("mean_over_axis: empty axis")
    n = x.shape[axis]

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _from_op(x.data.mean(axis=axis, keepdims=keepdims), (x,), bwd, "mean_over_axis")


def sum_over_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, x.ndim, "sum_over_axis")

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _from_op(x.data.sum(axis=axis, keepdims=keepdims), (x,), bwd, "sum_over_axis")


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bwd, "sum_all")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Index rows along axis 0; gradient scatter-adds back to the source."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def bwd(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, idx.ravel(), g.reshape(idx.size, *x.shape[1:]))
        return (full,)

    return _from_op(x.data[idx], (x,), bwd, "gather_rows")


# ---------------------------------------------------------------------------
# normalization and attention primitives


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by per-row max subtraction."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax_rows: empty last dimension in {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _from_op(y, (x,), bwd, "softmax_rows")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match feature width {d}"
        )
    _check_same_dtype("layer_norm", x, gain, bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    y = xhat * gain.data + bias.data

    def bwd(g):
        gh = g * gain.data
        dx = inv_std * (
            gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        dgain = (g * xhat).reshape(-1, d).sum(axis=0)
        dbias = g.reshape(-1, d).sum(axis=0)
        return dx, dgain, dbias

    return _from_op(y, (x, gain, bias), bwd, "layer_norm")


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_class: Optional[int] = None) -> Tensor:
    """Mean negative log-softmax of the true class over non-ignored rows."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be [rows, classes], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: labels shape {labels.shape} vs logits {logits.shape}")
    n_classes = logits.shape[1]
    keep = np.ones(labels.shape, dtype=bool)
    if ignore_class is not None:
        keep = labels != ignore_class
    if labels[keep].size == 0:
        raise ContractError("cross_entropy: every row is ignored")
    if labels[keep].min() < 0 or labels[keep].max() >= n_classes:
        raise ContractError("cross_entropy: label outside [0, num_classes)")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + logits.data.max(axis=-1)
    safe_labels = np.where(keep, labels, 0)
    nll = lse - logits.data[np.arange(labels.size), safe_labels]
    n_kept = int(keep.sum())
    loss = np.asarray(nll[keep].mean(), dtype=logits.dtype)

    def bwd(g):
        p = np.exp(shifted)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(labels.size), safe_labels] -= 1.0
        p[~keep] = 0.0
        return (p * (g / n_kept),)

    return _from_op(loss, (logits,), bwd, "cross_entropy")


# ---------------------------------------------------------------------------
# parameters and shared MLPs


class Param:
    """A trainable tensor; its gradient is populated by ``backward``."""

    __slots__ = ("value", "trainable")

    def __init__(self, value, dtype=None, trainable: bool = True):
        self.value = value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)
        self.value.requires_grad = True
        self.trainable = trainable

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self.value.grad is None:
            return np.zeros(self.value.shape, dtype=self.value.dtype)
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad = None

    def assign(self, data: np.ndarray) -> None:
        """Replace the value with fresh data of the same shape."""
        if data.shape != self.value.shape:
            raise DimensionError(f"assign: shape {data.shape} vs param {self.value.shape}")
        new = Tensor(data, dtype=self.value.dtype)
        new.requires_grad = True
        self.value = new


@dataclass
class DenseLayer:
    """Affine transform plus optional activation, shared across rows."""

    w: Param
    b: Param
    act: Optional[str] = None  # "relu" or None


def make_dense(rng: np.random.Generator, din: int, dout: int, act: Optional[str] = None,
               dtype=DEFAULT_DTYPE) -> DenseLayer:
    bound = 1.0 / math.sqrt(din)
    w = rng.uniform(-bound, bound, size=(din, dout))
    b = rng.uniform(-bound, bound, size=(dout,))
    return DenseLayer(Param(w, dtype=dtype), Param(b, dtype=dtype), act)


def make_mlp(rng: np.random.Generator, din: int, widths: Sequence[int],
             dtype=DEFAULT_DTYPE, hidden_act: str = "relu",
             final_act: Optional[str] = "relu") -> list[DenseLayer]:
    layers = []
    cur = din
    for i, width in enumerate(widths):
        act = final_act if i == len(widths) - 1 else hidden_act
        layers.append(make_dense(rng, cur, width, act, dtype))
        cur = width
    return layers


def mlp_forward(x: Tensor, layers: Sequence[DenseLayer]) -> Tensor:
    """Apply a pointwise MLP along the last axis."""
    for layer in layers:
        x = add(matmul(x, layer.w.value), layer.b.value)
        if layer.act == "relu":
            x = relu(x)
        elif layer.act is not None:
            raise ContractError(f"unknown activation {layer.act!r}")
    return x


# ---------------------------------------------------------------------------
# reverse pass


class Tape:
    """Topologically ordered op records reachable from one root tensor."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.nodes = order  # parents strictly precede consumers

    def run(self, root: Tensor) -> None:
        root.grad = np.ones(root.shape, dtype=root.dtype)
        for node in reversed(self.nodes):
            if node._bwd is None or node.grad is None:
                continue
            contributions = node._bwd(node.grad)
            for parent, contrib in zip(node._parents, contributions):
                if not parent.requires_grad or contrib is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.asarray(contrib, order="C")
                else:
                    parent.grad = parent.grad + contrib
            # consumers have all been visited; free intermediate storage
            node.grad = None


def backward(loss: Tensor, params: Optional[Iterable[Param]] = None) -> None:
    """Populate gradients of everything reachable from a scalar loss.

    Params listed in ``params`` but not reached by the graph get zero
    gradients so callers can treat the result uniformly.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any tracked tensor")
    tape = Tape(loss)
    tape.run(loss)
    if params is not None:
        for p in params:
            if p.value.grad is None:
                p.value.grad = np.zeros(p.value.shape, dtype=p.value.dtype)


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()
