"""Dense tensors with reverse-mode differentiation.

Every primitive computes its forward value with numpy and, while gradient
recording is enabled, keeps a reference to its inputs together with a
closure that maps the output gradient to input gradients. ``backward``
orders the recorded graph topologically and accumulates gradients over
fan-out.

The set of primitives is deliberately small: exactly what the dual
encoders and the ranking loss need.
"""
from __future__ import annotations

import builtins
import contextlib
import struct
import warnings
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands do not conform for the requested primitive."""


class DegenerateInputWarning(UserWarning):
    """An input made an operation ill-defined (e.g. normalizing a zero vector)."""


_GRAD_ENABLED = True
_DEBUG_FINITE = False


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording them for ``backward``."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def debug_finite():
    """Raise ``FloatingPointError`` as soon as a primitive produces inf/nan."""
    global _DEBUG_FINITE
    prev = _DEBUG_FINITE
    _DEBUG_FINITE = True
    try:
        yield
    finally:
        _DEBUG_FINITE = prev


class Tensor:
    """A node of the computation graph.

    Leaves created with ``requires_grad=True`` are parameters; ``backward``
    fills their ``grad`` attribute.
    """

    __slots__ = ("data", "grad", "requires_grad", "kind", "_inputs", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.kind = "leaf"
        self._inputs: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(kind={self.kind}, shape={self.shape}, dtype={self.dtype})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        return Tensor(x)
    return Tensor(np.asarray(x, dtype=dtype))


def _record(kind: str, value: np.ndarray, inputs: Sequence[Tensor],
            backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    if _DEBUG_FINITE and not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite value produced by {kind}")
    out = Tensor(value)
    out.kind = kind
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    _check_broadcast("add", a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = as_tensor(a, b.dtype)
    b = as_tensor(b, a.dtype)
    _check_broadcast("sub", a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    _check_broadcast("mul", a, b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", a.data * a.dtype.type(c), (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix shared
    across the batch or has the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ, {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _record("transpose", np.swapaxes(a.data, -1, -2), (a,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    # np.maximum keeps NaN visible instead of mapping it to 0
    mask = a.data > 0
    return _record("relu", np.maximum(a.data, 0).astype(a.dtype, copy=False), (a,),
                   lambda g: (g * mask,))


def hinge(a: Tensor) -> Tensor:
    """max(0, x); kept separate from ``relu`` so loss graphs read clearly."""
    mask = a.data > 0
    return _record("hinge", np.maximum(a.data, 0).astype(a.dtype, copy=False), (a,),
                   lambda g: (g * mask,))


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis (row-softmax for matrices)."""
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("softmax over an empty axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", y, (a,), backward)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record("sum", np.asarray(a.data.sum(axis=axis)), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    if count == 0:
        raise ShapeError("mean over an empty axis")

    def backward(g):
        if axis is None:
            return (np.full(a.shape, g / count, dtype=a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, a.shape).copy(),)

    return _record("mean", np.asarray(a.data.mean(axis=axis)), (a,), backward)


def max(a: Tensor, axis: int) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; ties route the gradient to the lowest index."""
    if a.shape[axis] == 0:
        raise ShapeError("max over an empty axis")
    idx = np.argmax(a.data, axis=axis)
    value = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _record("max", value, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of nothing")
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", value, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        value = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {exc}") from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record("stack", value, tensors, backward)


def getitem(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""

    fancy = any(isinstance(i, (list, np.ndarray)) for i in
                (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        out = np.zeros_like(a.data)
        if fancy:
            np.add.at(out, index, g)
        else:
            out[index] = g
        return (out,)

    return _record("getitem", np.array(a.data[index]), (a,), backward)


def diagonal(a: Tensor) -> Tensor:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"diagonal needs a square matrix, got {a.shape}")
    n = a.shape[0]

    def backward(g):
        out = np.zeros_like(a.data)
        out[np.arange(n), np.arange(n)] = g
        return (out,)

    return _record("diagonal", np.diagonal(a.data).copy(), (a,), backward)


def offdiag_max(a: Tensor, axis: int) -> Tensor:
    """Per row (``axis=1``) or column (``axis=0``) maximum excluding the diagonal.

    Ties go to the lowest index.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"offdiag_max needs a square matrix, got {a.shape}")
    n = a.shape[0]
    if n < 2:
        raise ShapeError("offdiag_max needs at least two rows")
    masked = a.data.copy()
    masked[np.arange(n), np.arange(n)] = -np.inf
    idx = np.argmax(masked, axis=axis)
    lines = np.arange(n)
    rows, cols = (lines, idx) if axis == 1 else (idx, lines)
    value = a.data[rows, cols].copy()

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _record("offdiag_max", value, (a,), backward)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm.

    Zero slices stay zero (and get zero gradient); a
    ``DegenerateInputWarning`` is emitted when that happens.
    """
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    zero = norm == 0
    if np.any(zero):
        warnings.warn("l2_normalize received a zero vector", DegenerateInputWarning,
                      stacklevel=2)
    safe = np.where(zero, 1.0, norm).astype(a.dtype, copy=False)
    y = np.where(zero, 0.0, a.data / safe).astype(a.dtype, copy=False)

    def backward(g):
        proj = np.sum(g * y, axis=axis, keepdims=True)
        return (np.where(zero, 0.0, (g - y * proj) / safe),)

    return _record("l2_normalize", y, (a,), backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    return sum(mul(a, b))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "scale": scale, "matmul": matmul,
    "transpose": transpose, "reshape": reshape, "tanh": tanh, "sigmoid": sigmoid,
    "relu": relu, "hinge": hinge, "softmax": softmax, "sum": sum, "mean": mean,
    "max": max, "concat": concat, "stack": stack, "getitem": getitem,
    "diagonal": diagonal, "offdiag_max": offdiag_max, "l2_normalize": l2_normalize,
}


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Look up a primitive by name and apply it."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(.) to every leaf that requires a gradient.

    Leaf gradients are accumulated into ``leaf.grad`` and also returned as a
    mapping keyed by the leaf tensor.
    """
    if root.data.size != 1 or root.ndim > 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._inputs, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


def grad_check(fn: Callable[[Mapping[str, Tensor]], Tensor],
               params: Mapping[str, np.ndarray], step: float = 1e-6,
               names: Iterable[str] | None = None) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    ``fn`` maps named leaf tensors to a scalar tensor. The relative error of a
    coordinate is ``|a - n| / max(1, |a|, |n|)``. Arrays in ``params`` are
    perturbed in place and restored.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    out = fn(leaves)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite function value")
    backward(out)
    worst = 0.0
    for name in (params if names is None else names):
        leaf = leaves[name]
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        arr = leaf.data
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                f_plus = fn(leaves).item()
                flat[i] = orig - step
                f_minus = fn(leaves).item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"non-finite value while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2 * step)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / builtins.max(1.0, abs(a), abs(numeric))
            worst = builtins.max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# parameter checkpoint container

CHECKPOINT_MAGIC = b"DENC"
CHECKPOINT_VERSION = 1


def dump_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named tensors; values are stored as little-endian float32."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def parse_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            if name in out:
                raise ValueError(f"duplicate tensor name {name!r} in checkpoint")
            out[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise ValueError(f"truncated checkpoint: {exc}") from None
    if pos != len(blob):
        raise ValueError("trailing bytes after checkpoint tensors")
    return out
