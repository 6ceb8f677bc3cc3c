"""Dense tensors with tape-based reverse-mode differentiation.

Every continuous quantity the model and the losses touch lives in a
:class:`Tensor`. Operations record a closure that maps the output gradient to
input gradients; :func:`backward` walks the recorded graph in reverse
topological order and accumulates into ``.grad`` of every leaf that asked for
it.

Data is float32 by default. :func:`precision` switches the default dtype,
which :func:`finite_diff_check` uses to run its central differences in
float64 so the oracle is not swamped by rounding.
"""

from __future__ import annotations

import contextlib
import io
import math
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "NumericError",
    "precision",
    "tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take",
    "sum",
    "mean",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "tanh",
    "gelu",
    "square",
    "sqrt",
    "softmax_rows",
    "log_softmax",
    "layer_norm",
    "l2_normalize",
    "attention",
    "backward",
    "finite_diff_check",
    "save_params",
    "load_params",
]

_DEFAULT_DTYPE = np.float32
MASK_PENALTY = -1e9


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


class Tensor:
    """A node in the gradient graph.

    ``parents`` and ``backward_fn`` are empty for leaves. ``backward_fn``
    receives the gradient of the output and returns one gradient (or None)
    per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.name = name

    @classmethod
    def from_op(cls, data, parents: Sequence["Tensor"], backward_fn: Callable) -> "Tensor":
        """Build an op output. Gradient tracking is on iff any parent tracks."""
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out.backward_fn = backward_fn
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor.from_op(a.data / b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor.from_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor.from_op(out, (a,), lambda g: (0.5 * g / out,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _stable_sigmoid(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return Tensor.from_op(out.astype(x.dtype, copy=False), (a,), lambda g: (g * _stable_sigmoid(x),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU; smooth, so finite differences behave."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor.from_op(out, (a,), bw)


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must agree exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        if not (a.ndim >= 2 and b.ndim == 2 and a.shape[-1] == b.shape[0]):
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return Tensor.from_op(a.data @ b.data, (a, b), bw)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Reverse the last two axes, or apply an explicit permutation."""
    a = _as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    original = a.shape
    return Tensor.from_op(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(original),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)

    if axis != 0 and idx.ndim != 1:
        raise ShapeError("multi-dimensional indices are only supported along axis 0")

    def bw(g):
        out = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(out, idx, g)
        else:
            np.add.at(np.moveaxis(out, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (out,)

    return Tensor.from_op(np.take(a.data, idx, axis=axis), (a,), bw)


def _getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return Tensor.from_op(a.data[index], (a,), bw)


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return Tensor.from_op(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


# ---------------------------------------------------------------- composites


def _softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    return (e / denom).astype(x.dtype)


def softmax_rows(x, temperature: float = 1.0) -> Tensor:
    """Softmax along the last axis of ``x / temperature`` with max-subtraction."""
    if not temperature > 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    x = _as_tensor(x)
    out = _softmax_np(x.data / temperature)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot) / temperature,)

    return Tensor.from_op(out, (x,), bw)


def log_softmax(x) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True, dtype=np.float64)).astype(x.data.dtype)
    out = shifted - lse

    def bw(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor.from_op(out, (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv).astype(x.data.dtype)
    out = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        gx = (inv / d) * (
            d * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return (
            gx.astype(x.data.dtype),
            _unbroadcast(g * xhat, gain.shape),
            _unbroadcast(g, bias.shape),
        )

    return Tensor.from_op(out, (x, gain, bias), bw)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    x = _as_tensor(x)
    norm = sqrt(sum(square(x), axis=-1, keepdims=True) + eps)
    return div(x, norm)


def attention(q, k, v, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    ``mask`` is boolean with True meaning "blocked". A query row whose keys are
    all blocked falls back to attending to every key.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    scores = matmul(q, transpose(k)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        full = mask.all(axis=-1, keepdims=True)
        mask = mask & ~full
        scores = scores + np.where(mask, MASK_PENALTY, 0.0).astype(scores.data.dtype)
    return matmul(softmax_rows(scores), v)


# ---------------------------------------------------------------- backward


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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.astype(node.data.dtype) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def finite_diff_check(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    step: float = 1e-3,
    max_coords: int | None = 64,
    rng: np.random.Generator | None = None,
    fraction: float | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` rebuilds the graph from ``leaves`` on every call. Leaves are promoted
    to float64 for the duration of the check and restored afterwards. Up to
    ``max_coords`` coordinates per leaf are sampled (all when None); with
    ``fraction`` the per-leaf count is ceil(fraction * size) instead.
    """
    if not 0 < step <= 1e-1:
        raise DomainError(f"step must be in (0, 0.1], got {step}")
    rng = rng if rng is not None else np.random.default_rng(0)
    saved = [(leaf.data, leaf.grad) for leaf in leaves]
    worst = 0.0
    try:
        with precision(np.float64):
            for leaf in leaves:
                leaf.data = leaf.data.astype(np.float64)
                leaf.grad = None
            loss = f()
            if not np.all(np.isfinite(loss.data)):
                raise NumericError("loss is not finite")
            backward(loss)
            analytic = [np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad for leaf in leaves]
            for leaf, grad in zip(leaves, analytic):
                flat = leaf.data.reshape(-1)
                n = flat.size
                k = max_coords if fraction is None else max(1, math.ceil(fraction * n))
                coords = np.arange(n) if k is None or n <= k else rng.choice(n, k, replace=False)
                for c in coords:
                    original = flat[c]
                    flat[c] = original + step
                    up = float(f().data)
                    flat[c] = original - step
                    down = float(f().data)
                    flat[c] = original
                    if not (math.isfinite(up) and math.isfinite(down)):
                        raise NumericError("loss is not finite under perturbation")
                    central = (up - down) / (2 * step)
                    err = abs(grad.reshape(-1)[c] - central) / (abs(central) + 1e-8)
                    worst = max(worst, err)
    finally:
        for leaf, (data, grad) in zip(leaves, saved):
            leaf.data = data
            leaf.grad = grad
    return worst


# ---------------------------------------------------------------- serialization

_MAGIC = b"TSGPARAM"
_VERSION = 1


class FormatError(ValueError):
    pass


def save_params(fp, params: Iterable[tuple[str, np.ndarray | Tensor]], metadata: str = "") -> None:
    """Write named float32 arrays as little-endian records after a magic header.

    Layout: magic(8) version(u8) metadata_len(u32) metadata(utf-8) count(u32),
    then per record: name_len(u16) name ndim(u8) dims(u32 * ndim) payload(f32 LE).
    """
    params = [(name, np.asarray(p.data if isinstance(p, Tensor) else p)) for name, p in params]
    meta = metadata.encode("utf-8")
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<BI", _VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(params)))
    for name, arr in params:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = buf.getvalue()
    if hasattr(fp, "write"):
        fp.write(payload)
    else:
        with open(fp, "wb") as fh:
            fh.write(payload)


def load_params(fp) -> tuple[dict[str, np.ndarray], str]:
    """Inverse of :func:`save_params`; returns (name -> array, metadata)."""
    if hasattr(fp, "read"):
        data = fp.read()
    else:
        with open(fp, "rb") as fh:
            data = fh.read()
    if data[:8] != _MAGIC:
        raise FormatError("not a parameter file (bad magic)")
    version, meta_len = struct.unpack_from("<BI", data, 8)
    if version != _VERSION:
        raise FormatError(f"unsupported parameter file version {version}")
    pos = 13
    metadata = data[pos : pos + meta_len].decode("utf-8")
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
        out[name] = arr
    return out, metadata
