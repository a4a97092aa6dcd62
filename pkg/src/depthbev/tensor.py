"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every feature map, weight, and loss in the package is a :class:`Tensor`.
Ops executed while a :class:`GradTape` is active are recorded so that
``tape.backward(loss)`` can fill per-tensor gradient buffers; without an
active tape the same ops are plain numpy evaluations, which keeps large
inference-only runs memory bounded.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError, ValidationError

Array = np.ndarray

_active = threading.local()


def _check_finite(data: Array, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """A dense n-dimensional float64 array, optionally tracked for gradients.

    ``requires_grad`` marks leaves (weights, probed inputs); intermediate
    results are tracked through the active tape instead.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalar operands stay python floats
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor/tensor division is not supported; use reciprocal ops")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Build a Tensor; passthrough if ``data`` already is one."""
    if isinstance(data, Tensor):
        return data
    return Tensor(data, requires_grad=requires_grad)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple, backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradTape:
    """Ordered record of executed ops plus per-tensor gradient buffers.

    Use as a context manager; ops run inside record themselves when any
    input is tracked. One tape per worker thread; a tape must not be
    shared across threads.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._grads: dict[int, Array] = {}
        self._ran_backward = False

    def __enter__(self) -> "GradTape":
        if getattr(_active, "tape", None) is not None:
            raise UsageError("a GradTape is already active on this thread")
        _active.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _active.tape = None
        return False

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._produced

    def _record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self._nodes.append(_Node(out, inputs, backward))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> None:
        """Populate gradient buffers of every tensor reachable from ``loss``."""
        if loss.data.shape != ():
            raise UsageError(f"backward expects a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise UsageError("loss is not an output recorded on this tape")
        if self._ran_backward:
            raise UsageError("backward may run only once per tape")
        self._ran_backward = True

        grads = self._grads
        grads[id(loss)] = np.ones((), dtype=np.float64)
        for node in reversed(self._nodes):
            g_out = grads.get(id(node.out))
            if g_out is None:
                continue
            in_grads = node.backward(g_out)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not self._tracks(inp):
                    continue
                buf = grads.get(id(inp))
                if buf is None:
                    grads[id(inp)] = np.array(g, dtype=np.float64, copy=True)
                else:
                    buf += g

    def grad(self, t: Tensor) -> Array | None:
        """Gradient buffer of ``t`` after backward; None if unreachable."""
        return self._grads.get(id(t))


def active_tape() -> GradTape | None:
    return getattr(_active, "tape", None)


def _finish(op: str, out_data: Array, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Validate, wrap, and (if tracked) record one op result."""
    _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(tape._tracks(t) for t in inputs):
        tape._record(out, tuple(inputs), backward)
    return out


def custom_op(name: str, out_data: Array, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Record an externally computed op (geometry kernels use this).

    ``backward(grad_out) -> per-input gradient arrays (or None)``.
    """
    return _finish(name, np.asarray(out_data, dtype=np.float64), inputs, backward)


# ---------------------------------------------------------------------------
# elementwise ops


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _finish("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _finish("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _finish("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _finish("scale", a.data * s, (a,), lambda g: (g * s,))


def shift(a: Tensor, s: float) -> Tensor:
    return _finish("shift", a.data + float(s), (a,), lambda g: (g,))


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _finish("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NumericError
        out = np.exp(a.data)
    return _finish("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(ad)
    return _finish("log", out, (a,), lambda g: (g / ad,))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    out = np.logaddexp(0.0, ad)

    def bw(g):
        s = np.empty_like(ad)
        pos = ad >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
        e = np.exp(ad[~pos])
        s[~pos] = e / (1.0 + e)
        return (g * s,)

    return _finish("softplus", out, (a,), bw)


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a fixed exponent; requires a >= 0 when p is fractional."""
    p = float(p)
    ad = a.data
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.power(ad, p)

    def bw(g):
        return (g * p * np.power(ad, p - 1.0),)

    return _finish("power", out, (a,), bw)


def smooth_l1(a: Tensor) -> Tensor:
    """Elementwise huber: 0.5*x**2 inside |x|<1, |x|-0.5 outside."""
    ad = a.data
    small = np.abs(ad) < 1.0
    out = np.where(small, 0.5 * ad * ad, np.abs(ad) - 0.5)
    return _finish("smooth_l1", out, (a,), lambda g: (g * np.where(small, ad, np.sign(ad)),))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    out = a.data.reshape(shape)
    return _finish("reshape", np.ascontiguousarray(out), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects rank 2, got shape {a.shape}")
    return _finish("transpose", np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def concat_last(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat_last of zero tensors")
    lead = parts[0].data.shape[:-1]
    for p in parts:
        if p.data.shape[:-1] != lead:
            raise DimensionError("concat_last: leading shapes differ")
    widths = [p.data.shape[-1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=-1))

    return _finish("concat_last", np.concatenate([p.data for p in parts], axis=-1), tuple(parts), bw)


def stack_rows(parts: Iterable[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new first axis."""
    parts = list(parts)
    if not parts:
        raise DimensionError("stack_rows of zero tensors")
    shape = parts[0].data.shape
    for p in parts:
        if p.data.shape != shape:
            raise DimensionError("stack_rows: member shapes differ")

    def bw(g):
        return tuple(np.ascontiguousarray(g[i]) for i in range(len(parts)))

    return _finish("stack_rows", np.stack([p.data for p in parts]), tuple(parts), bw)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along the first axis; duplicate indices allowed."""
    idx = np.asarray(idx, dtype=np.int64)
    n = a.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"gather_rows: index out of range for {n} rows")

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _finish("gather_rows", a.data[idx].copy(), (a,), bw)


def max_axis0(a: Tensor) -> Tensor:
    """Max over the first axis; gradient routes to the (first) argmax."""
    if a.data.shape[0] == 0:
        raise DimensionError("max_axis0 over an empty first axis")
    am = np.argmax(a.data, axis=0)
    out = np.take_along_axis(a.data, am[None, ...], axis=0)[0]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, am[None, ...], g[None, ...], axis=0)
        return (ga,)

    return _finish("max_axis0", out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _finish("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise DimensionError("mean of an empty tensor")
    shape = a.data.shape
    return _finish("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


# ---------------------------------------------------------------------------
# linear algebra / network layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _finish("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis: x[..., in] @ w[in, out] + b[out]."""
    if w.data.ndim != 2:
        raise DimensionError(f"linear weight must be rank 2, got {w.shape}")
    d_in, d_out = w.data.shape
    if x.data.ndim < 1 or x.data.shape[-1] != d_in:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.data.shape != (d_out,):
        raise DimensionError(f"linear: bias shape {b.shape} != ({d_out},)")

    xd = x.data.reshape(-1, d_in)
    out = xd @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(x.data.shape[:-1] + (d_out,))

    def bw(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ w.data.T).reshape(x.data.shape)
        gw = xd.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _finish("linear", out, inputs, bw)


def softmax_last(x: Tensor) -> Tensor:
    """Row-stabilized softmax over the trailing axis."""
    if x.data.ndim < 1 or x.data.shape[-1] < 1:
        raise DimensionError(f"softmax_last needs a non-empty trailing axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _finish("softmax_last", out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance, then affine."""
    c = x.data.shape[-1] if x.data.ndim else 0
    if c < 2:
        raise DimensionError(f"layer_norm needs a trailing axis of at least 2, got {x.shape}")
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise DimensionError("layer_norm: gain/bias must have shape (C,)")

    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gg = (g * xhat).reshape(-1, c).sum(axis=0)
        gb = g.reshape(-1, c).sum(axis=0)
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx, gg, gb)

    return _finish("layer_norm", out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Array:
    """Central-difference gradient of a scalar function, elementwise.

    ``f`` receives a fresh non-tracked Tensor and must return a python float
    (or 0-d result). Used as the independent check against tape backward.
    """
    if not h > 0:
        raise ValidationError(f"finite_diff_grad requires h > 0, got {h}")
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = float(f(Tensor(base)))
        flat[i] = keep - h
        fm = float(f(Tensor(base)))
        flat[i] = keep
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("finite_diff_grad: non-finite function evaluation")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_relative_error(analytic: Array, numeric: Array) -> float:
    """max |a - n| / max(|a|, |n|, 1), the audit metric used across modules."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


# ---------------------------------------------------------------------------
# binary serialization: rank u32 | extents u32* | payload f64*, little endian


def tensor_to_bytes(t: Tensor | Array) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.ascontiguousarray(t, dtype=np.float64)
    header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Array, int]:
    """Decode one tensor record; returns (array, bytes consumed from offset)."""
    (rank,) = struct.unpack_from("<I", buf, offset)
    shape = struct.unpack_from(f"<{rank}I", buf, offset + 4)
    n = int(np.prod(shape)) if rank else 1
    start = offset + 4 + 4 * rank
    end = start + 8 * n
    if end > len(buf):
        raise ValidationError("tensor record truncated")
    arr = np.frombuffer(buf[start:end], dtype="<f8").reshape(shape).astype(np.float64)
    return arr, end - offset


def write_tensor(path, t: Tensor | Array) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def read_tensor(path) -> Array:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, used = tensor_from_bytes(buf)
    if used != len(buf):
        raise ValidationError(f"trailing bytes in tensor file {path}")
    return arr
