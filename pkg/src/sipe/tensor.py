"""Dense float64 tensors with a minimal reverse-mode gradient engine.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
:func:`grad` orders the recorded graph into a tape and replays it backward.

Binary operations accept NumPy-style broadcasting; the backward pass sums the
gradient back down to each operand's shape.
"""

from __future__ import annotations

import io
import itertools
import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_counter = itertools.count()

MAGIC = b"TNSR"


class ShapeError(ValueError):
    pass


class Tensor:
    """An immutable float64 array that may participate in gradient tracking."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_order", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._order = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} produced non-finite values")


def _wrap(data: np.ndarray) -> Tensor:
    # fresh result arrays need no defensive copy
    out = Tensor.__new__(Tensor)
    arr = data if data.dtype == np.float64 else data.astype(np.float64)
    arr.setflags(write=False)
    out.data = arr
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._order = next(_counter)
    return out


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, name: str) -> Tensor:
    _check_finite(data, name)
    out = _wrap(np.asarray(data))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):  # _make rejects non-finite results
        out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
        "div",
    )


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = a.data >= lo
    return _make(np.maximum(a.data, lo), (a,), lambda g: (g * mask,), "clamp_min")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (np.where(out > 0, g / (2 * np.where(out > 0, out, 1.0)), 0.0),), "sqrt")


def l2norm(a: Tensor, axis: int, keepdims: bool = False, eps: float = 1e-12) -> Tensor:
    """Euclidean norm along ``axis``; the gradient is zero where the norm is below ``eps``."""
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    safe = np.where(n >= eps, n, 1.0)
    live = n >= eps

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.where(live, g * a.data / safe, 0.0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _make(out, (a,), backward, "l2norm")


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "abs": absolute,
    "softplus": softplus,
}


def elementwise(op: str, a, b=None) -> Tensor:
    fn = ELEMENTWISE[op]
    return fn(as_tensor(a)) if b is None and op in ("relu", "abs", "softplus") else fn(a, b)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(op: str, a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise ShapeError(f"{op}: empty reduction axis in shape {a.shape}")
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    if op == "sum":
        out = a.data.sum(axis=axes, keepdims=True)
        backward = lambda g: (np.broadcast_to(g.reshape(kept), a.shape).copy(),)
    elif op == "mean":
        out = a.data.sum(axis=axes, keepdims=True) / count
        backward = lambda g: (np.broadcast_to(g.reshape(kept) / count, a.shape).copy(),)
    elif op == "max":
        rest = [i for i in range(a.ndim) if i not in axes]
        perm = rest + list(axes)
        moved = a.data.transpose(perm)
        flat = moved.reshape(moved.shape[: len(rest)] + (count,))
        idx = flat.argmax(axis=-1)  # first maximal element
        out = np.take_along_axis(flat, idx[..., None], axis=-1).reshape(kept)

        def backward(g):
            hot = np.zeros_like(flat)
            np.put_along_axis(hot, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
            return (hot.reshape(moved.shape).transpose(np.argsort(perm)),)
    else:
        raise ValueError(f"unknown reduction {op!r}")

    if not keepdims:
        out = out.reshape(tuple(n for i, n in enumerate(a.shape) if i not in axes))
    return _make(out, (a,), backward, op)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum(sizes)[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def take(a: Tensor, index, axis: int) -> Tensor:
    """Select ``index`` (an int array) along ``axis``."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, (slice(None),) * (axis % a.ndim) + (index,), g)
        return (full,)

    return _make(np.take(a.data, index, axis=axis), (a,), backward, "take")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate ``x`` ([C,H,W] or [N,C,H,W]) with ``w`` ([O,C,kh,kw])."""
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected [N,C,H,W] input and [O,C,kh,kw] kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = xd.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: channel mismatch between input {x.shape} and kernel {w.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # [N, C*kh*kw, Ho*Wo] so the product lands directly in channel-first order
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    wmat = w.data.reshape(o, c * kh * kw)
    out = (wmat @ cols).reshape(n, o, ho, wo)
    if single:
        out = out[0]

    def backward(g):
        gmat = g.reshape(n, o, ho * wo)
        gw = (gmat @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if not x.requires_grad:
            return None, gw
        gcols = (wmat.T @ gmat).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return (gx[0] if single else gx), gw

    return _make(out, (x, w), backward, "conv2d")


def _interp_taps(out_size: int, in_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower tap, upper tap and fraction of each output sample (align_corners=False)."""
    src = np.maximum((np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5, 0.0)
    lo = np.minimum(np.floor(src).astype(np.intp), in_size - 1)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, src - lo


def _interp_matrix(out_size: int, in_size: int) -> np.ndarray:
    lo, hi, frac = _interp_taps(out_size, in_size)
    m = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(a: Tensor, height: int, width: int) -> Tensor:
    """Resize the last two axes with align_corners=False bilinear interpolation.

    The forward pass uses ``lo + t * (hi - lo)`` so constant regions stay
    bitwise constant; the backward pass applies the transposed weight matrices.
    """
    if height < 1 or width < 1:
        raise ShapeError(f"resize_bilinear: target size must be positive, got {height}x{width}")
    if a.ndim < 2:
        raise ShapeError(f"resize_bilinear: need at least 2 dims, got {a.shape}")
    h, w = a.shape[-2:]
    if (h, w) == (height, width):
        return a
    lo, hi, t = _interp_taps(height, h)
    x = a.data
    rows = x[..., lo, :] + t[:, None] * (x[..., hi, :] - x[..., lo, :])
    lo, hi, t = _interp_taps(width, w)
    out = rows[..., lo] + t * (rows[..., hi] - rows[..., lo])
    ah = _interp_matrix(height, h)
    aw = _interp_matrix(width, w)
    return _make(out, (a,), lambda g: (ah.T @ g @ aw,), "resize_bilinear")


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def tape(loss: Tensor) -> list[Tensor]:
    """Every tracked node reachable from ``loss``, in creation order."""
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen[id(t)] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t._order)


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of the scalar ``loss`` with respect to each of ``params``."""
    params = list(params)
    if loss.data.size != 1:
        raise ShapeError(f"grad: loss must be a scalar, got shape {loss.shape}")
    for i, p in enumerate(params):
        if not p.requires_grad:
            raise ValueError(f"grad: parameter {i} with shape {p.shape} is not tracked")
    if not loss.requires_grad:
        raise ValueError("grad: loss does not depend on any tracked tensor")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape(loss)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return [grads.get(id(p), np.zeros(p.shape)) for p in params]


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def write_tensor(f: BinaryIO, arr) -> None:
    arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
    f.write(MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    start = f.tell() if f.seekable() else 0
    magic = f.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r} at byte {start}")
    (rank,) = struct.unpack("<I", _read_exact(f, 4, start))
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, start))
    count = int(np.prod(shape)) if rank else 1
    payload = _read_exact(f, 8 * count, start)
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def _read_exact(f: BinaryIO, n: int, start: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated tensor record starting at byte {start}")
    return buf


def tensor_to_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))
