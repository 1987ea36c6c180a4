"""Dense float64 tensors with a reverse-mode tape.

Define-by-run: while a Tape is active, every primitive whose inputs are
tracked appends a record (output, inputs, backward rule). backward(loss)
replays the records in reverse, accumulating gradients exactly once per
edge and depositing them into the .grad buffer of requires_grad tensors.

All data is float64 and row-major. Every op output and every final
gradient is checked for NaN/Inf and raises NumericalError on violation.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import DegenerateInputError, NumericalError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int]

_STACK = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STACK, "tapes", None)
    if stack is None:
        stack = []
        _STACK.tapes = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by {where}")


class Tensor:
    """A dense float64 array, optionally collecting gradients.

    grad is allocated (zeros) iff requires_grad is set; backward() adds
    into it, so repeated backward calls accumulate.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; the free functions do the real work
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple, backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered log of primitive applications for one forward pass.

    Records are appended in execution order, so the list is already
    topologically sorted: replaying it in reverse visits every edge once.
    """

    __slots__ = ("_records",)

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not on top")
        stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        backward(loss)


def _as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t._tape is tape


def _emit(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
          backward_rule: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Build the output tensor and record the op if any input is tracked."""
    _check_finite(out_data, name)
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        out._tape = tape
        tape._records.append(_Record(out, tuple(inputs), backward_rule))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad of every requires_grad tensor with d loss / d tensor.

    The loss must be a scalar. Gradients accumulate across calls; use
    zero_grad()/zero_gradients() between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        return  # loss does not depend on anything tracked; all grads stay zero
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape._records):
        g = grads.get(id(rec.out))
        if g is None:
            continue
        contributions = rec.backward(g)
        for t, c in zip(rec.inputs, contributions):
            if c is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + c
            else:
                grads[key] = c
                holders[key] = t
    for key, t in holders.items():
        if t.requires_grad:
            g = grads[key]
            _check_finite(g, "backward")
            t.grad += g.reshape(t.data.shape)


def zero_gradients(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise / broadcasting primitives
# ---------------------------------------------------------------------------

def _broadcast_check(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "add")
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "sub")
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "mul")
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "div")
    out = a.data / b.data
    return _emit("div", (a, b), out,
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "maximum")
    mask = a.data >= b.data
    return _emit("maximum", (a, b), np.where(mask, a.data, b.data),
                 lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)))


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise min; on ties the gradient routes to the first operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "minimum")
    mask = a.data <= b.data
    return _emit("minimum", (a, b), np.where(mask, a.data, b.data),
                 lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)))


def relu(x: ArrayLike) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def tanh(x: ArrayLike) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return _emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(x: ArrayLike) -> Tensor:
    x = _as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def exp(x: ArrayLike) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def log(x: ArrayLike) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise DegenerateInputError("log: input must be strictly positive")
    return _emit("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def square(x: ArrayLike) -> Tensor:
    x = _as_tensor(x)
    return _emit("square", (x,), x.data * x.data, lambda g: (g * 2.0 * x.data,))


def sqrt(x: ArrayLike) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data < 0):
        raise DegenerateInputError("sqrt: negative input")
    out = np.sqrt(x.data)

    def bwd(g):
        if np.any(out == 0):
            raise DegenerateInputError("sqrt: gradient at zero is undefined")
        return (g * 0.5 / out,)

    return _emit("sqrt", (x,), out, bwd)


# ---------------------------------------------------------------------------
# reductions and structure
# ---------------------------------------------------------------------------

def _normalize_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), np.asarray(out), bwd)


def tmean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if x.ndim else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy() / count,)

    return _emit("mean", (x,), np.asarray(out), bwd)


def reshape(x: ArrayLike, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    return _emit("reshape", (x,), x.data.reshape(shape),
                 lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[ArrayLike], axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input list")
    axis = axis % ts[0].ndim
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i in range(len(ts)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(g[tuple(sl)])
        return pieces

    return _emit("concat", tuple(ts), out, bwd)


def slice_axis(x: ArrayLike, axis: int, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    axis = axis % x.ndim
    if not (0 <= start <= stop <= x.shape[axis]):
        raise ShapeError(f"slice_axis: range [{start}, {stop}) out of bounds for axis "
                         f"{axis} of shape {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def bwd(g):
        full = np.zeros(x.shape)
        full[sl] = g
        return (full,)

    return _emit("slice", (x,), x.data[sl].copy(), bwd)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data,
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose2d(x: ArrayLike) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose2d: need a 2-d tensor, got {x.shape}")
    return _emit("transpose2d", (x,), x.data.T.copy(), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# convolution family (NCHW layout, valid padding, explicit stride)
# ---------------------------------------------------------------------------

def _conv_out_size(n: int, k: int, s: int) -> int:
    return (n - k) // s + 1


def _im2col(x: np.ndarray, kh: int, kw: int, s: int) -> np.ndarray:
    """(N,C,H,W) -> (C*kh*kw, N*Ho*Wo) patch matrix (one contiguous copy)."""
    n, c, h, w = x.shape
    ho, wo = _conv_out_size(h, kh, s), _conv_out_size(w, kw, s)
    sn, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (c, kh, kw, n, ho, wo), (sc, sh, sw, sn, sh * s, sw * s))
    return windows.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols: np.ndarray, out_shape: tuple, kh: int, kw: int, s: int) -> np.ndarray:
    """Scatter-add the inverse of _im2col: (C*kh*kw, N*Ho*Wo) -> (N,C,H,W)."""
    n, c, h, w = out_shape
    ho, wo = _conv_out_size(h, kh, s), _conv_out_size(w, kw, s)
    xc = np.zeros((c, n, h, w))
    cols6 = cols.reshape(c, kh, kw, n, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xc[:, :, i:i + (ho - 1) * s + 1:s, j:j + (wo - 1) * s + 1:s] += cols6[:, i, j]
    return np.ascontiguousarray(xc.transpose(1, 0, 2, 3))


def _split_batch(flat: np.ndarray, n: int, c: int, h: int, w: int) -> np.ndarray:
    """(C, N*H*W) channel-major matrix -> contiguous (N,C,H,W)."""
    return np.ascontiguousarray(flat.reshape(c, n, h, w).transpose(1, 0, 2, 3))


def _merge_batch(x: np.ndarray) -> np.ndarray:
    """(N,C,H,W) -> contiguous (C, N*H*W) channel-major matrix."""
    n, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, n * h * w)


def conv2d(x: ArrayLike, w: ArrayLike, stride: int = 1) -> Tensor:
    """Valid cross-correlation of (N,Cin,H,W) with kernels (Cout,Cin,kh,kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and kernel, got {x.shape}, {w.shape}")
    n, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    if kh > h or kw > wdt:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{wdt}")
    ho, wo = _conv_out_size(h, kh, stride), _conv_out_size(wdt, kw, stride)
    cols = _im2col(x.data, kh, kw, stride)          # (Cin*kh*kw, N*L)
    wmat = w.data.reshape(cout, -1)
    out = _split_batch(wmat @ cols, n, cout, ho, wo)

    def bwd(g):
        gl = _merge_batch(g)                         # (Cout, N*L)
        dw = (gl @ cols.T).reshape(w.shape)
        dx = _col2im(wmat.T @ gl, x.shape, kh, kw, stride)
        return (dx, dw)

    return _emit("conv2d", (x, w), out, bwd)


def transposed_conv2d(x: ArrayLike, w: ArrayLike, stride: int = 1) -> Tensor:
    """Gradient-of-conv upsampling: (N,Cin,H,W) x (Cin,Cout,kh,kw) ->
    (N, Cout, (H-1)*stride+kh, (W-1)*stride+kw)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"transposed_conv2d: need 4-d input and kernel, got {x.shape}, {w.shape}")
    n, cin, h, wdt = x.shape
    cin_w, cout, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"transposed_conv2d: input channels {cin} != kernel channels {cin_w}")
    ho, wo = (h - 1) * stride + kh, (wdt - 1) * stride + kw
    wmat = w.data.reshape(cin, cout * kh * kw)
    xl = _merge_batch(x.data)                        # (Cin, N*H*W)
    out = _col2im(wmat.T @ xl, (n, cout, ho, wo), kh, kw, stride)

    def bwd(g):
        gcols = _im2col(g, kh, kw, stride)           # (Cout*kh*kw, N*H*W)
        dx = _split_batch(wmat @ gcols, n, cin, h, wdt)
        dw = (xl @ gcols.T).reshape(w.shape)
        return (dx, dw)

    return _emit("transposed_conv2d", (x, w), out, bwd)


def pad2d(x: ArrayLike, pad: int) -> Tensor:
    """Zero-pad the last two axes of (N,C,H,W) by `pad` on every side."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"pad2d: need a 4-d tensor, got {x.shape}")
    if pad < 0:
        raise ShapeError("pad2d: negative padding")
    out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return _emit("pad2d", (x,), out,
                 lambda g: (g[:, :, pad:g.shape[2] - pad, pad:g.shape[3] - pad].copy(),))


def crop2d(x: ArrayLike, crop: int) -> Tensor:
    """Drop `crop` rows/cols from every side of the last two axes."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"crop2d: need a 4-d tensor, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if 2 * crop >= h or 2 * crop >= w:
        raise ShapeError(f"crop2d: crop {crop} too large for {h}x{w}")

    def bwd(g):
        full = np.zeros(x.shape)
        full[:, :, crop:h - crop, crop:w - crop] = g
        return (full,)

    return _emit("crop2d", (x,), x.data[:, :, crop:h - crop, crop:w - crop].copy(), bwd)


# ---------------------------------------------------------------------------
# stop-gradient and vector geometry
# ---------------------------------------------------------------------------

def stop_grad(x: ArrayLike) -> Tensor:
    """Forward identity that contributes zero gradient to everything upstream."""
    x = _as_tensor(x)
    return Tensor(x.data.copy())


def l2_norm(x: ArrayLike, axis=None) -> Tensor:
    """Euclidean norm over `axis` (all axes when None). Zero vectors are rejected:
    the norm has no gradient there and a silently-epsiloned value would hide
    collapsed representations."""
    x = _as_tensor(x)
    sq = tsum(square(x), axis=axis)
    if np.any(sq.data == 0.0):
        raise DegenerateInputError("l2_norm: zero vector")
    return sqrt(sq)


def cosine_similarity(a: ArrayLike, b: ArrayLike, axis: int = -1) -> Tensor:
    """cos(a, b) along `axis`, batched over the remaining axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} != {b.shape}")
    na = np.sqrt(np.sum(a.data * a.data, axis=axis))
    nb = np.sqrt(np.sum(b.data * b.data, axis=axis))
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DegenerateInputError("cosine_similarity: zero-norm input")
    dot = tsum(mul(a, b), axis=axis)
    return div(dot, mul(l2_norm(a, axis=axis), l2_norm(b, axis=axis)))
