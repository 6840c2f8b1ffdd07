"""Dense tensors with reverse-mode automatic differentiation.

Every array lives in a :class:`Tensor`.  Operations on tensors that require
gradients record a node (the op's parents plus a closure computing the
vector-Jacobian product); :func:`backward` replays those nodes in reverse
topological order.  Tensors are batched where it matters for speed: image
ops take ``B x C x H x W`` arrays.

Training runs in float32.  Passing float64 arrays keeps every op in float64,
which is what the gradient checker relies on.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import NumericError, ShapeError, TapeError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (evaluation, frozen prefixes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""
        self._consumed = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and np.isscalar(x):
        return Tensor(np.asarray(x))
    return Tensor(x, dtype=dtype)


def _scalar_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# Tape / backward
# --------------------------------------------------------------------------
class Tape:
    """Topologically ordered list of recorded nodes reachable from a loss."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    The graph is released afterwards; calling backward again on the same loss
    raises :class:`TapeError`.
    """
    if loss._consumed:
        raise TapeError("tape already consumed: backward() was already run for this loss")
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_loss(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is None:
            continue
        g = node.grad
        if g is not None:
            node._backward(g)
        # interior nodes drop their buffers once used
        node.grad = None
        node._backward = None
        node._parents = ()
    loss._consumed = True


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericError(f"non-finite values in {what} ({bad} of {np.size(arr)} entries)")


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = b if isinstance(b, Tensor) else _scalar_like(b, a)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = b if isinstance(b, Tensor) else _scalar_like(b, a)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = b if isinstance(b, Tensor) else _scalar_like(b, a)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _scalar_like(a, b)
    b = b if isinstance(b, Tensor) else _scalar_like(b, a)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        _accumulate(a, g * 0.5 / out)

    return _make(out, (a,), bw, "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, np.zeros((), a.dtype))

    def bw(g):
        _accumulate(a, g * mask)

    return _make(out, (a,), bw, "relu")


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"relu": relu, "identity": identity}


# --------------------------------------------------------------------------
# shape manipulation and reductions
# --------------------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape

    def bw(g):
        _accumulate(a, g.reshape(src))

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accumulate(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw, "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _make(np.array(a.data[idx]), (a,), bw, "getitem")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``.

    ``weight`` is ``m x n``; ``x`` may carry any number of leading axes.
    """
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data)
        if weight.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.data.reshape(-1, x.shape[-1])
            _accumulate(weight, g2.T @ x2)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(out, parents, bw, "linear")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (x,), bw, "softmax")


# --------------------------------------------------------------------------
# image ops
# --------------------------------------------------------------------------
def _as_batched(x: Tensor, name: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected C x H x W or B x C x H x W input, got {x.shape}")
    return x, False


def conv2d_valid(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation without padding.

    ``x`` is ``C_in x H x W`` (or batched), ``weight`` is ``C_out x C_in x k x k``.
    Output spatial size is ``(H - k + 1, W - k + 1)``.
    """
    x, squeeze = _as_batched(x, "conv2d_valid")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d_valid: weight must be C_out x C_in x k x k, got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    if k % 2 == 0:
        raise ShapeError(f"conv2d_valid: kernel size must be odd, got {k}")
    B, C, H, W = x.shape
    if C != c_in:
        raise ShapeError(f"conv2d_valid: input has {C} channels, weight expects {c_in}")
    if H < k or W < k:
        raise ShapeError(f"conv2d_valid: input {H}x{W} smaller than kernel {k}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d_valid: bias {bias.shape} does not match {c_out} output channels")
    Ho, Wo = H - k + 1, W - k + 1
    xd, wd = x.data, weight.data
    w2 = wd.reshape(c_out, c_in * k * k)

    if k == 1:
        cols = xd.reshape(B, C, H * W)
    else:
        cols6 = np.empty((B, C, k, k, Ho, Wo), dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                cols6[:, :, i, j] = xd[:, :, i:i + Ho, j:j + Wo]
        cols = cols6.reshape(B, C * k * k, Ho * Wo)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(B, c_out, Ho, Wo)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g3 = g.reshape(B, c_out, Ho * Wo)
        if weight.requires_grad:
            gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2]))
            _accumulate(weight, gw.reshape(wd.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g3.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g3)
            if k == 1:
                _accumulate(x, gcols.reshape(B, C, H, W))
            else:
                gcols = gcols.reshape(B, C, k, k, Ho, Wo)
                gx = np.zeros_like(xd)
                for i in range(k):
                    for j in range(k):
                        gx[:, :, i:i + Ho, j:j + Wo] += gcols[:, :, i, j]
                _accumulate(x, gx)

    result = _make(out, parents, bw, "conv2d")
    return reshape(result, result.shape[1:]) if squeeze else result


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; odd trailing rows/columns are dropped.

    On ties the gradient goes to the first element of the window in
    row-major order.
    """
    if kernel != stride:
        raise ShapeError("maxpool2d supports non-overlapping windows only (kernel == stride)")
    x, squeeze = _as_batched(x, "maxpool2d")
    B, C, H, W = x.shape
    if H < kernel or W < kernel:
        raise ShapeError(f"maxpool2d: input {H}x{W} smaller than window {kernel}")
    Ho, Wo = H // kernel, W // kernel
    win = (
        x.data[:, :, : Ho * kernel, : Wo * kernel]
        .reshape(B, C, Ho, kernel, Wo, kernel)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, Ho, Wo, kernel * kernel)
    )
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gwin = np.zeros((B, C, Ho, Wo, kernel * kernel), dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, : Ho * kernel, : Wo * kernel] = (
            gwin.reshape(B, C, Ho, Wo, kernel, kernel)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(B, C, Ho * kernel, Wo * kernel)
        )
        _accumulate(x, gx)

    result = _make(out, (x,), bw, "maxpool2d")
    return reshape(result, result.shape[1:]) if squeeze else result


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------
def mse_loss(pred: Tensor, target) -> Tensor:
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} and target {target.shape} differ")
    if pred.size == 0:
        raise ShapeError("mse_loss: empty input")
    diff = pred.data - target.astype(pred.dtype, copy=False)
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)

    def bw(g):
        _accumulate(pred, g * (2.0 / n) * diff)

    return _make(out, (pred,), bw, "mse")


def channel_norm(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance standardisation along ``axis`` (no affine)."""
    mu = mean(x, axis=axis, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=axis, keepdims=True)
    return centered / sqrt(var + eps)


def scaled_attention_logits(q: Tensor, k: Tensor) -> Tensor:
    d = q.shape[-1]
    return matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * (1.0 / math.sqrt(d))
