"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded onto the innermost active :class:`Tape` whenever one
of their inputs requires a gradient. Outside a tape every op is a plain numpy
computation and nothing is recorded::

    w = parameter(np.ones(3))
    with Tape() as tape:
        loss = sum(mul(w, w))
    backward(tape, loss)
    w.grad  # -> array([2., 2., 2.])

Gradients accumulate: calling :func:`backward` twice without resetting
``grad`` adds the second gradient to the first. Training code resets
per batch.
"""

from __future__ import annotations

import builtins
import threading
import weakref
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, DomainError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node:
    __slots__ = ("index", "parents", "backward", "output", "tape", "__weakref__")

    def __init__(self, index, parents, backward, output, tape):
        self.index = index
        self.parents = parents
        self.backward = backward
        self.output = weakref.ref(output)
        self.tape = weakref.ref(tape)


class Tape:
    """Ordered record of differentiable operations.

    Recording order is a valid topological order, so the backward sweep just
    walks the node list in reverse. A tape is confined to the thread that
    entered it.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, output: "Tensor", parents: Sequence["Tensor"], backward: Callable) -> None:
        node = Node(len(self.nodes), tuple(parents), backward, output, self)
        self.nodes.append(node)
        output.node = node
        output.requires_grad = True


class Tensor:
    """Dense row-major real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, dtype=None) -> Tensor:
    """Leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def _emit(arr: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward)
    return out


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    return _as_tensor(a, b_t), _as_tensor(b, a_t)


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def _check_binary(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ and neither is a scalar")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_binary("add", a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _emit(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_binary("sub", a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _emit(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _check_binary("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _reduce_to(g * bd, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(ad * bd, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(x.data * x.dtype.type(c), (x,), lambda g: (g * c,))


def negate(x: Tensor) -> Tensor:
    return _emit(-x.data, (x,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def expm1(x: Tensor) -> Tensor:
    """exp(x) - 1 without cancellation near zero."""
    out = np.expm1(x.data)
    return _emit(out, (x,), lambda g: (g * (out + 1),))


def log(x: Tensor) -> Tensor:
    xd = x.data
    bad = ~(xd > 0)
    if bad.any():
        idx = np.unravel_index(int(np.argmax(bad)), xd.shape)
        raise DomainError(f"log of non-positive value {xd[idx]!r} at index {idx}", index=idx)
    return _emit(np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _emit(out, (x,), lambda g: (g * out * (1 - out),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _emit(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def elementwise(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, exp, log, scale, negate, sigmoid."""
    table = {
        "add": add, "sub": sub, "mul": mul, "relu": relu, "exp": exp,
        "log": log, "scale": scale, "negate": negate, "sigmoid": sigmoid,
    }
    try:
        fn = table[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands, **kwargs)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis: Optional[int], ndim: int) -> Optional[int]:
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    axis = _norm_axis(axis, x.ndim)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def reduce(kind: str, x: Tensor, axis: Optional[int] = None) -> Tensor:
    if kind == "sum":
        return sum(x, axis)
    if kind == "mean":
        return mean(x, axis)
    raise ContractError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------- linear algebra and shapes


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _emit(ad @ bd, (a, b), backward)


def add_bias(x: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    """Add a 1-D bias along ``axis``, broadcasting over every other axis."""
    if b.ndim != 1 or x.ndim <= axis or x.shape[axis] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit axis {axis} of {x.shape}")
    shape = [1] * x.ndim
    shape[axis] = b.shape[0]
    others = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        return g, (g.sum(axis=others) if b.requires_grad else None)

    return _emit(x.data + b.data.reshape(shape), (x, b), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    src = x.shape
    return _emit(out, (x,), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(x, (x.shape[0], -1))


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (x,), backward)


def softmax(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit(out, (x,), backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise unit normalisation along the last axis; ``eps`` guards zero rows."""
    xd = x.data
    r = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    n = r + eps
    out = xd / n

    def backward(g):
        proj = (xd * g).sum(axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = np.where(r > 0, proj / (n * n * r), 0.0)
        return (g / n - xd * corr,)

    return _emit(out, (x,), backward)


# ---------------------------------------------------------------- convolution and pooling


def conv_output_size(size: int, kernel: int, stride: int, pad: tuple[int, int]) -> int:
    return (size + pad[0] + pad[1] - kernel) // stride + 1


def conv_padding(padding, kh: int, kw: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Resolve ``padding`` to ((top, bottom), (left, right)).

    ``"same"`` pads ``k - 1`` cells in total, the odd one going to the
    bottom/right, which preserves the extent for stride 1.
    """
    if padding == "same":
        return ((kh - 1) // 2, kh // 2), ((kw - 1) // 2, kw // 2)
    p = int(padding)
    if p < 0:
        raise DimensionError(f"negative padding {p}")
    return (p, p), (p, p)


def _batched(fn):
    def wrapper(x: Tensor, *args, **kwargs):
        if x.ndim == 3:
            out = fn(reshape(x, (1,) + x.shape), *args, **kwargs)
            return reshape(out, out.shape[1:])
        if x.ndim != 4:
            raise DimensionError(f"{fn.__name__}: expected c×h×w or n×c×h×w input, got {x.shape}")
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_batched
def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding=0) -> Tensor:
    """Cross-correlation (no kernel flip) of ``[n×]c_in×h×w`` with ``c_out×c_in×kh×kw``."""
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    if kernels.ndim != 4 or kernels.shape[1] != c:
        raise DimensionError(f"conv2d: kernels {kernels.shape} do not match input {x.shape}")
    c_out, _, kh, kw = kernels.shape
    (pt, pb), (pl, pr) = conv_padding(padding, kh, kw)
    if kh > h + pt + pb or kw > w + pl + pr:
        raise DimensionError(f"conv2d: kernel {kh}×{kw} larger than padded input {h + pt + pb}×{w + pl + pr}")
    ho = conv_output_size(h, kh, stride, (pt, pb))
    wo = conv_output_size(w, kw, stride, (pl, pr))

    # channel-major layout: cols rows are (i, j, c), columns are (n, y, x)
    xc = x.data.transpose(1, 0, 2, 3)
    if pt or pb or pl or pr:
        xc = np.pad(xc, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.empty((kh, kw, c, n, ho, wo), dtype=np.result_type(x.dtype, kernels.dtype))
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xc[:, :, i:i + hs:stride, j:j + ws:stride]
    cols = cols.reshape(kh * kw * c, n * ho * wo)
    wmat = kernels.data.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = np.ascontiguousarray((wmat @ cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3))
    need_x = x.requires_grad
    padded_shape = xc.shape

    def backward(g):
        gt = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gk = None
        if kernels.requires_grad:
            gk = (gt @ cols.T).reshape(c_out, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if need_x:
            dcols = (wmat.T @ gt).reshape(kh, kw, c, n, ho, wo)
            dxp = np.zeros(padded_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[i, j]
            gx = dxp[:, :, pt:pt + h, pl:pl + w].transpose(1, 0, 2, 3)
        return gx, gk

    return _emit(out, (x, kernels), backward)


@_batched
def maxpool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Per-window maximum. Ties route the gradient to the first row-major position."""
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if window > h or window > w:
        raise DimensionError(f"maxpool2d: window {window} exceeds input extent {h}×{w}")
    if stride < 1:
        raise DimensionError(f"maxpool2d: stride must be >= 1, got {stride}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for idx in range(window * window):
            i, j = divmod(idx, window)
            dx[:, :, i:i + hs:stride, j:j + ws:stride] += g * (arg == idx)
        return (dx,)

    return _emit(np.ascontiguousarray(out), (x,), backward)


# ---------------------------------------------------------------- differentiation


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the path."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss.node
    if node is None or node.tape() is not tape:
        raise ContractError("loss was not produced on this tape")
    pending = {node.index: np.ones_like(loss.data)}
    for nd in reversed(tape.nodes[: node.index + 1]):
        g = pending.pop(nd.index, None)
        if g is None:
            continue
        out = nd.output()
        if out is not None:
            out.grad = g.copy() if out.grad is None else out.grad + g
        for parent, pg in zip(nd.parents, nd.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pnode = parent.node
            if pnode is not None and pnode.tape() is tape:
                k = pnode.index
                pending[k] = pg if k not in pending else pending[k] + pg
            else:
                pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg


def finite_diff_grad(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, in float64."""
    if h <= 0:
        raise ContractError(f"step h must be positive, got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(Tensor(base)))
        flat[i] = orig - h
        fm = _scalar(f(Tensor(base)))
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(base.shape)


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max-norm relative error with the denominator floored at ``floor``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = builtins.max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)), floor)
    return float(np.max(np.abs(a - b), initial=0.0)) / denom
