"""Dense tensors with tape-ordered reverse-mode autodiff, backed by numpy.

Every differentiable op records a node stamped with a global sequence number;
``backward`` replays the reachable nodes in strictly decreasing sequence order,
which is exactly reverse construction order. Nothing is stored globally, so a
graph disappears as soon as the tensors referencing it do.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_SEQ = itertools.count()
_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operands rejected because of their shapes or values."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class _Node:
    __slots__ = ("seq", "parents", "backward")

    def __init__(self, parents, backward):
        self.seq = next(_SEQ)
        self.parents = parents
        self.backward = backward


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple:
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
            raise ShapeError("item() needs a single element")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ----------------------------------------------------
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

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype or _DEFAULT_DTYPE)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result; ``backward(g)`` returns one gradient (or None) per parent."""
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable requires_grad leaf."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._node is None:
        loss.grad = (loss.grad if loss.grad is not None else 0) + np.ones_like(loss.data)
        return

    # collect reachable nodes, then walk them in reverse construction order
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen[id(t)] = t
        if t._node is not None:
            stack.extend(p for p in t._node.parents if p.requires_grad)
    order = sorted((t for t in seen.values() if t._node is not None), key=lambda t: t._node.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        pgrads = t._node.backward(g)
        for p, pg in zip(t._node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p._node is None:
                p.grad = pg.astype(p.dtype, copy=True) if p.grad is None else p.grad + pg
            elif id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# -- elementwise -----------------------------------------------------------

def _binary_operands(a, b):
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if not a_t:
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not b_t:
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}; only equal shapes or scalars broadcast")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * x.dtype.type(c), (x,), lambda g: (g * x.dtype.type(c),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


_ELEMENTWISE = {"relu": relu, "tanh": tanh, "add": add, "multiply": mul, "scale": scale}


def elementwise(op_kind: str, *operands) -> Tensor:
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ShapeError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*operands)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel vector ``b`` [C] along axis 1 of ``x`` [N, C, ...]."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias of shape {b.shape} does not match channels of {x.shape}")
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return _make(x.data + b.data.reshape(bshape), (x, b), lambda g: (g, g.sum(axis=axes)))


# -- reductions and shape ops ---------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(y), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axes, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _make(y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def index(x: Tensor, idx) -> Tensor:
    y = x.data[idx]

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.ascontiguousarray(y), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    y = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(y, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    y = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(y, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [M,K]x[K,N], got {a.shape} x {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise ShapeError("log_softmax got non-finite input")
    if x.shape[axis] < 1:
        raise ShapeError("log_softmax over an empty axis")
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# -- convolution and pooling (NCHW, never padded) --------------------------

def _out_extent(n: int, k: int, s: int, what: str) -> int:
    if k > n:
        raise ShapeError(f"{what}: kernel {k} larger than input extent {n}")
    if (n - k) % s:
        raise ShapeError(f"{what}: ({n}-{k})/{s} is not integral; padding is never applied")
    return (n - k) // s + 1


def _windows(x: np.ndarray, kh: int, kw: int, s: int) -> np.ndarray:
    """View of shape [B, C, Ho, Wo, kh, kw]."""
    v = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return v[:, :, ::s, ::s]


def conv2d(x: Tensor, w: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Valid cross-correlation of ``x`` [B,Cin,H,W] with ``w`` [Cout,Cin,kh,kw]."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shapes {x.shape} and {w.shape} do not match")
    if stride < 1:
        raise ShapeError("stride must be positive")
    B, Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    Ho = _out_extent(H, kh, stride, "conv2d")
    Wo = _out_extent(W, kw, stride, "conv2d")
    parents = (x, w) if bias is None else (x, w, bias)

    if kh == 1 and kw == 1:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, Cin)  # [B*Ho*Wo, Cin]
    else:
        win = _windows(x.data, kh, kw, stride)  # B,C,Ho,Wo,kh,kw
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, Cin * kh * kw)
    wmat = w.data.reshape(Cout, -1)
    out = cols @ wmat.T  # [B*Ho*Wo, Cout]
    if bias is not None:
        out = out + bias.data
    y = np.ascontiguousarray(out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, Cout)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = gm @ wmat  # [B*Ho*Wo, Cin*kh*kw]
            gx = np.zeros_like(x.data)
            if kh == 1 and kw == 1:
                gx[:, :, ::stride, ::stride] = gcols.reshape(B, Ho, Wo, Cin).transpose(0, 3, 1, 2)
            else:
                gc = gcols.reshape(B, Ho, Wo, Cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
                for di in range(kh):
                    for dj in range(kw):
                        gx[:, :, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride] += gc[:, :, di, dj]
        gb = gm.sum(axis=0) if bias is not None else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(y, parents, bw)


def mean_pool(x: Tensor, kernel: int, stride: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"mean_pool needs [B,C,H,W], got {x.shape}")
    if kernel < 1 or stride < 1:
        raise ShapeError("kernel and stride must be positive")
    B, C, H, W = x.shape
    Ho = _out_extent(H, kernel, stride, "mean_pool")
    Wo = _out_extent(W, kernel, stride, "mean_pool")
    if kernel == 1:
        y = np.ascontiguousarray(x.data[:, :, ::stride, ::stride])
    else:
        y = _windows(x.data, kernel, kernel, stride).mean(axis=(4, 5))
    inv = x.dtype.type(1.0 / (kernel * kernel))

    def bw(g):
        gx = np.zeros_like(x.data)
        gs = g * inv
        for di in range(kernel):
            for dj in range(kernel):
                gx[:, :, di:di + stride * Ho:stride, dj:dj + stride * Wo:stride] += gs
        return (gx,)

    return _make(y, (x,), bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of [B,C,...]; running statistics are updated in place when training."""
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            n = x.data.size // x.shape[1]
            gx = (inv_std.reshape(bshape) / n) * (
                n * gxhat - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, gg, gb

    return _make(y.astype(x.dtype, copy=False), (x, gamma, beta), bw)


# -- optimizer -------------------------------------------------------------

def adam_init(params: Iterable[Tensor]) -> dict:
    params = list(params)
    return {"t": 0, "m": [np.zeros_like(p.data) for p in params], "v": [np.zeros_like(p.data) for p in params]}


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: dict, lr: float = 2e-4,
              beta1: float = 0.8, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """Bias-corrected Adam, updating ``params`` data and ``state`` in place."""
    if len(params) != len(state["m"]) or len(grads) != len(params):
        raise ShapeError("params, grads and optimizer state have different lengths")
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient/state shape mismatch for parameter {p.shape}")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 2e-4, beta1: float = 0.8, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = adam_init(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr if lr is None else lr, self.beta1, self.beta2, self.eps)
