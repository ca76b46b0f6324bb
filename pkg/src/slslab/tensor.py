"""Dense float64 tensors with reverse-mode differentiation.

Every op builds its output from numpy arrays and, when any input requires a
gradient, records its inputs and a backward closure on the output.  The graph
reachable from a scalar loss is the tape: :func:`topological_order` flattens it
(inputs before consumers) and :func:`backward` walks it in reverse, visiting
each op once.  Nothing is stored globally, so independent graphs may be built
and differentiated on separate threads.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if not _all_finite(arr):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- basic attributes -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operators --------------------------------------------------------

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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _all_finite(data: np.ndarray) -> bool:
    if data.size == 1:
        return math.isfinite(data.item())
    return bool(np.isfinite(data).all())


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    """Wrap an op result, attaching graph edges only when needed."""
    data = np.asarray(data, dtype=DTYPE)
    if not _all_finite(data):
        raise NonFiniteError(f"{op} produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# -- elementwise ------------------------------------------------------------


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape} (only scalar broadcasting)")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=DTYPE).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by zero tensor entry")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        out = a.data**exponent
    return _make(out, (a,), bw, "pow")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), bw, "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # exp of a non-positive argument only, so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bw, "sigmoid")


def sqrt(a) -> Tensor:
    """Square root; the derivative at 0 is taken as 0 (subgradient)."""
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)

    return _make(out, (a,), bw, "sqrt")


def arctan(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g / (1.0 + a.data * a.data),)

    return _make(np.arctan(a.data), (a,), bw, "arctan")


def absolute(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g * np.sign(a.data),)

    return _make(np.abs(a.data), (a,), bw, "abs")


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    take_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _make(np.where(take_a, a.data, b.data), (a, b), bw, "minimum")


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    take_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _make(np.where(take_a, a.data, b.data), (a, b), bw, "maximum")


# -- shape ops --------------------------------------------------------------


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index].copy(), (a,), bw, "getitem")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    inputs = [as_tensor(t) for t in inputs]
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    ref = inputs[0].shape
    for t in inputs:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: shape {t.shape} does not match {ref}")
    splits = np.cumsum([t.shape[1] for t in inputs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=1))

    return _make(np.concatenate([t.data for t in inputs], axis=1), tuple(inputs), bw, "concat")


# -- spatial ops ------------------------------------------------------------


def _patches(x_cn: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Channel-major patch matrix (C*kh*kw, N*Ho*Wo) of a C x N x H x W array."""
    c = x_cn.shape[0]
    if kh == kw == 1 and stride == 1 and padding == 0:
        return x_cn.reshape(c, -1)
    if padding:
        x_cn = np.pad(x_cn, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x_cn, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3)).reshape(c * kh * kw, -1)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an OIKK weight."""
    x, weight = as_tensor(x), as_tensor(weight)
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects NCHW input and OIKK weight")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"channel mismatch: input {c}, weight {ci}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError("kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ValueError(f"bias shape {bias.shape} != ({o},)")
        parents = (x, weight, bias)

    wmat = weight.data.reshape(o, -1)
    cols = _patches(x.data.transpose(1, 0, 2, 3), kh, kw, stride, padding)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        g_cn = g.transpose(1, 0, 2, 3)
        gmat = g_cn.reshape(o, -1)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and padding <= min(kh, kw) - 1 and kh == kw:
                # input gradient of a stride-1 correlation is a correlation of
                # the output gradient with the flipped, transposed kernel
                flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
                gx = flipped @ _patches(g_cn, kh, kw, 1, kh - 1 - padding)
                gx = gx.reshape(c, n, h, w).transpose(1, 0, 2, 3)
            else:
                dcols = (wmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
                gxp = np.zeros((c, n, hp, wp), dtype=DTYPE)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
                gx = gxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")


def max_pool2d(x, factor: int) -> Tensor:
    """Non-overlapping ``factor`` x ``factor`` max pooling over the last two axes."""
    x = as_tensor(x)
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    *lead, h, w = x.shape
    if h % factor or w % factor:
        raise ValueError(f"spatial dims {(h, w)} not divisible by {factor}")
    ho, wo = h // factor, w // factor
    blocks = x.data.reshape(*lead, ho, factor, wo, factor)
    nl = len(lead)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    flat = blocks.transpose(perm).reshape(*lead, ho, wo, factor * factor)
    idx = flat.argmax(axis=-1)  # argmax returns the first maximum
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        inv = np.argsort(perm)
        gb = gflat.reshape(*lead, ho, wo, factor, factor).transpose(tuple(inv))
        return (gb.reshape(x.shape),)

    return _make(out, (x,), bw, "max_pool2d")


def _bilinear_matrix(n_in: int, factor: int) -> np.ndarray:
    """Row i gives the weights of output sample i (half-pixel centers, edge clamped)."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_bilinear(x, factor: int) -> Tensor:
    """Bilinear upsampling of the last two axes by an integer factor."""
    x = as_tensor(x)
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "upsample")
    h, w = x.shape[-2:]
    mh = _bilinear_matrix(h, factor)
    mw = _bilinear_matrix(w, factor)
    out = mh @ x.data @ mw.T

    def bw(g):
        return (mh.T @ g @ mw,)

    return _make(out, (x,), bw, "upsample")


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization of an NCHW tensor (no affine)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=(2, 3), keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gym = (g * y).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _make(y, (x,), bw, "instance_norm")


# -- differentiation --------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Ops reachable from ``root`` with every op's inputs listed before it."""
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=DTYPE)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``numeric`` is the central difference of ``f`` at ``x`` with the given step.
    ``coords`` restricts the check to some flat indices of ``x``.
    """
    x.requires_grad = True
    x.grad = None
    y = f(x)
    if not np.isfinite(y.data).all():
        raise NonFiniteError("f(x) is not finite")
    backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    idxs = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            fp = f(x).item()
            flat[i] = orig - step
            fm = f(x).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("f is not finite at a perturbed point")
            numeric = (fp - fm) / (2.0 * step)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
