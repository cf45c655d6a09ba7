"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable primitive records its inputs and a backward rule on the
output tensor.  :func:`backward` collects the nodes reachable from a scalar
loss and replays them in exact reverse creation order, so the "tape" is the
creation sequence itself and two independent graphs never share state.

Arrays are laid out batch-first, ``[B, C, H, W]`` for feature maps.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

EPS = 1e-12

_seq = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run a block without recording any graph (evaluation, masks)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._seq = next(_seq)
        self.name = name

    # --- basic properties -------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self) -> None:
        backward(self)

    # --- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

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


def _make(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap an op result; attach graph info only when something needs grad."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- tape replay -------------------------------------------------------------
def tape(loss: Tensor) -> list:
    """Nodes that influence ``loss``, in forward (creation) order."""
    seen = set()
    nodes = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with requires_grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --- elementwise ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def rule(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def rule(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), rule)


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * on,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor, eps: float = EPS) -> Tensor:
    """Natural log of ``max(a, eps)``; zero gradient inside the clamp."""
    safe = np.maximum(a.data, eps)
    live = a.data > eps
    return _make(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), rule)


# --- reductions and shape --------------------------------------------------------
def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis)

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), rule)


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing."""
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _make(np.array(a.data[key]), (a,), rule)


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """``out.flat[i] = a.flat[index.flat[i]]``; output has ``index``'s shape."""
    index = np.asarray(index, dtype=np.intp)
    n = a.size
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ValueError("gather index out of range")
    shape = a.shape
    flat_idx = index.reshape(-1)

    def rule(g):
        return (np.bincount(flat_idx, weights=g.reshape(-1), minlength=n).reshape(shape),)

    return _make(a.data.reshape(-1)[flat_idx].reshape(index.shape), (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, rule)


# --- probabilistic -----------------------------------------------------------------
def _check_axis(a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"axis {axis} invalid for shape {a.shape}")
    return axis % a.ndim


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(logits, axis)
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (logits,), rule)


def cross_entropy(probs: Tensor, labels, axis: int = -1, eps: float = EPS) -> Tensor:
    """Unreduced ``-log(max(probs[label], eps))`` along the class axis.

    ``labels`` has the shape of ``probs`` with the class axis removed; a plain
    int against a 1-D probability vector yields a scalar.
    """
    axis = _check_axis(probs, axis)
    k = probs.shape[axis]
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    idx = np.expand_dims(labels.astype(np.intp), axis)
    picked = np.take_along_axis(probs.data, idx, axis=axis)
    safe = np.maximum(picked, eps)
    live = picked > eps
    out = -np.log(safe)

    def rule(g):
        full = np.zeros_like(probs.data)
        local = np.where(live, -np.expand_dims(g, axis) / safe, 0.0)
        np.put_along_axis(full, idx, local, axis=axis)
        return (full,)

    return _make(np.squeeze(out, axis=axis), (probs,), rule)


def entropy(probs: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shannon entropy ``-sum p ln p`` with ``0 ln 0 = 0``; plain arrays."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


# --- convolution and pooling ---------------------------------------------------------
def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[B,C,H,W] -> tap-major patches ``[C*k*k, B*H*W]``, zero padding ``(k-1)/2``."""
    b, c, h, w = x.shape
    p = (k - 1) // 2
    xp = np.pad(x.transpose(1, 0, 2, 3), ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, b, h, w))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(c * k * k, b * h * w)


def _col2im(taps: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    """Adjoint of :func:`_im2col` for ``taps`` laid out ``[k, k, C, B*H*W]``."""
    b, c, h, w = shape
    p = (k - 1) // 2
    taps = taps.reshape(k, k, c, b, h, w)
    out = np.zeros((c, b, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + h, j:j + w] += taps[i, j]
    return out[:, :, p:p + h, p:p + w].transpose(1, 0, 2, 3)


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Same-padded stride-1 cross-correlation.

    ``x`` is ``[Cin,H,W]`` or ``[B,Cin,H,W]``; ``kernels`` is ``[Cout,Cin,k,k]``
    with odd ``k``; ``bias`` is ``[Cout]``.
    """
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernels.ndim != 4:
        raise ValueError("conv2d expects [B,Cin,H,W] input and [Cout,Cin,k,k] kernels")
    b, cin, h, w = x.shape
    cout, kcin, k, k2 = kernels.shape
    if kcin != cin:
        raise ValueError(f"channel mismatch: input has {cin}, kernels expect {kcin}")
    if k != k2 or k % 2 == 0:
        raise ValueError("kernel must be square with odd size")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},)")

    cols = _im2col(x.data, k)
    wmat = kernels.data.reshape(cout, -1)
    out = wmat @ cols  # [Cout, B*H*W]
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(cout, b, h, w).transpose(1, 0, 2, 3)
    kshape = kernels.shape

    def rule(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, -1)
        gx = None
        if x.requires_grad:
            wt = kernels.data.transpose(2, 3, 1, 0).reshape(k * k * cin, cout)
            gx = _col2im(wt @ gt, x.shape, k)
        gw = (gt @ cols.T).reshape(kshape) if kernels.requires_grad else None
        gb = gt.sum(axis=1) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    res = _make(np.ascontiguousarray(out), parents, rule)
    if single:
        res = reshape(res, res.shape[1:])
    return res


def avg_pool_grid(x: Tensor, n: int) -> Tensor:
    """Average [B,C,H,W] over an n x n grid of equal cells -> [B,C,n,n]."""
    b, c, h, w = x.shape
    if h % n or w % n:
        raise ValueError(f"spatial size {h}x{w} not divisible by grid {n}")
    cells = reshape(x, (b, c, n, h // n, n, w // n))
    return mean(cells, axis=(3, 5))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight ``[out, in]``."""
    out = matmul(x, transpose(weight, (1, 0)))
    return out if bias is None else add(out, bias)
