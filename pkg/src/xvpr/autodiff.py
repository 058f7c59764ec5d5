"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``Tensor.backward`` walks the recorded graph in reverse
topological order and accumulates into the ``grad`` of leaf tensors that
require gradients.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A named leaf tensor whose gradient is always tracked."""

    __slots__ = ()

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent: float):
    a = as_tensor(a)
    return _make(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    """Square root with a zero subgradient at 0 (used by Euclidean distances)."""
    a = as_tensor(a)
    out = np.sqrt(a.data)
    def back(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)
    return _make(out, (a,), back)


def relu(a):
    a = as_tensor(a)
    _check_finite(a.data, "relu")
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    _check_finite(a.data, "sigmoid")
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a, axis=-1):
    a = as_tensor(a)
    _check_finite(a.data, "softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (a,), back)


def clip(a, lo, hi):
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def maximum0(a):
    """Hinge max(a, 0); alias of relu without the finiteness check."""
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def signed_sqrt(a, eps=1e-6):
    """sign(x)·(sqrt(|x|+eps) − sqrt(eps)): continuous at 0 with bounded slope."""
    a = as_tensor(a)
    r = np.sqrt(np.abs(a.data) + eps)
    out = np.sign(a.data) * (r - np.sqrt(eps))
    return _make(out, (a,), lambda g: (g * 0.5 / r,))


def _check_finite(x, op):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{op}: non-finite input")


# ------------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------------- shapes


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index):
    a = as_tensor(a)
    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return _make(np.asarray(a.data[index]), (a,), back)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, back)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(a.data @ b.data, (a, b), back)


def linear(x, weight, bias=None):
    """y = W x + b for a vector x (n,) or a batch of rows (B, n)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2:
        raise ValueError(f"linear weight must be 2-D, got shape {weight.shape}")
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input width {x.shape[-1]} does not match weight {weight.shape}")
    if bias is not None and as_tensor(bias).shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {as_tensor(bias).shape} != ({weight.shape[0]},)")
    W = weight.data
    out = x.data @ W.T
    def back(g):
        gx = g @ W
        gw = np.outer(g, x.data) if x.ndim == 1 else g.T @ x.data
        return gx, gw
    y = _make(out, (x, weight), back)
    return y if bias is None else add(y, bias)


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """2-D cross-correlation with zero padding.

    ``x`` is C×H×W or N×C×H×W, ``weight`` is O×C×k×k. Output spatial size is
    floor((H + 2·pad − k) / stride) + 1.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ValueError(f"conv2d input must be CxHxW or NxCxHxW, got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d kernel must be OxCxkxk, got shape {weight.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and pad >= 0 (got {stride}, {pad})")
    xd = x.data[None] if single else x.data
    N, C, H, W = xd.shape
    O, Cw, k, _ = weight.shape
    if Cw != C:
        raise ValueError(f"conv2d: input has {C} channels, kernel expects {Cw}")
    if k > H + 2 * pad or k > W + 2 * pad:
        raise ValueError(f"conv2d: kernel {k} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # (N, Ho, Wo, C*k*k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N, Ho, Wo, C * k * k)
    wmat = weight.data.reshape(O, C * k * k)
    out = (cols @ wmat.T).transpose(0, 3, 1, 2)

    def back(g):
        g4 = g[None] if single else g
        gt = g4.transpose(0, 2, 3, 1)  # N, Ho, Wo, O
        gw = np.tensordot(gt, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(weight.shape)
        dcols = (gt @ wmat).reshape(N, Ho, Wo, C, k, k)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp
        return (dx[0] if single else dx), gw

    y = _make(out[0] if single else out, (x, weight), back)
    if bias is None:
        return y
    b = as_tensor(bias)
    if b.shape != (O,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({O},)")
    return add(y, reshape(b, (O, 1, 1)))


def l2_normalize(a, axis=-1, tiny=1e-12, floor=0.0):
    """Divide by the L2 norm along ``axis``; slices with norm < tiny map to zero.

    With ``floor`` > 0 the divisor is max(norm, floor), so slices shorter than
    ``floor`` are scaled by 1/floor instead of being stretched to unit length.
    """
    a = as_tensor(a)
    norm = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    if floor > 0:
        live = norm > floor
        inv = 1.0 / np.maximum(norm, floor)
    else:
        live = norm >= tiny
        inv = np.where(live, 1.0 / np.where(live, norm, 1.0), 0.0)
    out = a.data * inv

    def back(g):
        dot = np.where(live, (g * out).sum(axis=axis, keepdims=True), 0.0)
        return ((g - out * dot) * inv,)

    return _make(out, (a,), back)


# ------------------------------------------------------- sketch and convolution


def count_sketch(x, index, sign, m):
    """out[..., j] = Σ_{i: index[i] = j} sign[i] · x[..., i]."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    sign = np.asarray(sign, dtype=np.float64)
    if x.shape[-1] != index.shape[0]:
        raise ValueError(f"count_sketch: input length {x.shape[-1]} != sketch input dim {index.shape[0]}")
    proj = np.zeros((index.shape[0], m))
    proj[np.arange(index.shape[0]), index] = sign
    return _make(x.data @ proj, (x,), lambda g: (g @ proj.T,))


def _cmul(x, y):
    # written out so that swapping the operands gives bit-identical results
    return (x.real * y.real - x.imag * y.imag) + 1j * (x.real * y.imag + x.imag * y.real)


def circular_conv(a, b):
    """Circular convolution along the last axis, computed with the FFT."""
    from .fft import fft

    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"circular_conv: lengths differ ({a.shape[-1]} vs {b.shape[-1]})")
    fa = fft(a.data)
    fb = fft(b.data)
    out = fft(_cmul(fa, fb), inverse=True).real

    def back(g):
        fg = fft(g)
        ga = fft(fg * np.conj(fb), inverse=True).real
        gb = fft(fg * np.conj(fa), inverse=True).real
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), back)
