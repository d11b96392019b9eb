"""Differentiable operations on :class:`Tensor`.

Every op computes its numpy result eagerly and, when a graph is active and any
input needs a gradient, records a closure mapping the output gradient to one
gradient per parent (``None`` for parents that do not need one).
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _active_graph, as_tensor

LOG_CLAMP = 1e-12
LEAKY_SLOPE = 0.2


def _record(kind, out_data, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._graph = None
    out._node = None
    graph = _active_graph()
    if graph is not None and any(p.requires_grad for p in parents):
        graph.record(kind, out, parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _record("sum", np.asarray(a.data.sum()), (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.data.sum(axis=axis)
    return _record("sum", out, (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors) -> Tensor:
    """Flatten each input and join them into one 1-D tensor."""
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.size for t in tensors]
    shapes = [t.shape for t in tensors]
    out = np.concatenate([t.data.reshape(-1) for t in tensors])

    def back(g):
        parts, o = [], 0
        for n, s in zip(sizes, shapes):
            parts.append(g[o:o + n].reshape(s))
            o += n
        return tuple(parts)

    return _record("concat", out, tuple(tensors), back)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log with the argument clamped below at ``LOG_CLAMP``."""
    a = as_tensor(a)
    x = a.data
    live = x > LOG_CLAMP
    xc = np.where(live, x, LOG_CLAMP)
    return _record("log", np.log(xc), (a,), lambda g: (np.where(live, g / xc, 0.0),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    s = np.sign(a.data)
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * s,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    m = a.data > 0
    return _record("relu", np.where(m, a.data, 0.0), (a,), lambda g: (g * m,))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    m = a.data > 0
    scale = np.where(m, 1.0, slope)
    return _record("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax_channelwise(logits) -> Tensor:
    """Softmax over axis 0 of a K x H x W (or K x N) tensor, max-shifted per pixel."""
    logits = as_tensor(logits)
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=0, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=0, keepdims=True)),)

    return _record("softmax", out, (logits,), back)


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """2-D cross-correlation of a C x H x W input with O x C x kh x kw filters.

    The kernel is not flipped. Zero padding defaults to ``kh // 2`` for odd kernels
    (so 3x3 stride s gives ceil(H/s)) and ``kh // 2 - 1`` for even kernels (4x4
    stride 2 halves H).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects C x H x W input and 4-D filters, got {x.shape}, {w.shape}")
    C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input has {C}, filters expect {Cw}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if padding is None:
        padding = kh // 2 if kh % 2 else kh // 2 - 1
    p = padding
    Ho, Wo = _out_size(H, kh, stride, p), _out_size(W, kw, stride, p)
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    # cols: (C*kh*kw, Ho*Wo)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(C * kh * kw, Ho * Wo)
    wm = w.data.reshape(O, -1)
    out = (wm @ cols).reshape(O, Ho, Wo)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None, None]
        parents = (x, w, b)

    def back(g):
        gm = g.reshape(O, -1)
        gw = (gm @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad and stride == 1 and 2 * p == kh - 1 == kw - 1:
            # full correlation of the output gradient with the flipped, transposed kernel
            gp = np.pad(g, ((0, 0), (p, p), (p, p)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(1, 2))
            gcols = gwin.transpose(0, 3, 4, 1, 2).reshape(O * kh * kw, H * W)
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(C, -1)
            gx = (wflip @ gcols).reshape(C, H, W)
        elif x.requires_grad:
            gcols = (wm.T @ gm).reshape(C, kh, kw, Ho, Wo)
            gxp = np.zeros((C, H + 2 * p, W + 2 * p))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, i, j]
            gx = gxp[:, p:p + H, p:p + W] if p else gxp
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1)

    return _record("conv2d", out, parents, back)


def dot(a, b) -> Tensor:
    return sum(mul(a, b))


def norm(a) -> Tensor:
    return sqrt(dot(a, a))
