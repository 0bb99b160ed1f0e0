"""Differentiable operations over NHWC tensors.

Feature maps are laid out batch x height x width x channels.  Each op
computes its forward value with numpy and registers a closure that returns
one gradient per input (``None`` for inputs that are not differentiable).
Reductions that feed normalisations (softmax denominators, pooling means,
layer-norm statistics) accumulate in float64 and cast back.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import special

from .tensor import Tensor, as_tensor, make_node


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested op."""


_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Promote python scalars to tensors carrying the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return make_node(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)
    return make_node(out, (a, b), bw, "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return make_node(x.data * c, (x,), lambda g: (g * c,), "scale")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(xd * xd, (x,), lambda g: (2 * g * xd,), "square")


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def maximum(x: Tensor, floor: float) -> Tensor:
    """max(x, floor) with gradient passed only where x is above the floor."""
    xd = x.data
    mask = xd > floor
    out = np.where(mask, xd, x.dtype.type(floor))
    return make_node(out, (x,), lambda g: (g * mask,), "maximum")


# ----------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd / _SQRT2))
    pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
    return make_node(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(np.logaddexp(0, xd).astype(xd.dtype), (x,),
                     lambda g: (g * special.expit(xd),), "softplus")


def normal_cdf(x: Tensor) -> Tensor:
    """Standard normal CDF."""
    xd = x.data
    out = special.ndtr(xd)
    pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
    return make_node(out, (x,), lambda g: (g * pdf,), "normal_cdf")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for {x.ndim}-d tensor")
    xd = x.data.astype(np.float64)
    xd = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(xd)
    s = e / e.sum(axis=axis, keepdims=True)
    dt = x.dtype

    def bw(g):
        g64 = g.astype(np.float64)
        return ((s * (g64 - (g64 * s).sum(axis=axis, keepdims=True))).astype(dt),)
    return make_node(s.astype(dt), (x,), bw, "softmax")


# ----------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_node(np.broadcast_to(x.data, shape).copy(), (x,),
                     lambda g: (_unbroadcast(g, src),), "broadcast_to")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).astype(g.dtype, copy=True),)
    return make_node(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for {x.ndim}-d tensor")
    return axis % x.ndim


def _slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    src, dt = x.shape, x.dtype

    def bw(g):
        full = np.zeros(src, dtype=dt)
        full[idx] = g
        return (full,)
    return make_node(x.data[idx], (x,), bw, "slice")


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    axis = _check_axis(x, axis)
    if any(s <= 0 for s in sizes) or np.sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to extent {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(_slice(x, axis, start, start + s))
        start += s
    return out


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    axis = _check_axis(xs[0], axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))
    return make_node(np.concatenate([t.data for t in xs], axis=axis), xs, bw, "concat")


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape} "
                         f"({a.shape[-1]} != {b.shape[-2]})")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb
    return make_node(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Token-wise projection over the trailing channel axis."""
    lead = x.shape[:-1]
    out = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        out = add(out, bias)
    return reshape(out, lead + (weight.shape[-1],))


# ----------------------------------------------------------------------------
# convolutions


def _same_pads(n: int, k: int, s: int) -> tuple[int, int, int]:
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return out, total // 2, total - total // 2


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if padding == "same":
        ho, pt, pb = _same_pads(h, kh, stride)
        wo, pl, pr = _same_pads(w, kw, stride)
    elif padding == "valid":
        if kh > h or kw > w:
            raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w} under valid padding")
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    return ho, wo, (pt, pb, pl, pr)


def _window(xp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int):
    return (slice(None), slice(i, i + stride * (ho - 1) + 1, stride),
            slice(j, j + stride * (wo - 1) + 1, stride), slice(None))


def _conv_forward(xp: np.ndarray, k: np.ndarray, stride: int, groups: int, ho: int, wo: int):
    kh, kw, cin_g, cout = k.shape
    b = xp.shape[0]
    cout_g = cout // groups
    out = np.zeros((b, ho, wo, cout), dtype=np.result_type(xp, k))
    for i in range(kh):
        for j in range(kw):
            xs = xp[_window(xp, i, j, stride, ho, wo)]
            if groups == 1:
                out += (xs.reshape(-1, cin_g) @ k[i, j]).reshape(out.shape)
            elif cin_g == 1 and cout_g == 1:
                out += xs * k[i, j, 0]
            else:
                kg = k[i, j].reshape(cin_g, groups, cout_g).transpose(1, 0, 2)
                xg = xs.reshape(b, ho, wo, groups, cin_g)
                out += np.einsum("bhwgc,gco->bhwgo", xg, kg).reshape(out.shape)
    return out


def _conv_grad_input(g: np.ndarray, k: np.ndarray, stride: int, groups: int, xp_shape):
    kh, kw, cin_g, cout = k.shape
    b, ho, wo, _ = g.shape
    cout_g = cout // groups
    gxp = np.zeros(xp_shape, dtype=np.result_type(g, k))
    for i in range(kh):
        for j in range(kw):
            win = _window(gxp, i, j, stride, ho, wo)
            if groups == 1:
                gxp[win] += (g.reshape(-1, cout) @ k[i, j].T).reshape(b, ho, wo, cin_g)
            elif cin_g == 1 and cout_g == 1:
                gxp[win] += g * k[i, j, 0]
            else:
                kg = k[i, j].reshape(cin_g, groups, cout_g).transpose(1, 0, 2)
                gg = g.reshape(b, ho, wo, groups, cout_g)
                gxp[win] += np.einsum("bhwgo,gco->bhwgc", gg, kg).reshape(b, ho, wo, -1)
    return gxp


def _conv_grad_kernel(xp: np.ndarray, g: np.ndarray, stride: int, groups: int, k_shape):
    kh, kw, cin_g, cout = k_shape
    b, ho, wo, _ = g.shape
    cout_g = cout // groups
    gk = np.zeros(k_shape, dtype=np.result_type(xp, g))
    g2 = g.reshape(-1, cout)
    for i in range(kh):
        for j in range(kw):
            xs = xp[_window(xp, i, j, stride, ho, wo)]
            if groups == 1:
                gk[i, j] = xs.reshape(-1, cin_g).T @ g2
            elif cin_g == 1 and cout_g == 1:
                gk[i, j, 0] = (xs * g).reshape(-1, cout).sum(axis=0)
            else:
                xg = xs.reshape(-1, groups, cin_g)
                gg = g.reshape(-1, groups, cout_g)
                gk[i, j] = np.einsum("ngc,ngo->cgo", xg, gg).reshape(cin_g, cout)
    return gk


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, groups: int = 1,
           padding: str = "same") -> Tensor:
    """Cross-correlation of ``x`` (B,H,W,Cin) with ``kernel`` (kh,kw,Cin/groups,Cout)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    b, h, w, cin = x.shape
    kh, kw, cin_g, cout = kernel.shape
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if cin % groups or cout % groups:
        raise ShapeError(f"channels ({cin} in, {cout} out) not divisible by groups={groups}")
    if cin_g * groups != cin:
        raise ShapeError(f"kernel expects {cin_g * groups} input channels, input has {cin}")
    ho, wo, (pt, pb, pl, pr) = _conv_geometry(h, w, kh, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    kd = kernel.data
    out = _conv_forward(xp, kd, stride, groups, ho, wo)

    def bw(g):
        gx = gk = None
        if x.requires_grad:
            gxp = _conv_grad_input(g, kd, stride, groups, xp.shape)
            gx = gxp[:, pt:pt + h, pl:pl + w, :]
        if kernel.requires_grad:
            gk = _conv_grad_kernel(xp, g, stride, groups, kd.shape)
        return gx, gk
    return make_node(out, (x, kernel), bw, "conv2d")


def conv_transpose2d(y: Tensor, kernel: Tensor, stride: int = 1,
                     out_size: tuple[int, int] | None = None) -> Tensor:
    """Adjoint of ``conv2d(., kernel, stride, padding='same')``.

    ``kernel`` keeps the conv2d layout (kh, kw, Cx, Cy): it maps the Cy-channel
    input ``y`` back to Cx channels, and spatial extents grow by ``stride``
    unless ``out_size`` pins them.
    """
    y, kernel = as_tensor(y), as_tensor(kernel)
    if y.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d input and kernel, got {y.shape} and {kernel.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    b, ho, wo, cy = y.shape
    kh, kw, cx, ck = kernel.shape
    if ck != cy:
        raise ShapeError(f"kernel output channels {ck} do not match input channels {cy}")
    h, w = out_size if out_size is not None else (ho * stride, wo * stride)
    ho2, wo2, (pt, pb, pl, pr) = _conv_geometry(h, w, kh, kw, stride, "same")
    if (ho2, wo2) != (ho, wo):
        raise ShapeError(f"output size {h}x{w} is not compatible with input {ho}x{wo} at stride {stride}")
    xp_shape = (b, h + pt + pb, w + pl + pr, cx)
    kd, yd = kernel.data, y.data
    out = _conv_grad_input(yd, kd, stride, 1, xp_shape)[:, pt:pt + h, pl:pl + w, :]

    def bw(g):
        gp = np.pad(g, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        gy = _conv_forward(gp, kd, stride, 1, ho, wo) if y.requires_grad else None
        gk = _conv_grad_kernel(gp, yd, stride, 1, kd.shape) if kernel.requires_grad else None
        return gy, gk
    return make_node(np.ascontiguousarray(out), (y, kernel), bw, "conv_transpose2d")


# ----------------------------------------------------------------------------
# pooling, normalisation, windows


def global_avg_pool(x: Tensor, window: int | None = None) -> Tensor:
    """Spatial mean: whole map -> (B,1,1,C), or per ``window`` x ``window`` block."""
    b, h, w, c = x.shape
    dt = x.dtype
    if window is None:
        out = x.data.mean(axis=(1, 2), keepdims=True, dtype=np.float64).astype(dt)
        n = h * w
        return make_node(out, (x,), lambda g: (np.broadcast_to(g / dt.type(n), x.shape).copy(),), "gap")
    if h % window or w % window:
        raise ShapeError(f"{h}x{w} map is not divisible into {window}x{window} windows")
    nh, nw = h // window, w // window
    out = x.data.reshape(b, nh, window, nw, window, c).mean(axis=(2, 4), dtype=np.float64).astype(dt)
    area = dt.type(window * window)

    def bw(g):
        up = np.broadcast_to((g / area)[:, :, None, :, None, :], (b, nh, window, nw, window, c))
        return (up.reshape(x.shape).copy(),)
    return make_node(out, (x,), bw, "gap_window")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise each token over the channel axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    dt = x.dtype
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gain.data, bias.data
    out = (xhat * gd + bd).astype(dt)
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        g64 = g.astype(np.float64)
        gx = None
        if x.requires_grad:
            gh = g64 * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            gx = gx.astype(dt)
        ggain = (g64 * xhat).sum(axis=lead).astype(dt) if gain.requires_grad else None
        gbias = g64.sum(axis=lead).astype(dt) if bias.requires_grad else None
        return gx, ggain, gbias
    return make_node(out, (x, gain, bias), bw, "layer_norm")


def window_partition(x: Tensor, window: int) -> Tensor:
    """(B,H,W,C) -> (B*M, window*window, C) with windows in row-major order."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ShapeError(f"{h}x{w} map is not divisible into {window}x{window} windows")
    nh, nw = h // window, w // window
    t = reshape(x, (b, nh, window, nw, window, c))
    t = transpose(t, (0, 1, 3, 2, 4, 5))
    return reshape(t, (b * nh * nw, window * window, c))


def window_merge(t: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    if h % window or w % window:
        raise ShapeError(f"{h}x{w} map is not divisible into {window}x{window} windows")
    nh, nw = h // window, w // window
    n, tokens, c = t.shape
    if tokens != window * window or n % (nh * nw):
        raise ShapeError(f"cannot merge {t.shape} into {h}x{w} maps with window {window}")
    b = n // (nh * nw)
    u = reshape(t, (b, nh, nw, window, window, c))
    u = transpose(u, (0, 1, 3, 2, 4, 5))
    return reshape(u, (b, h, w, c))
