"""Primitive differentiable operations.

Each op computes its forward value with numpy, wraps it in a non-leaf
Tensor, and registers a backward closure on the active tape. Backward
closures return gradients shaped exactly like their inputs; broadcasting in
the forward is undone by summing over the broadcast axes.

Composite ops (softmax, layernorm, attention-style reshapes) are built from
the primitives so they inherit correct gradients for free.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf as _erf

from ..errors import ContractError
from .tensor import Tensor, _op_output, record_op, default_dtype

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def as_tensor(x):
    """Wrap plain data as a constant Tensor; pass Tensors through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _op_output(a.data + b.data)

    def bwd(gs):
        g = gs[0]
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return record_op("add", (a, b), (out,), bwd)[0]


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _op_output(a.data - b.data)

    def bwd(gs):
        g = gs[0]
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return record_op("sub", (a, b), (out,), bwd)[0]


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _op_output(a.data * b.data)

    def bwd(gs):
        g = gs[0]
        return ((a, _unbroadcast(g * b.data, a.data.shape)),
                (b, _unbroadcast(g * a.data, b.data.shape)))

    return record_op("mul", (a, b), (out,), bwd)[0]


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _op_output(a.data / b.data)

    def bwd(gs):
        g = gs[0]
        return ((a, _unbroadcast(g / b.data, a.data.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))

    return record_op("div", (a, b), (out,), bwd)[0]


def neg(a):
    a = as_tensor(a)
    out = _op_output(-a.data)

    def bwd(gs):
        return ((a, -gs[0]),)

    return record_op("neg", (a,), (out,), bwd)[0]


def exp(a):
    a = as_tensor(a)
    val = np.exp(a.data)
    out = _op_output(val)

    def bwd(gs):
        return ((a, gs[0] * val),)

    return record_op("exp", (a,), (out,), bwd)[0]


def log(a):
    a = as_tensor(a)
    out = _op_output(np.log(a.data))

    def bwd(gs):
        return ((a, gs[0] / a.data),)

    return record_op("log", (a,), (out,), bwd)[0]


def sqrt(a):
    a = as_tensor(a)
    val = np.sqrt(a.data)
    out = _op_output(val)

    def bwd(gs):
        return ((a, gs[0] * (0.5 / val)),)

    return record_op("sqrt", (a,), (out,), bwd)[0]


def square(a):
    a = as_tensor(a)
    out = _op_output(a.data * a.data)

    def bwd(gs):
        return ((a, gs[0] * (2.0 * a.data)),)

    return record_op("square", (a,), (out,), bwd)[0]


def pow_const(a, p):
    """a ** p for a constant exponent p."""
    a = as_tensor(a)
    out = _op_output(a.data ** p)

    def bwd(gs):
        return ((a, gs[0] * (p * a.data ** (p - 1))),)

    return record_op("pow_const", (a,), (out,), bwd)[0]


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient passes only where no bound is active."""
    a = as_tensor(a)
    val = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi
    out = _op_output(val)

    def bwd(gs):
        return ((a, gs[0] * inside),)

    return record_op("clamp", (a,), (out,), bwd)[0]


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    out = _op_output(np.where(mask, a.data, 0))

    def bwd(gs):
        return ((a, gs[0] * mask),)

    return record_op("relu", (a,), (out,), bwd)[0]


def gelu(a):
    """Exact (erf-form) gelu."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = _op_output(x * cdf)

    def bwd(gs):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return ((a, gs[0] * (cdf + x * pdf).astype(x.dtype)),)

    return record_op("gelu", (a,), (out,), bwd)[0]


def sigmoid(a):
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = _op_output(s)

    def bwd(gs):
        return ((a, gs[0] * (s * (1.0 - s))),)

    return record_op("sigmoid", (a,), (out,), bwd)[0]


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)
    out = _op_output(t)

    def bwd(gs):
        return ((a, gs[0] * (1.0 - t * t)),)

    return record_op("tanh", (a,), (out,), bwd)[0]


# -- reductions -----------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = _op_output(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(gs):
        g = gs[0]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False)),)

    return record_op("sum", (a,), (out,), bwd)[0]


def mean_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = _op_output(a.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]

    def bwd(gs):
        g = gs[0]
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        g = np.broadcast_to(g, a.data.shape) / count
        return ((a, g.astype(a.data.dtype, copy=False)),)

    return record_op("mean", (a,), (out,), bwd)[0]


# -- shape manipulation ---------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    out = _op_output(a.data.reshape(shape))

    def bwd(gs):
        return ((a, gs[0].reshape(a.data.shape)),)

    return record_op("reshape", (a,), (out,), bwd)[0]


def transpose(a, axes):
    a = as_tensor(a)
    out = _op_output(np.ascontiguousarray(a.data.transpose(axes)))
    inv = np.argsort(axes)

    def bwd(gs):
        return ((a, np.ascontiguousarray(gs[0].transpose(inv))),)

    return record_op("transpose", (a,), (out,), bwd)[0]


def swapaxes(a, ax1, ax2):
    axes = list(range(as_tensor(a).ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat expects at least one tensor")
    out = _op_output(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(gs):
        pieces = np.split(gs[0], splits, axis=axis)
        return tuple((t, np.ascontiguousarray(p)) for t, p in zip(tensors, pieces))

    return record_op("concat", tuple(tensors), (out,), bwd)[0]


def stack(tensors, axis=0):
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in map(as_tensor, tensors)]
    return concat(expanded, axis=axis)


def index(a, key):
    """Basic (slice/int/ellipsis) indexing; backward scatters into zeros."""
    a = as_tensor(a)
    out = _op_output(np.ascontiguousarray(a.data[key]))

    def bwd(gs):
        g = np.zeros_like(a.data)
        g[key] = gs[0].reshape(g[key].shape)
        return ((a, g),)

    return record_op("index", (a,), (out,), bwd)[0]


def gather(a, idx, axis=0):
    """Integer-array take along one axis; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out = _op_output(np.take(a.data, idx, axis=axis))

    def bwd(gs):
        g = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(g, idx, gs[0])
        else:
            gm = np.moveaxis(g, axis, 0)
            np.add.at(gm, idx, np.moveaxis(gs[0], axis, 0))
        return ((a, g),)

    return record_op("gather", (a,), (out,), bwd)[0]


def pad2d(a, pad):
    """Zero-pad the trailing two axes by `pad` on each side."""
    a = as_tensor(a)
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    out = _op_output(np.pad(a.data, width))
    sl = (Ellipsis, slice(pad, pad + a.shape[-2]), slice(pad, pad + a.shape[-1]))

    def bwd(gs):
        return ((a, np.ascontiguousarray(gs[0][sl])),)

    return record_op("pad2d", (a,), (out,), bwd)[0]


# -- linear algebra -------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    out = _op_output(a.data @ b.data)

    def bwd(gs):
        g = gs[0]
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ((a, _unbroadcast(ga, a.data.shape)), (b, _unbroadcast(gb, b.data.shape)))

    return record_op("matmul", (a, b), (out,), bwd)[0]


# -- selection ------------------------------------------------------------

def topk_indices(a, k):
    """Indices of the k largest entries of a flattened tensor.

    Non-differentiable selection: returns a plain int array. Ties break
    toward the lower linear index (stable sort on descending value).
    """
    a = as_tensor(a)
    flat = a.data.reshape(-1)
    if not 0 < k <= flat.size:
        raise ContractError(f"topk k={k} out of range for size {flat.size}")
    order = np.argsort(-flat, kind="stable")
    return np.ascontiguousarray(order[:k])


def take_flat(a, idx):
    """Differentiable flat gather: a.reshape(-1)[idx]."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    out = _op_output(a.data.reshape(-1)[idx])

    def bwd(gs):
        g = np.zeros(a.data.size, dtype=a.data.dtype)
        np.add.at(g, idx, gs[0])
        return ((a, g.reshape(a.data.shape)),)

    return record_op("take_flat", (a,), (out,), bwd)[0]


def scatter_flat(values, idx, size):
    """Differentiable scatter-add of a 1-D tensor into a zero vector.

    Returns a (size,) tensor with out[idx[j]] += values[j]; the adjoint is
    a flat gather at idx.
    """
    values = as_tensor(values)
    idx = np.asarray(idx)
    if values.ndim != 1 or idx.shape != values.shape:
        raise ContractError(
            f"scatter_flat expects matching 1-D values/idx; got {values.shape}, {idx.shape}")
    buf = np.zeros(size, dtype=values.data.dtype)
    np.add.at(buf, idx, values.data)
    out = _op_output(buf)

    def bwd(gs):
        return ((values, gs[0][idx]),)

    return record_op("scatter_flat", (values,), (out,), bwd)[0]


# -- composites -----------------------------------------------------------

def softmax(a, axis=-1):
    """Shift-stabilized softmax; the max shift is treated as a constant."""
    a = as_tensor(a)
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True), dtype=a.data.dtype)
    e = exp(sub(a, shift))
    return div(e, sum_(e, axis=axis, keepdims=True))


def layernorm(x, gamma, beta, eps=1e-5):
    """Layer normalization over the last axis."""
    mu = mean_(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean_(square(xc), axis=-1, keepdims=True)
    inv = pow_const(add(var, eps), -0.5)
    return add(mul(mul(xc, inv), gamma), beta)


def l2_normalize(x, axis, eps=1e-8):
    norm = sqrt(add(sum_(square(x), axis=axis, keepdims=True), eps))
    return div(x, norm)


def mse(a, b):
    return mean_(square(sub(a, b)))


# -- convolution ----------------------------------------------------------

def _conv_geometry(h, w, k, stride, padding):
    if padding == "same":
        pad = (k - 1) // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ContractError(f"padding must be 'same' or 'valid', got {padding!r}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ContractError(f"conv output would be empty for input {h}x{w}, kernel {k}")
    return pad, ho, wo


def _im2col(x, k, stride, pad):
    """(C,H,W) -> (C*k*k, Ho*Wo) patch matrix."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[0], win.shape[1], win.shape[2]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * k * k, ho * wo), ho, wo


def _col2im(cols, c, h, w, k, stride, pad):
    """Adjoint of _im2col: scatter-add patches back to (C,H,W)."""
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    buf = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    colsr = cols.reshape(c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            buf[:, i:i + (ho - 1) * stride + 1:stride,
                j:j + (wo - 1) * stride + 1:stride] += colsr[:, i, j]
    if pad:
        buf = buf[:, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(buf)


def conv2d(x, w, b=None, stride=1, padding="same"):
    """2D convolution (cross-correlation) of a single image.

    x: (C_in, H, W); w: (C_out, C_in, k, k); b: (C_out,) or None.
    stride in {1, 2}; padding 'same' (odd kernels) or 'valid'.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ContractError(f"conv2d expects x (C,H,W) and w (Co,Ci,k,k); got {x.shape}, {w.shape}")
    cin, h, wid = x.shape
    cout, cin_w, k, k2 = w.shape
    if cin != cin_w or k != k2:
        raise ContractError(f"conv2d channel/kernel mismatch: x {x.shape}, w {w.shape}")
    if stride not in (1, 2):
        raise ContractError(f"conv2d stride must be 1 or 2, got {stride}")
    pad, ho, wo = _conv_geometry(h, wid, k, stride, padding)
    cols, _, _ = _im2col(x.data, k, stride, pad)
    wm = w.data.reshape(cout, cin * k * k)
    val = (wm @ cols).reshape(cout, ho, wo)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        val = val + b.data[:, None, None]
        inputs.append(b)
    out = _op_output(val)

    def bwd(gs):
        g = gs[0].reshape(cout, ho * wo)
        gw = (g @ cols.T).reshape(w.data.shape)
        gx = _col2im(wm.T @ g, cin, h, wid, k, stride, pad)
        res = [(x, gx), (w, gw)]
        if b is not None:
            res.append((b, gs[0].sum(axis=(1, 2))))
        return res

    return record_op("conv2d", tuple(inputs), (out,), bwd)[0]


def conv2d_transpose(x, w, b=None, stride=2, kernel_crop=None):
    """Transposed 2D convolution upsampling (C_in,H,W) to (C_out,s*H,s*W).

    w: (C_in, C_out, k, k). Output is the adjoint of a stride-s conv whose
    'same' geometry maps s*H -> H; the accumulation buffer of length
    (H-1)*s + k is cropped starting at (k - s + 1) // 2.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4:
        raise ContractError(
            f"conv2d_transpose expects x (C,H,W) and w (Ci,Co,k,k); got {x.shape}, {w.shape}")
    cin, h, wid = x.shape
    cin_w, cout, k, _ = w.shape
    if cin != cin_w:
        raise ContractError(f"conv2d_transpose channel mismatch: x {x.shape}, w {w.shape}")
    crop = (k - stride + 1) // 2 if kernel_crop is None else kernel_crop
    bh, bw = (h - 1) * stride + k, (wid - 1) * stride + k
    oh, ow = stride * h, stride * wid
    if crop + oh > bh or crop + ow > bw:
        raise ContractError(f"conv2d_transpose kernel {k} too small for stride {stride}")

    wm = w.data.reshape(cin, cout * k * k)
    tmp = (wm.T @ x.data.reshape(cin, h * wid)).reshape(cout, k, k, h, wid)
    buf = np.zeros((cout, bh, bw), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            buf[:, i:i + (h - 1) * stride + 1:stride,
                j:j + (wid - 1) * stride + 1:stride] += tmp[:, i, j]
    val = np.ascontiguousarray(buf[:, crop:crop + oh, crop:crop + ow])
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        val = val + b.data[:, None, None]
        inputs.append(b)
    out = _op_output(val)

    def bwd(gs):
        # Place the upstream grad back in the uncropped buffer, then the
        # input/weight grads are strided correlations against it.
        gbuf = np.zeros((cout, bh, bw), dtype=gs[0].dtype)
        gbuf[:, crop:crop + oh, crop:crop + ow] = gs[0]
        win = sliding_window_view(gbuf, (k, k), axis=(1, 2))[:, ::stride, ::stride]
        cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(cout * k * k, h * wid)
        gx = (wm @ cols).reshape(cin, h, wid)
        gw = (x.data.reshape(cin, h * wid) @ cols.T).reshape(w.data.shape)
        res = [(x, gx), (w, gw)]
        if b is not None:
            res.append((b, gs[0].sum(axis=(1, 2))))
        return res

    return record_op("conv2d_transpose", tuple(inputs), (out,), bwd)[0]


# -- resampling -----------------------------------------------------------

def avg_pool2d(x, k):
    """Non-overlapping k x k average pooling; dims must divide evenly."""
    x = as_tensor(x)
    c, h, w = x.shape
    if h % k or w % k:
        raise ContractError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out = _op_output(x.data.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4)))

    def bwd(gs):
        g = np.repeat(np.repeat(gs[0], k, axis=1), k, axis=2) / (k * k)
        return ((x, g.astype(x.data.dtype, copy=False)),)

    return record_op("avg_pool2d", (x,), (out,), bwd)[0]


def resize_nearest(x, out_hw):
    """Nearest-neighbour resize of (C,H,W) to (C,ho,wo)."""
    x = as_tensor(x)
    c, h, w = x.shape
    ho, wo = out_hw
    iy = np.minimum((np.arange(ho) + 0.5) * h / ho, h - 1).astype(np.int64)
    ix = np.minimum((np.arange(wo) + 0.5) * w / wo, w - 1).astype(np.int64)
    out = _op_output(np.ascontiguousarray(x.data[:, iy[:, None], ix[None, :]]))

    def bwd(gs):
        g = np.zeros_like(x.data)
        np.add.at(g, (slice(None), iy[:, None], ix[None, :]), gs[0])
        return ((x, g),)

    return record_op("resize_nearest", (x,), (out,), bwd)[0]


def _bilinear_weights(n_out, n_in):
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    i0 = np.clip(np.floor(src), 0, n_in - 1).astype(np.int64)
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    t = np.clip(src - i0, 0.0, 1.0)
    return i0, i1, t


def resize_bilinear(x, out_hw):
    """Bilinear resize of (C,H,W) to (C,ho,wo), half-pixel aligned."""
    x = as_tensor(x)
    c, h, w = x.shape
    ho, wo = out_hw
    y0, y1, ty = _bilinear_weights(ho, h)
    x0, x1, tx = _bilinear_weights(wo, w)
    ty = ty[:, None].astype(x.data.dtype)
    tx = tx[None, :].astype(x.data.dtype)
    d = x.data
    top = d[:, y0[:, None], x0[None, :]] * (1 - tx) + d[:, y0[:, None], x1[None, :]] * tx
    bot = d[:, y1[:, None], x0[None, :]] * (1 - tx) + d[:, y1[:, None], x1[None, :]] * tx
    out = _op_output(top * (1 - ty) + bot * ty)

    def bwd(gs):
        g = np.zeros_like(x.data)
        gt = gs[0] * (1 - ty)
        gb = gs[0] * ty
        np.add.at(g, (slice(None), y0[:, None], x0[None, :]), gt * (1 - tx))
        np.add.at(g, (slice(None), y0[:, None], x1[None, :]), gt * tx)
        np.add.at(g, (slice(None), y1[:, None], x0[None, :]), gb * (1 - tx))
        np.add.at(g, (slice(None), y1[:, None], x1[None, :]), gb * tx)
        return ((x, g),)

    return record_op("resize_bilinear", (x,), (out,), bwd)[0]


# -- operator sugar on Tensor --------------------------------------------

def _install_operators():
    Tensor.__add__ = lambda self, o: add(self, o)
    Tensor.__radd__ = lambda self, o: add(o, self)
    Tensor.__sub__ = lambda self, o: sub(self, o)
    Tensor.__rsub__ = lambda self, o: sub(o, self)
    Tensor.__mul__ = lambda self, o: mul(self, o)
    Tensor.__rmul__ = lambda self, o: mul(o, self)
    Tensor.__truediv__ = lambda self, o: div(self, o)
    Tensor.__rtruediv__ = lambda self, o: div(o, self)
    Tensor.__neg__ = lambda self: neg(self)
    Tensor.__matmul__ = lambda self, o: matmul(self, o)
    Tensor.__getitem__ = lambda self, key: index(self, key)


_install_operators()
