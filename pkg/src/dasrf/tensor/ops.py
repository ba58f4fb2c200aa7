"""Differentiable primitives.

Each primitive computes its forward value with numpy and hands a closure to
:func:`record` that maps the output gradient to input gradients.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from dasrf.errors import ConfigurationError, DimensionError
from dasrf.tensor.core import Tensor, get_dtype, record


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=get_dtype()))


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return record(out, (a, b), back)


def neg(a) -> Tensor:
    a = _wrap(a)
    return record(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    return record(a.data ** exponent, (a,),
                  lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    return record(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return record(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out = (1.0 / (1.0 + np.exp(-a.data))).astype(a.dtype)
    return record(out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1 - out * out),))


def clamp(a, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    a = _wrap(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def straight_through(a, fn) -> Tensor:
    """Forward ``fn(a.data)``, backward identity."""
    a = _wrap(a)
    out = np.asarray(fn(a.data), dtype=a.dtype)
    if out.shape != a.shape:
        raise DimensionError("straight-through function must preserve shape")
    return record(out, (a,), lambda g: (g,))


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record(a.data @ b.data, (a, b), back)


def dense(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with weight shaped (out, in)."""
    x, weight = _wrap(x), _wrap(weight)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"dense expects {weight.shape[1]} input features, got {x.shape[-1]}")
    y = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        y = add(y, bias)
    return y


def apply_linear_map(x, matrix: sp.spmatrix, out_hw: tuple[int, int]) -> Tensor:
    """Apply a sparse (H_out*W_out, H*W) operator to the last two axes of ``x``."""
    x = _wrap(x)
    lead = x.shape[:-2]
    flat = x.data.reshape(-1, x.shape[-2] * x.shape[-1])
    out = np.asarray((matrix @ flat.T).T, dtype=x.dtype).reshape(*lead, *out_hw)

    def back(g):
        gflat = g.reshape(-1, out_hw[0] * out_hw[1])
        gx = np.asarray((matrix.T @ gflat.T).T, dtype=x.dtype)
        return (gx.reshape(x.shape),)

    return record(out, (x,), back)


# -- reductions and shape --------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(np.asarray(out, dtype=a.dtype), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a, index) -> Tensor:
    a = _wrap(a)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return record(np.array(a.data[index]), (a,), back)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record(out, tensors, back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return record(out, tensors, back)


# -- normalisation / losses -------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), back)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), back)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (N, K)."""
    logits = _wrap(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects (N,K) logits and (N,) labels, got {logits.shape}, {labels.shape}")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), back)


def pixel_cross_entropy(logits, labels, mask=None) -> Tensor:
    """Cross entropy over (N, K, H, W) maps; ``mask`` weights pixels (0 = ignore)."""
    logits = _wrap(logits)
    n, k, h, w = logits.shape
    flat = logits.data.transpose(0, 2, 3, 1).reshape(-1, k)
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    weights = np.ones(lab.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype).reshape(-1)
    total = max(weights.sum(), 1.0)
    shifted = flat - flat.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -(logp[np.arange(lab.size), lab] * weights).sum() / total

    def back(g):
        grad = np.exp(logp)
        grad[np.arange(lab.size), lab] -= 1.0
        grad *= (weights / total)[:, None] * g
        return (grad.reshape(n, h, w, k).transpose(0, 3, 1, 2),)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), back)


# -- convolution and pooling -----------------------------------------------

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(size: int, k: int, s: int, p: int, d: int) -> int:
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


def conv2d_raw(x, weight, bias=None, stride=1, padding=0, dilation=1) -> Tensor:
    """2D cross-correlation over (N, C, H, W) input with (O, C, kh, kw) weights."""
    x, weight = _wrap(x), _wrap(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise DimensionError(f"conv2d input has {c} channels, weight expects {cw}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    ho = conv_output_size(h, kh, sh, ph, dh)
    wo = conv_output_size(w, kw, sw, pw, dw)
    if ho <= 0 or wo <= 0:
        raise ConfigurationError(f"conv2d output extent is non-positive ({ho}x{wo})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = np.empty((n, ho, wo, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i * dh: i * dh + sh * (ho - 1) + 1: sh, j * dw: j * dw + sw * (wo - 1) + 1: sw]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    cols2 = cols.reshape(n * ho * wo, c * kh * kw)
    w2 = weight.data.reshape(o, -1)
    out = (cols2 @ w2.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    inputs = [x, weight]
    if bias is not None:
        bias = _wrap(bias)
        out = out + bias.data.reshape(1, o, 1, 1)
        inputs.append(bias)
    out = np.ascontiguousarray(out)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols2).reshape(weight.shape)
        gcols = (g2 @ w2).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i * dh: i * dh + sh * (ho - 1) + 1: sh, j * dw: j * dw + sw * (wo - 1) + 1: sw] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph: ph + h, pw: pw + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return record(out, inputs, back)


def max_pool2d(x, kernel=2, stride=None, padding=0) -> Tensor:
    x = _wrap(x)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, sh, ph, 1)
    wo = conv_output_size(w, kw, sw, pw, 1)
    if ho <= 0 or wo <= 0:
        raise ConfigurationError(f"max_pool2d output extent is non-positive ({ho}x{wo})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf) if (ph or pw) else x.data
    windows = np.stack([xp[:, :, i: i + sh * (ho - 1) + 1: sh, j: j + sw * (wo - 1) + 1: sw]
                        for i in range(kh) for j in range(kw)], axis=-1)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for idx in range(kh * kw):
            i, j = divmod(idx, kw)
            gxp[:, :, i: i + sh * (ho - 1) + 1: sh, j: j + sw * (wo - 1) + 1: sw] += g * (arg == idx)
        return (gxp[:, :, ph: ph + h, pw: pw + w],)

    return record(np.ascontiguousarray(out), (x,), back)


def global_avg_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    return mean(x, axis=(2, 3))


# -- resampling --------------------------------------------------------------

def _bilinear_resize_matrix(h, w, ho, wo) -> sp.csr_matrix:
    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        m = np.zeros((n_out, n_in))
        m[np.arange(n_out), lo] += 1 - frac
        m[np.arange(n_out), hi] += frac
        return m

    return sp.csr_matrix(sp.kron(axis_weights(h, ho), axis_weights(w, wo)))


def resize_bilinear(x, size: tuple[int, int]) -> Tensor:
    x = _wrap(x)
    h, w = x.shape[-2:]
    if (h, w) == tuple(size):
        return x
    return apply_linear_map(x, _bilinear_resize_matrix(h, w, *size), tuple(size))



def channel_norm(x, gamma, beta, eps: float = 1e-5, stats=None) -> Tensor:
    """Per-channel affine normalisation of (N, C, H, W) activations.

    With ``stats=None`` the batch mean/variance are used; otherwise ``stats``
    is a (mean, var) pair of frozen numpy arrays.
    """
    x = _wrap(x)
    c = x.shape[1]
    if stats is None:
        mu = mean(x, axis=(0, 2, 3), keepdims=True)
        centered = sub(x, mu)
        var = mean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
    else:
        mu_np, var_np = stats
        centered = sub(x, Tensor(np.asarray(mu_np, dtype=x.dtype).reshape(1, c, 1, 1), dtype=x.dtype))
        var = Tensor(np.asarray(var_np, dtype=x.dtype).reshape(1, c, 1, 1), dtype=x.dtype)
    normed = div(centered, power(add(var, eps), 0.5))
    return add(mul(normed, reshape(gamma, (1, c, 1, 1))), reshape(beta, (1, c, 1, 1)))
