"""Dense 5-axis tensor kernels.

Every array handled here is laid out as ``(n, c, d, h, w)``.  The functions are
plain numpy forward kernels plus the adjoint kernels the autodiff layer needs;
nothing in this module records gradients.
"""
from dataclasses import dataclass
from itertools import product

import numpy as np

AXES = ("n", "c", "d", "h", "w")


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible; ``axis`` names the culprit."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


def _triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    dilation: int = 1
    padding: int = None  # None -> "same" padding for stride 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        if any(k % 2 == 0 for k in self.kernel):
            raise ValueError(f"kernel extents must be odd, got {self.kernel}")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if any(s < 1 for s in self.stride):
            raise ValueError("stride must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.padding is None:
            object.__setattr__(self, "padding", same_padding(self.kernel[0], self.dilation))

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels) + self.kernel


def same_padding(kernel, dilation=1):
    """Per-side zero padding that keeps the extent for stride 1 and an odd kernel."""
    return dilation * (kernel - 1) // 2


def check5(x, name="tensor"):
    if x.ndim != 5:
        raise ShapeError(f"{name} must have 5 axes (n,c,d,h,w), got shape {x.shape}")
    for ax, extent in zip(AXES, x.shape):
        if extent < 1:
            raise ShapeError(f"{name} axis {ax} has extent {extent}", axis=ax)


def conv_output_shape(size, kernel, stride=1, padding=0, dilation=1):
    """Spatial output extents of a convolution, one per axis."""
    out = []
    for ax, n, k, s, p in zip(AXES[2:], _triple(size), _triple(kernel), _triple(stride), _triple(padding)):
        span = n + 2 * p - dilation * (k - 1) - 1
        if span < 0:
            raise ShapeError(
                f"axis {ax}: dilated kernel extent {dilation * (k - 1) + 1} exceeds padded input {n + 2 * p}",
                axis=ax,
            )
        out.append(span // s + 1)
    return tuple(out)


def _taps(kernel, dilation, stride, out_shape):
    # one (weight index, slice triple) pair per kernel offset
    for idx in product(*(range(k) for k in kernel)):
        sl = tuple(
            slice(i * dilation, i * dilation + s * (o - 1) + 1, s)
            for i, s, o in zip(idx, stride, out_shape)
        )
        yield idx, sl


def _pad(x, padding):
    p = _triple(padding)
    if not any(p):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((q, q) for q in p))


def _check_conv(x, w):
    check5(x, "input")
    if w.ndim != 5:
        raise ShapeError(f"weights must be (out_c, in_c, kd, kh, kw), got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {w.shape[1]}", axis="c")


def conv3d(x, w, b=None, stride=1, padding=0, dilation=1):
    """Cross-correlation with zero padding and isotropic dilation.

    Output voxel ``(n, o, z, y, x)`` is ``b[o] + sum_{i,a,b,c} w[o,i,a,b,c] *
    xpad[n, i, z*s + a*dil, y*s + b*dil, x*s + c*dil]``.
    """
    _check_conv(x, w)
    stride = _triple(stride)
    out_shape = conv_output_shape(x.shape[2:], w.shape[2:], stride, padding, dilation)
    xp = _pad(x, padding).transpose(1, 0, 2, 3, 4)  # (cin, n, ...)
    acc = np.zeros((w.shape[0], x.shape[0]) + out_shape, dtype=np.result_type(x, w))
    for idx, sl in _taps(w.shape[2:], dilation, stride, out_shape):
        acc += np.tensordot(w[(slice(None), slice(None)) + idx], xp[(slice(None), slice(None)) + sl], axes=(1, 0))
    out = acc.transpose(1, 0, 2, 3, 4)
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1, 1)
    return np.ascontiguousarray(out)


def conv3d_grad_input(gout, w, in_shape, stride=1, padding=0, dilation=1):
    """Adjoint of :func:`conv3d` with respect to its input (also transposed conv)."""
    stride = _triple(stride)
    p = _triple(padding)
    n, cin = in_shape[:2]
    padded = tuple(s + 2 * q for s, q in zip(in_shape[2:], p))
    out_shape = gout.shape[2:]
    g = gout.transpose(1, 0, 2, 3, 4)
    gxp = np.zeros((cin, n) + padded, dtype=np.result_type(gout, w))
    for idx, sl in _taps(w.shape[2:], dilation, stride, out_shape):
        wk = w[(slice(None), slice(None)) + idx]  # (cout, cin)
        gxp[(slice(None), slice(None)) + sl] += np.tensordot(wk, g, axes=(0, 0))
    gxp = gxp[(slice(None), slice(None)) + tuple(slice(q, q + s) for q, s in zip(p, in_shape[2:]))]
    return np.ascontiguousarray(gxp.transpose(1, 0, 2, 3, 4))


def conv3d_grad_weight(x, gout, kernel, stride=1, padding=0, dilation=1):
    """Adjoint of :func:`conv3d` with respect to its weights."""
    stride = _triple(stride)
    kernel = _triple(kernel)
    xp = _pad(x, padding).transpose(1, 0, 2, 3, 4)
    g = gout.transpose(1, 0, 2, 3, 4)
    gw = np.zeros((gout.shape[1], x.shape[1]) + kernel, dtype=np.result_type(x, gout))
    axes = ([1, 2, 3, 4], [1, 2, 3, 4])
    for idx, sl in _taps(kernel, dilation, stride, gout.shape[2:]):
        gw[(slice(None), slice(None)) + idx] = np.tensordot(g, xp[(slice(None), slice(None)) + sl], axes=axes)
    return gw


def conv_transpose3d(x, w, b=None, stride=2, padding=0, output_padding=0):
    """Transposed convolution, the exact adjoint of a strided :func:`conv3d`.

    ``w`` has shape ``(in_c, out_c, kd, kh, kw)``: it is the weight of the
    forward conv that maps ``out_c`` channels to ``in_c``.  With a 2-wide
    kernel, stride 2 and no padding every spatial extent doubles.
    """
    check5(x, "input")
    if w.ndim != 5 or w.shape[0] != x.shape[1]:
        raise ShapeError(f"weights {w.shape} incompatible with {x.shape[1]} input channels", axis="c")
    stride, p, op = _triple(stride), _triple(padding), _triple(output_padding)
    size = tuple(
        (n - 1) * s - 2 * q + (k - 1) + 1 + e
        for n, s, q, k, e in zip(x.shape[2:], stride, p, w.shape[2:], op)
    )
    if conv_output_shape(size, w.shape[2:], stride, p) != x.shape[2:]:
        raise ShapeError(f"output_padding {op} inconsistent with stride {stride}")
    out = conv3d_grad_input(x, w, (x.shape[0], w.shape[1]) + size, stride, p)
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1, 1)
    return out


def global_avg_pool(x):
    check5(x)
    return x.mean(axis=(2, 3, 4), keepdims=True)


def concat_channels(inputs):
    inputs = list(inputs)
    if not inputs:
        raise ValueError("nothing to concatenate")
    ref = inputs[0]
    for t in inputs:
        check5(t)
        if t.shape[0] != ref.shape[0]:
            raise ShapeError(f"batch mismatch {t.shape[0]} vs {ref.shape[0]}", axis="n")
        for ax, a, b in zip(AXES[2:], t.shape[2:], ref.shape[2:]):
            if a != b:
                raise ShapeError(f"axis {ax} mismatch {a} vs {b}", axis=ax)
    return np.concatenate(inputs, axis=1)


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activation(x, kind):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def broadcast_shape(a, b):
    if a.ndim != b.ndim:
        raise ShapeError(f"rank mismatch {a.shape} vs {b.shape}")
    for ax, p, q in zip(AXES, a.shape, b.shape):
        if p != q and p != 1 and q != 1:
            raise ShapeError(f"axis {ax}: cannot broadcast {p} against {q}", axis=ax)
    return np.broadcast_shapes(a.shape, b.shape)


def broadcast_mul(a, b):
    broadcast_shape(a, b)
    return a * b


def add(a, b):
    broadcast_shape(a, b)
    return a + b


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` over the axes that were broadcast."""
    axes = tuple(i for i, (s, t) in enumerate(zip(shape, g.shape)) if s == 1 and t != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def identity(cls, channels, dtype=np.float64):
        return cls(
            np.ones(channels, dtype), np.zeros(channels, dtype),
            np.zeros(channels, dtype), np.ones(channels, dtype),
        )


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization over ``(n, d, h, w)``.

    In training mode the batch statistics are used and the running buffers are
    updated in place (unbiased variance).  Returns ``(out, cache)``; ``cache``
    holds what the backward pass needs.
    """
    check5(x)
    shape = (1, -1, 1, 1, 1)
    if training:
        mean = x.mean(axis=(0, 2, 3, 4))
        var = x.var(axis=(0, 2, 3, 4))
        m = x.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out, (xhat, inv, training)


def batch_norm_backward(gout, gamma, cache):
    xhat, inv, training = cache
    shape = (1, -1, 1, 1, 1)
    red = (0, 2, 3, 4)
    dgamma = (gout * xhat).sum(axis=red)
    dbeta = gout.sum(axis=red)
    dxhat = gout * gamma.reshape(shape)
    if training:
        m = xhat.size // xhat.shape[1]
        dx = (inv.reshape(shape) / m) * (
            m * dxhat - dxhat.sum(axis=red, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=red, keepdims=True)
        )
    else:
        dx = dxhat * inv.reshape(shape)
    return dx, dgamma, dbeta
