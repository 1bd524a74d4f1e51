"""Forward and backward numeric kernels over NCHW arrays.

Tensors are plain ``numpy.ndarray`` objects of shape ``(n, c, h, w)``.
Kernels keep the dtype of their inputs, so float32 is the working precision
and float64 inputs give the high-precision path used for gradient checks.
Every convolution is 3x3 with zero padding 1 and cross-correlation semantics.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def check_tensor(x, name="x"):
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a 4-D (n, c, h, w) array",
                         expected=4, actual=getattr(x, "ndim", None))
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}",
                         actual=x.shape)
    return x


@dataclass
class ConvParams:
    weight: np.ndarray  # (out_ch, in_ch // groups, 3, 3)
    bias: np.ndarray
    stride: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2:] != (3, 3):
            raise ShapeError("convolution kernels must be 3x3",
                             expected=(3, 3), actual=self.weight.shape[2:])
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        out_ch = self.weight.shape[0]
        if self.groups < 1 or out_ch % self.groups:
            raise ShapeError(f"groups={self.groups} does not divide out_ch={out_ch}")
        if self.bias.shape != (out_ch,):
            raise ShapeError("bias length must equal out_ch",
                             expected=(out_ch,), actual=self.bias.shape)

    @property
    def in_channels(self):
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self):
        return self.weight.shape[0]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def identity(cls, channels, dtype=np.float32):
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype))


@dataclass
class ConvCache:
    """Saved forward state needed by :func:`conv2d_backward`."""
    input_shape: tuple
    stride: int
    groups: int
    phases: dict  # (row_phase, col_phase) -> channel-major flat buffer
    grid: tuple  # (hq, wq) of each phase image


def _out_size(size, stride):
    return (size - 1) // stride + 1


# Layout used by the convolution
# ------------------------------
# The zero-padded input is split into stride x stride phase images (a single
# phase when stride is 1) of size (hq, wq) each, stored channel-major and
# flattened to a (c, n*hq*wq + margin) matrix. Output pixel (i, j) of image b
# sits at flat column p = b*hq*wq + i*wq + j, and tap (ky, kx) reads phase
# (ky % s, kx % s) at column p + (ky // s) * wq + kx // s. Every tap is thus a
# contiguous slice, so a block of output pixels is gathered into a small
# (9*c, m) matrix with long row copies and multiplied once per group. Columns
# outside the valid (oh, ow) window are computed and discarded.

# Target size of one gathered block of taps.
_BLOCK_BYTES = 1 << 20


def _phase_buffers(x, stride):
    n, c, h, w = x.shape
    hq, wq = -(-(h + 2) // stride), -(-(w + 2) // stride)
    rows = n * hq * wq
    margin = (2 // stride) * (wq + 1)
    xc = x.transpose(1, 0, 2, 3)
    phases = {}
    for a in range(stride):
        for b in range(stride):
            buf = np.zeros((c, rows + margin), dtype=x.dtype)
            img = buf[:, :rows].reshape(c, n, hq, wq)
            # phase row i holds padded row stride*i + a, i.e. input row stride*i + a - 1
            i0, j0 = (stride - a) // stride, (stride - b) // stride
            src = xc[:, :, stride * i0 + a - 1::stride, stride * j0 + b - 1::stride]
            img[:, :, i0:i0 + src.shape[2], j0:j0 + src.shape[3]] = src
            phases[a, b] = buf
    return phases, (hq, wq)


def _taps(stride, wq):
    return [((ky % stride, kx % stride), (ky // stride) * wq + kx // stride)
            for ky in range(3) for kx in range(3)]


def _block_cols(cg, itemsize):
    return max(256, _BLOCK_BYTES // (9 * cg * itemsize))


def _gather(cols, phases, taps, p0, p1, c0, c1):
    cg = c1 - c0
    for k, (ph, off) in enumerate(taps):
        cols[k * cg:(k + 1) * cg] = phases[ph][c0:c1, p0 + off:p1 + off]


def _kernel_matrix(weight, dtype):
    """(out, cg, 3, 3) -> (9*cg, out) with rows ordered (ky, kx, cg)."""
    out_ch, cg = weight.shape[:2]
    return np.ascontiguousarray(weight.transpose(2, 3, 1, 0), dtype=dtype).reshape(9 * cg, out_ch)


def conv2d_forward(x, weight, bias, stride=1, groups=1, save=False):
    """Grouped 3x3 convolution, padding 1.

    Returns ``(y, cache)``; ``cache`` is None unless ``save`` is set.
    """
    check_tensor(x)
    n, c, h, w = x.shape
    out_ch, cg = weight.shape[:2]
    if c != cg * groups:
        raise ShapeError(f"conv2d expected {cg * groups} input channels, got {c}",
                         expected=cg * groups, actual=c)
    og = out_ch // groups
    oh, ow = _out_size(h, stride), _out_size(w, stride)
    dtype = np.result_type(x, weight)
    phases, (hq, wq) = _phase_buffers(x.astype(dtype, copy=False), stride)
    taps = _taps(stride, wq)
    rows = n * hq * wq
    wmat = _kernel_matrix(weight, dtype)
    flat = np.empty((rows, out_ch), dtype=dtype)
    step = _block_cols(cg, flat.itemsize)
    cols = np.empty((9 * cg, min(step, rows)), dtype=dtype)
    for g in range(groups):
        wg = np.ascontiguousarray(wmat[:, g * og:(g + 1) * og])
        for p0 in range(0, rows, step):
            p1 = min(rows, p0 + step)
            block = cols[:, :p1 - p0]
            _gather(block, phases, taps, p0, p1, g * cg, (g + 1) * cg)
            flat[p0:p1, g * og:(g + 1) * og] = block.T @ wg
    y = np.empty((n, out_ch, oh, ow), dtype=dtype)
    np.add(flat.reshape(n, hq, wq, out_ch)[:, :oh, :ow].transpose(0, 3, 1, 2),
           bias.reshape(1, -1, 1, 1).astype(dtype), out=y)
    cache = ConvCache(x.shape, stride, groups, phases, (hq, wq)) if save else None
    return y, cache


def conv2d_backward(dy, cache, weight, need_dx=True):
    """Gradients ``(dx, dweight, dbias)`` of a saved convolution.

    ``dx`` is None when ``need_dx`` is false.
    """
    n, c, h, w = cache.input_shape
    stride, groups = cache.stride, cache.groups
    hq, wq = cache.grid
    out_ch, cg = weight.shape[:2]
    og = out_ch // groups
    oh, ow = dy.shape[2:]
    rows = n * hq * wq
    dtype = dy.dtype
    taps = _taps(stride, wq)
    dyf = np.zeros((n, hq, wq, out_ch), dtype=dtype)
    dyf[:, :oh, :ow] = dy.transpose(0, 2, 3, 1)
    dyf = dyf.reshape(rows, out_ch)
    wmat = _kernel_matrix(weight, dtype)
    dwmat = np.zeros((9 * cg, out_ch), dtype=dtype)
    # stride 1: dx is the convolution of dy with the flipped, transposed kernel
    scatter = need_dx and stride != 1
    dphases = {k: np.zeros_like(v) for k, v in cache.phases.items()} if scatter else None
    step = _block_cols(cg, np.dtype(dtype).itemsize)
    cols = np.empty((9 * cg, min(step, rows)), dtype=dtype)
    for g in range(groups):
        wg = np.ascontiguousarray(wmat[:, g * og:(g + 1) * og])
        for p0 in range(0, rows, step):
            p1 = min(rows, p0 + step)
            block = cols[:, :p1 - p0]
            dblock = dyf[p0:p1, g * og:(g + 1) * og]
            _gather(block, cache.phases, taps, p0, p1, g * cg, (g + 1) * cg)
            dwmat[:, g * og:(g + 1) * og] += block @ dblock
            if scatter:
                dcols = wg @ dblock.T
                for k, (ph, off) in enumerate(taps):
                    dphases[ph][g * cg:(g + 1) * cg, p0 + off:p1 + off] += \
                        dcols[k * cg:(k + 1) * cg]
    dweight = dwmat.reshape(3, 3, cg, out_ch).transpose(3, 2, 0, 1).astype(weight.dtype)
    dbias = dy.sum(axis=(0, 2, 3))
    if not need_dx:
        return None, dweight, dbias
    if not scatter:
        flipped = (weight.astype(dtype, copy=False)
                   .reshape(groups, og, cg, 3, 3).transpose(0, 2, 1, 3, 4)[..., ::-1, ::-1]
                   .reshape(groups * cg, og, 3, 3))
        dx, _ = conv2d_forward(dy, flipped, np.zeros(c, dtype=dtype), 1, groups)
        return dx, dweight, dbias
    dxp = np.empty((c, n, h + 2, w + 2), dtype=dtype)
    for (a, b), buf in dphases.items():
        img = buf[:, :rows].reshape(c, n, hq, wq)
        dxp[:, :, a::stride, b::stride] = img[:, :, :len(range(a, h + 2, stride)),
                                              :len(range(b, w + 2, stride))]
    dx = np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3))
    return dx, dweight, dbias


def conv2d(x, p: ConvParams):
    """3x3 cross-correlation with zero padding 1.

    Output dims are ``(n, out_ch, ceil(h / stride), ceil(w / stride))``.
    Grouped convolution splits input and output channels into ``groups``
    contiguous blocks.
    """
    return conv2d_forward(x, p.weight, p.bias, p.stride, p.groups)[0]


@dataclass
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    training: bool


def batch_norm_forward(x, gamma, beta, running_mean, running_var, training,
                       eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel normalization followed by ``gamma * xhat + beta``.

    In training mode the batch statistics over (n, h, w) are used and the
    running buffers are updated in place.
    """
    check_tensor(x)
    c = x.shape[1]
    if gamma.shape != (c,):
        raise ShapeError(f"batch_norm expected {gamma.shape[0]} channels, got {c}",
                         expected=gamma.shape[0], actual=c)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        if count == 1:
            raise ShapeError("batch_norm in training mode needs more than one "
                             "value per channel")
        mean = x.mean(axis=(0, 2, 3))
        centered = x - mean.reshape(1, -1, 1, 1)
        var = (centered * centered).mean(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (count / (count - 1))
    else:
        mean, var = running_mean, running_var
        centered = x - mean.reshape(1, -1, 1, 1)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std.reshape(1, -1, 1, 1)
    y = xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)
    return y, BatchNormCache(xhat, inv_std, training)


def batch_norm_backward(dy, cache, gamma):
    """Gradients ``(dx, dgamma, dbeta)``."""
    xhat, inv_std = cache.xhat, cache.inv_std
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    scale = (gamma * inv_std).reshape(1, -1, 1, 1)
    if not cache.training:
        return dy * scale, dgamma, dbeta
    count = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dx = scale * (dy - (dbeta.reshape(1, -1, 1, 1)
                        + xhat * dgamma.reshape(1, -1, 1, 1)) / count)
    return dx, dgamma, dbeta


def batch_norm(x, p: BatchNormParams, training=False):
    return batch_norm_forward(x, p.gamma, p.beta, p.running_mean, p.running_var,
                              training, p.eps, p.momentum)[0]


def relu(x):
    return np.maximum(x, 0)


def pixel_shuffle(x):
    """(n, 4c, h, w) -> (n, c, 2h, 2w).

    ``out[n, k, 2i + di, 2j + dj] = in[n, 4k + 2di + dj, i, j]``.
    """
    check_tensor(x)
    n, c, h, w = x.shape
    if c % 4:
        raise ShapeError(f"pixel_shuffle needs channels divisible by 4, got {c}",
                         actual=c)
    out = x.reshape(n, c // 4, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(out).reshape(n, c // 4, 2 * h, 2 * w)


def pixel_unshuffle(x):
    """Exact inverse of :func:`pixel_shuffle`."""
    check_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pixel_unshuffle needs even spatial dims, got {h}x{w}",
                         actual=(h, w))
    out = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(out).reshape(n, 4 * c, h // 2, w // 2)


def add(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"add: shape mismatch {x.shape} vs {y.shape}",
                         expected=x.shape, actual=y.shape)
    return x + y


def concat_channels(parts):
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat_channels: spatial mismatch {ref} vs {p.shape}",
                             expected=ref, actual=p.shape)
    return np.concatenate(parts, axis=1)
