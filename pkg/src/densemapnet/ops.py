"""NHWC tensor operators with hand-written backward passes.

Every feature map is a 4-D ``numpy.ndarray`` laid out ``[batch, height, width,
channels]``. Forward functions are pure: they never modify their arguments and
return fresh arrays together with whatever the matching backward function
needs.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

TRAIN = "train"
INFERENCE = "inference"

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3
DROPOUT_RATE = 0.2

# Upper bound on elements materialised per im2col block (~32 MB at f32).
_COLS_BUDGET = 1 << 23
_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Raised when operand shapes violate an operator's contract."""


@dataclass(frozen=True)
class OpContext:
    """Execution mode plus the counter-based RNG coordinates for dropout."""

    mode: str = INFERENCE
    rng_seed: int = 0
    rng_stream_id: int = 0

    def __post_init__(self):
        if self.mode not in (TRAIN, INFERENCE):
            raise ValueError(f"mode must be {TRAIN!r} or {INFERENCE!r}, got {self.mode!r}")

    @property
    def training(self) -> bool:
        return self.mode == TRAIN

    def substream(self, site: int) -> "OpContext":
        """Context for one dropout site within the current stream."""
        return replace(self, rng_stream_id=((self.rng_stream_id << 8) | (site & 0xFF)) & _MASK64)

    def rng(self) -> np.random.Generator:
        key = np.array([self.rng_seed & _MASK64, self.rng_stream_id & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class PoolIndexCache:
    """Argmax positions recorded by :func:`max_pool`.

    ``local`` holds, per pooled output cell, the row-major offset (0..pool²-1)
    of the maximum inside its window.
    """

    local: np.ndarray
    input_shape: tuple
    pool: int

    def flat_indices(self) -> np.ndarray:
        """Absolute row-major indices into the pre-pool input."""
        n, h, w, c = self.local.shape
        _, H, W, C = self.input_shape
        p = self.pool
        nn_, yy, xx, cc = np.meshgrid(np.arange(n), np.arange(h), np.arange(w), np.arange(c), indexing="ij")
        rows = yy * p + self.local // p
        cols = xx * p + self.local % p
        return ((nn_ * H + rows) * W + cols) * C + cc


def check_tensor(x, name="input") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D [N,H,W,C], got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _check_conv_args(x, kernel, bias, dilation):
    x = check_tensor(x)
    kernel = np.asarray(kernel)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise ShapeError(f"kernel must be [k,k,Cin,Cout] with odd k, got {kernel.shape}")
    if kernel.shape[2] != x.shape[3]:
        raise ShapeError(
            f"input has {x.shape[3]} channels but kernel expects Cin={kernel.shape[2]} "
            f"(input {x.shape}, kernel {kernel.shape})"
        )
    if bias is not None and np.shape(bias) != (kernel.shape[3],):
        raise ShapeError(f"bias must have shape ({kernel.shape[3]},), got {np.shape(bias)}")
    if int(dilation) != dilation or dilation < 1:
        raise ValueError(f"dilation must be a positive integer, got {dilation}")
    return x, kernel


def _pad_same(x, k, dilation):
    p = (k // 2) * dilation
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def _row_blocks(n, H, W, width):
    """Yield (batch, row0, row1) blocks keeping im2col under the budget."""
    rows = max(1, min(H, _COLS_BUDGET // max(1, W * width)))
    for b in range(n):
        for r0 in range(0, H, rows):
            yield b, r0, min(H, r0 + rows)


def _im2col(xpad, b, r0, r1, W, k, dilation):
    C = xpad.shape[3]
    cols = np.empty((r1 - r0, W, k, k, C), dtype=xpad.dtype)
    for i in range(k):
        y = r0 + i * dilation
        for j in range(k):
            x0 = j * dilation
            cols[:, :, i, j, :] = xpad[b, y:y + r1 - r0, x0:x0 + W, :]
    return cols.reshape(-1, k * k * C)


def _correlate(x, kernel, dilation):
    """Stride-1, zero "same" padded, dilated cross-correlation (no bias)."""
    n, H, W, C = x.shape
    k, cout = kernel.shape[0], kernel.shape[3]
    dtype = np.result_type(x, kernel)
    xpad = _pad_same(x.astype(dtype, copy=False), k, dilation)
    out = np.empty((n, H, W, cout), dtype=dtype)
    if cout < C:
        # Contract channels first, then shift-add the k*k taps.
        halo = 2 * (k // 2) * dilation
        wmat = kernel.astype(dtype, copy=False).transpose(2, 0, 1, 3).reshape(C, k * k * cout)
        for b, r0, r1 in _row_blocks(n, H, W + halo, k * k * cout):
            z = (xpad[b, r0:r1 + halo] @ wmat).reshape(r1 - r0 + halo, W + halo, k, k, cout)
            acc = np.zeros((r1 - r0, W, cout), dtype=dtype)
            for i in range(k):
                for j in range(k):
                    acc += z[i * dilation:i * dilation + r1 - r0, j * dilation:j * dilation + W, i, j]
            out[b, r0:r1] = acc
        return out
    wmat = kernel.astype(dtype, copy=False).reshape(k * k * C, cout)
    for b, r0, r1 in _row_blocks(n, H, W, k * k * C):
        cols = _im2col(xpad, b, r0, r1, W, k, dilation)
        out[b, r0:r1] = (cols @ wmat).reshape(r1 - r0, W, cout)
    return out


def _kernel_grad(x, dout, k, dilation):
    n, H, W, C = x.shape
    cout = dout.shape[3]
    dtype = np.result_type(x, dout)
    if cout < C:
        # dW[i,j] = sum_q x[q]^T dout[q - shift(i,j)]: im2col the narrower operand.
        dpad = _pad_same(dout.astype(dtype, copy=False), k, dilation)
        dw = np.zeros((C, k * k * cout), dtype=dtype)
        for b, r0, r1 in _row_blocks(n, H, W, k * k * cout):
            cols = _im2col(dpad, b, r0, r1, W, k, dilation)
            dw += x[b, r0:r1].reshape(-1, C).astype(dtype, copy=False).T @ cols
        return np.ascontiguousarray(dw.reshape(C, k, k, cout)[:, ::-1, ::-1].transpose(1, 2, 0, 3))
    xpad = _pad_same(x.astype(dtype, copy=False), k, dilation)
    dw = np.zeros((k * k * C, cout), dtype=dtype)
    for b, r0, r1 in _row_blocks(n, H, W, k * k * C):
        cols = _im2col(xpad, b, r0, r1, W, k, dilation)
        dw += cols.T @ dout[b, r0:r1].reshape(-1, cout)
    return dw.reshape(k, k, C, cout)


def _swap_flip(kernel):
    # Adjoint of a same-padded correlation: spatial flip, Cin<->Cout swap.
    return np.ascontiguousarray(kernel[::-1, ::-1].transpose(0, 1, 3, 2))


def conv2d(x, kernel, bias, dilation=1, ctx=None):
    """Dilated "same" convolution. Returns ``(out, cache)``."""
    x, kernel = _check_conv_args(x, kernel, bias, dilation)
    out = _correlate(x, kernel, dilation)
    if bias is not None:
        out += bias
    return out, (x, kernel, dilation)


def conv2d_backward(dout, cache, need_input_grad=True):
    """Returns ``(dx, dkernel, dbias)``; ``dx`` is None when not requested."""
    x, kernel, dilation = cache
    k = kernel.shape[0]
    dkernel = _kernel_grad(x, dout, k, dilation)
    dbias = dout.sum(axis=(0, 1, 2))
    dx = _correlate(dout, _swap_flip(kernel), dilation) if need_input_grad else None
    return dx, dkernel, dbias


def conv2d_transpose(x, kernel, bias, ctx=None):
    """Stride-1 "same" transposed convolution, kernel ``[k,k,Cin,Cout]``.

    Each input pixel scatters ``x[y, x, ci] * kernel[i, j, ci, :]`` onto output
    position ``(y + i - k//2, x + j - k//2)``; equivalently a correlation with
    the spatially flipped kernel.
    """
    x, kernel = _check_conv_args(x, kernel, bias, 1)
    out = _correlate(x, np.ascontiguousarray(kernel[::-1, ::-1]), 1)
    if bias is not None:
        out += bias
    return out, (x, kernel)


def conv2d_transpose_backward(dout, cache, need_input_grad=True):
    x, kernel = cache
    k = kernel.shape[0]
    dkernel = _kernel_grad(x, dout, k, 1)[::-1, ::-1]
    dbias = dout.sum(axis=(0, 1, 2))
    dx = _correlate(dout, np.ascontiguousarray(kernel.transpose(0, 1, 3, 2)), 1) if need_input_grad else None
    return dx, np.ascontiguousarray(dkernel), dbias


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def max_pool(x, pool=8):
    """Non-overlapping max pooling; trailing partial windows are dropped."""
    x = check_tensor(x)
    n, H, W, C = x.shape
    if H < pool or W < pool:
        raise ShapeError(f"max_pool({pool}) needs H, W >= {pool}, got {x.shape}")
    h, w = H // pool, W // pool
    win = x[:, :h * pool, :w * pool, :].reshape(n, h, pool, w, pool, C)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, h, w, C, pool * pool)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    return out, PoolIndexCache(local=local, input_shape=x.shape, pool=pool)


def max_pool_backward(dout, cache: PoolIndexCache):
    n, h, w, C = dout.shape
    p = cache.pool
    win = np.zeros((n, h, w, C, p * p), dtype=dout.dtype)
    np.put_along_axis(win, cache.local[..., None], dout[..., None], axis=-1)
    win = win.reshape(n, h, w, C, p, p).transpose(0, 1, 4, 2, 5, 3).reshape(n, h * p, w * p, C)
    dx = np.zeros(cache.input_shape, dtype=dout.dtype)
    dx[:, :h * p, :w * p, :] = win
    return dx


def upsample_nearest(x, factor=8):
    x = check_tensor(x)
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


def upsample_nearest_backward(dout, factor=8):
    n, H, W, C = dout.shape
    return dout.reshape(n, H // factor, factor, W // factor, factor, C).sum(axis=(2, 4))


def zero_pad(x, target_h, target_w):
    """Pad with zeros on the bottom and right edges up to the target size."""
    x = check_tensor(x)
    n, h, w, c = x.shape
    if target_h < h or target_w < w:
        raise ShapeError(f"zero_pad target {target_h}x{target_w} is smaller than input {h}x{w}")
    if (target_h, target_w) == (h, w):
        return x
    return np.pad(x, ((0, 0), (0, target_h - h), (0, target_w - w), (0, 0)))


def zero_pad_backward(dout, input_shape):
    _, h, w, _ = input_shape
    return np.ascontiguousarray(dout[:, :h, :w, :])


def concat_channels(inputs):
    inputs = [check_tensor(t, f"inputs[{i}]") for i, t in enumerate(inputs)]
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    lead = inputs[0].shape[:3]
    for i, t in enumerate(inputs):
        if t.shape[:3] != lead:
            raise ShapeError(f"concat input {i} has N,H,W {t.shape[:3]}, expected {lead}")
    if len(inputs) == 1:
        return inputs[0]
    return np.concatenate(inputs, axis=3)


def concat_channels_backward(dout, sizes):
    return np.split(dout, np.cumsum(sizes)[:-1], axis=3)


# ---------------------------------------------------------------------------
# normalisation, activations, dropout
# ---------------------------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean, running_var, ctx: OpContext,
               momentum=BN_MOMENTUM, eps=BN_EPSILON):
    """Per-channel batch normalisation.

    Returns ``(out, cache, new_running_mean, new_running_var)``. In inference
    mode the running statistics are used and returned unchanged.
    """
    x = check_tensor(x)
    C = x.shape[3]
    for name, v in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if np.shape(v) != (C,):
            raise ShapeError(f"batch_norm {name} has shape {np.shape(v)}, input has {C} channels")
    if ctx.training:
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        new_mean = momentum * running_mean + (1 - momentum) * mean
        new_var = momentum * running_var + (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    out = gamma * xhat + beta
    return out, (xhat, inv_std, gamma, ctx.training), new_mean, new_var


def batch_norm_backward(dout, cache):
    """Returns ``(dx, dgamma, dbeta)``."""
    xhat, inv_std, gamma, training = cache
    dbeta = dout.sum(axis=(0, 1, 2))
    dgamma = (dout * xhat).sum(axis=(0, 1, 2))
    if training:
        m = dout.shape[0] * dout.shape[1] * dout.shape[2]
        dx = (gamma * inv_std / m) * (m * dout - dbeta - xhat * dgamma)
    else:
        dx = dout * (gamma * inv_std)
    return dx, dgamma, dbeta


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    # Subgradient at exactly 0 is 0.
    return dout * (x > 0)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # Keep the open interval even where the dtype rounds to 0 or 1.
    info = np.finfo(out.dtype)
    return np.clip(out, info.tiny, 1.0 - info.epsneg)


def sigmoid_backward(dout, out):
    return dout * out * (1.0 - out)


def dropout(x, rate=DROPOUT_RATE, ctx: OpContext = None):
    """Inverted dropout. Returns ``(out, mask)``; ``mask`` is None when inactive."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if ctx is None or not ctx.training or rate == 0:
        return x, None
    keep = ctx.rng().random(np.shape(x)) >= rate
    mask = keep.astype(np.result_type(x)) / np.asarray(1.0 - rate, dtype=np.result_type(x))
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask
