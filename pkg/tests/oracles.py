"""Slow, obviously-correct reference implementations used as test oracles.

None of these import the engine; they are written from the operator
definitions directly.
"""
import math

import numpy as np


def naive_conv2d(x, kernel, bias, dilation):
    n, H, W, cin = x.shape
    k, _, _, cout = kernel.shape
    c = k // 2
    out = np.zeros((n, H, W, cout))
    for b in range(n):
        for y in range(H):
            for xx in range(W):
                for co in range(cout):
                    acc = bias[co]
                    for i in range(k):
                        for j in range(k):
                            yy = y + (i - c) * dilation
                            xq = xx + (j - c) * dilation
                            if 0 <= yy < H and 0 <= xq < W:
                                for ci in range(cin):
                                    acc += x[b, yy, xq, ci] * kernel[i, j, ci, co]
                    out[b, y, xx, co] = acc
    return out


def naive_conv2d_transpose(x, kernel, bias):
    """Scatter form: every input pixel spreads its kernel-weighted value."""
    n, H, W, cin = x.shape
    k, _, _, cout = kernel.shape
    c = k // 2
    out = np.zeros((n, H, W, cout)) + bias
    for b in range(n):
        for y in range(H):
            for xx in range(W):
                for i in range(k):
                    for j in range(k):
                        ty, tx = y + i - c, xx + j - c
                        if 0 <= ty < H and 0 <= tx < W:
                            for ci in range(cin):
                                out[b, ty, tx, :] += x[b, y, xx, ci] * kernel[i, j, ci, :]
    return out


def naive_max_pool(x, p):
    n, H, W, C = x.shape
    out = np.empty((n, H // p, W // p, C))
    for b in range(n):
        for y in range(H // p):
            for xx in range(W // p):
                for c in range(C):
                    best = -math.inf
                    for i in range(p):
                        for j in range(p):
                            best = max(best, x[b, y * p + i, xx * p + j, c])
                    out[b, y, xx, c] = best
    return out


def per_pixel_bce(p, t, m, clamp=1e-7):
    num = den = 0.0
    for pv, tv, mv in zip(np.ravel(p), np.ravel(t), np.ravel(m)):
        pv = min(max(float(pv), clamp), 1 - clamp)
        num += mv * (tv * math.log(pv) + (1 - tv) * math.log(1 - pv))
        den += mv
    return -num / den


def per_pixel_epe(pred, gt, mask):
    num = den = 0.0
    for pv, gv, mv in zip(np.ravel(pred), np.ravel(gt), np.ravel(mask)):
        if mv:
            num += abs(float(pv) - float(gv))
            den += 1
    return num / den


# (kernel, in_channels, out_channels, followed_by_bn) for every convolution of
# the layer table, with C = input image channels.
def densemapnet_conv_table(C):
    rows = [(5, 2 * C, 32, True)]                         # Conv2D_1
    rows += [(5, 32, 32, True)] * 4                       # Conv2D_C1..C4
    rows += [(5, C, 16, True)]                            # Conv2D_2
    for depth in (176, 192, 208, 224):                    # dense layers
        rows += [(1, depth, 64, True), (5, 64, 16, True)]
    rows += [(1, 240, 32, True)]                          # Conv2D_4
    rows += [(5, C, 1, True)]                             # Conv2D_3
    rows += [(5, 33, 16, True)]                           # Conv2D_5
    rows += [(9, 49, 1, False)]                           # Conv2DT_1
    return rows


def symbolic_parameter_count(C):
    trainable = frozen = 0
    for k, cin, cout, bn in densemapnet_conv_table(C):
        trainable += k * k * cin * cout + cout
        if bn:
            trainable += 2 * cout
            frozen += 2 * cout
    return trainable, frozen
