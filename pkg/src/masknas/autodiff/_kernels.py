"""Compiled loops for depthwise convolution and the im2col adjoint.

Stride-1 paths work on contiguous row slices so the inner loop vectorizes.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def depthwise_forward(xp, w, out, stride, dilation):
    b_n, c_n, ho, wo = out.shape
    k = w.shape[1]
    for b in range(b_n):
        for c in range(c_n):
            o = out[b, c]
            x = xp[b, c]
            for i in range(k):
                for j in range(k):
                    wv = w[c, i, j]
                    c0 = j * dilation
                    if stride == 1:
                        for h in range(ho):
                            orow = o[h]
                            xrow = x[h + i * dilation, c0:c0 + wo]
                            for q in range(wo):
                                orow[q] += wv * xrow[q]
                    else:
                        for h in range(ho):
                            r = h * stride + i * dilation
                            for q in range(wo):
                                o[h, q] += wv * x[r, q * stride + c0]


@njit(cache=True, fastmath=True)
def depthwise_grad_weight(xp, g, gw, stride, dilation):
    b_n, c_n, ho, wo = g.shape
    k = gw.shape[1]
    for b in range(b_n):
        for c in range(c_n):
            gg = g[b, c]
            x = xp[b, c]
            for i in range(k):
                for j in range(k):
                    c0 = j * dilation
                    acc = np.float32(0.0)
                    if stride == 1:
                        for h in range(ho):
                            grow = gg[h]
                            xrow = x[h + i * dilation, c0:c0 + wo]
                            for q in range(wo):
                                acc += grow[q] * xrow[q]
                    else:
                        for h in range(ho):
                            r = h * stride + i * dilation
                            for q in range(wo):
                                acc += gg[h, q] * x[r, q * stride + c0]
                    gw[c, i, j] += acc


@njit(cache=True, fastmath=True)
def depthwise_grad_input(w, g, gxp, stride, dilation):
    b_n, c_n, ho, wo = g.shape
    k = w.shape[1]
    for b in range(b_n):
        for c in range(c_n):
            gg = g[b, c]
            gx = gxp[b, c]
            for i in range(k):
                for j in range(k):
                    wv = w[c, i, j]
                    c0 = j * dilation
                    if stride == 1:
                        for h in range(ho):
                            grow = gg[h]
                            xrow = gx[h + i * dilation, c0:c0 + wo]
                            for q in range(wo):
                                xrow[q] += grow[q] * wv
                    else:
                        for h in range(ho):
                            r = h * stride + i * dilation
                            for q in range(wo):
                                gx[r, q * stride + c0] += gg[h, q] * wv


@njit(cache=True)
def col2im(dcols, out, stride, dilation):
    """Scatter-add ``dcols`` [B, Ho, Wo, C, k, k] into padded ``out`` [B, C, Hp, Wp]."""
    b_n, ho, wo, c_n, k, _ = dcols.shape
    for b in range(b_n):
        for h in range(ho):
            for q in range(wo):
                for c in range(c_n):
                    for i in range(k):
                        r = h * stride + i * dilation
                        for j in range(k):
                            out[b, c, r, q * stride + j * dilation] += dcols[b, h, q, c, i, j]


def warmup() -> None:
    xp = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w = np.zeros((1, 3, 3), dtype=np.float32)
    out = np.zeros((1, 1, 1, 1), dtype=np.float32)
    depthwise_forward(xp, w, out, 1, 1)
    depthwise_grad_weight(xp, out, np.zeros_like(w), 1, 1)
    depthwise_grad_input(w, out, np.zeros_like(xp), 1, 1)
    col2im(np.zeros((1, 1, 1, 1, 3, 3), dtype=np.float32), np.zeros_like(xp), 1, 1)
