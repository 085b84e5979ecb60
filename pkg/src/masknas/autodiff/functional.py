"""Convolution, pooling and normalization primitives with hand-written gradients.

Convolutions are lowered to a single matrix product over an im2col buffer;
the input gradient is scattered back with one strided add per kernel tap.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .tensor import ContractError, DimensionError, Tensor, as_tensor, default_dtype, matmul, transpose

# numba loops for depthwise convolution; the numpy path is kept as a reference
USE_COMPILED = True

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    b, c, h, w = x.shape
    out = np.full((b, c, h + 2 * padding, w + 2 * padding), value, dtype=x.dtype)
    out[:, :, padding : padding + h, padding : padding + w] = x
    return out


def _out_size(size: int, k: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """View of shape (B, C, Ho, Wo, k, k) over a padded input."""
    span = dilation * (k - 1) + 1
    win = sliding_window_view(xp, (span, span), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride, ::dilation, ::dilation]


def _im2col(xp, k, stride, dilation, ho, wo) -> np.ndarray:
    b, c = xp.shape[:2]
    if k == 1 and stride == 1:
        return np.ascontiguousarray(xp.transpose(0, 2, 3, 1)).reshape(b * ho * wo, c)
    win = _windows(xp, k, stride, dilation, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * k * k)


def _tap(i: int, j: int, stride: int, dilation: int, ho: int, wo: int):
    r0, c0 = i * dilation, j * dilation
    return (
        slice(None),
        slice(None),
        slice(r0, r0 + stride * (ho - 1) + 1, stride),
        slice(c0, c0 + stride * (wo - 1) + 1, stride),
    )


def _col2im(dcols: np.ndarray, padded_shape, k, stride, dilation, ho, wo) -> np.ndarray:
    """Adjoint of ``_im2col``; ``dcols`` has shape (B, Ho, Wo, C, k, k)."""
    out = np.zeros(padded_shape, dtype=dcols.dtype)
    if k == 1 and stride == 1:
        return dcols.reshape(dcols.shape[:4]).transpose(0, 3, 1, 2) + out
    if USE_COMPILED:
        _kernels.col2im(np.ascontiguousarray(dcols), out, stride, dilation)
        return out
    for i in range(k):
        for j in range(k):
            out[_tap(i, j, stride, dilation, ho, wo)] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def _crop(xp: np.ndarray, padding: int, h: int, w: int) -> np.ndarray:
    if padding == 0:
        return xp
    return xp[:, :, padding : padding + h, padding : padding + w]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-d cross-correlation of x[B,C,H,W] with weight[O,C/groups,K,K].

    Only ``groups == 1`` and depthwise (``groups == C == O``) are supported.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and weight")
    b, c, h, w = x.shape
    o, cg, k, k2 = weight.shape
    if k != k2:
        raise DimensionError("only square kernels are supported")
    if cg * groups != c:
        raise DimensionError(f"input has {c} channels, weight expects {cg * groups}")
    ho = _out_size(h, k, stride, padding, dilation)
    wo = _out_size(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise DimensionError("kernel larger than padded input")
    if groups == 1:
        out = _conv_dense(x, weight, stride, padding, dilation, ho, wo)
    elif groups == c == o:
        out = _conv_depthwise(x, weight, stride, padding, dilation, ho, wo)
    else:
        raise DimensionError("grouped convolution supports groups=1 or depthwise only")
    if bias is not None:
        out = out + as_tensor(bias).reshape(1, o, 1, 1)
    return out


def _conv_dense(x, weight, stride, padding, dilation, ho, wo) -> Tensor:
    b, c, h, w = x.shape
    o, _, k, _ = weight.shape
    xp = _pad(x.data, padding)
    cols = _im2col(xp, k, stride, dilation, ho, wo)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    padded_shape = xp.shape

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(b, ho, wo, c, k, k)
            gx = _crop(_col2im(dcols, padded_shape, k, stride, dilation, ho, wo), padding, h, w)
        return gx, gw

    return Tensor._make(np.ascontiguousarray(out), (x, weight), backward)


def _conv_depthwise(x, weight, stride, padding, dilation, ho, wo) -> Tensor:
    if USE_COMPILED:
        return _conv_depthwise_compiled(x, weight, stride, padding, dilation, ho, wo)
    return _conv_depthwise_numpy(x, weight, stride, padding, dilation, ho, wo)


def _conv_depthwise_compiled(x, weight, stride, padding, dilation, ho, wo) -> Tensor:
    b, c, h, w = x.shape
    xp = np.ascontiguousarray(_pad(x.data, padding))
    wd = np.ascontiguousarray(weight.data[:, 0])
    out = np.zeros((b, c, ho, wo), dtype=np.result_type(xp, wd))
    _kernels.depthwise_forward(xp, wd, out, stride, dilation)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            _kernels.depthwise_grad_input(wd.astype(g.dtype, copy=False), g, gxp, stride, dilation)
            gx = _crop(gxp, padding, h, w)
        if weight.requires_grad:
            gw = np.zeros(wd.shape, dtype=g.dtype)
            _kernels.depthwise_grad_weight(xp.astype(g.dtype, copy=False), g, gw, stride, dilation)
            gw = gw[:, None]
        return gx, gw

    return Tensor._make(out, (x, weight), backward)


def _conv_depthwise_numpy(x, weight, stride, padding, dilation, ho, wo) -> Tensor:
    b, c, h, w = x.shape
    k = weight.shape[-1]
    xp = _pad(x.data, padding)
    wd = weight.data[:, 0]
    out = np.zeros((b, c, ho, wo), dtype=np.result_type(xp, wd))
    for i in range(k):
        for j in range(k):
            out += xp[_tap(i, j, stride, dilation, ho, wo)] * wd[:, i, j][None, :, None, None]

    def backward(g):
        gw = np.zeros_like(wd) if weight.requires_grad else None
        gxp = np.zeros(xp.shape, dtype=g.dtype) if x.requires_grad else None
        for i in range(k):
            for j in range(k):
                tap = _tap(i, j, stride, dilation, ho, wo)
                if gw is not None:
                    gw[:, i, j] = np.einsum("bchw,bchw->c", g, xp[tap])
                if gxp is not None:
                    gxp[tap] += g * wd[:, i, j][None, :, None, None]
        gx = _crop(gxp, padding, h, w) if gxp is not None else None
        return gx, (gw[:, None] if gw is not None else None)

    return Tensor._make(out, (x, weight), backward)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Transposed convolution; weight layout is [C_in, C_out, K, K].

    Output spatial size is ``(H - 1) * stride - 2 * padding + K``.  The map is
    the adjoint of ``conv2d`` with the same weight, stride and padding.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv_transpose2d expects 4-d input and weight")
    if stride < 1:
        raise ContractError("stride must be >= 1")
    b, c, h, w = x.shape
    ci, co, k, _ = weight.shape
    if ci != c:
        raise DimensionError(f"input has {c} channels, weight expects {ci}")
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise DimensionError("transposed convolution output would be empty")
    wmat = weight.data.reshape(ci, -1)
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, ci)
    dcols = (x2 @ wmat).reshape(b, h, w, co, k, k)
    padded_shape = (b, co, ho + 2 * padding, wo + 2 * padding)
    out = _crop(_col2im(dcols, padded_shape, k, stride, 1, h, w), padding, ho, wo)

    def backward(g):
        cols = _im2col(_pad(g, padding), k, stride, 1, h, w)
        gx = (cols @ wmat.T).reshape(b, h, w, ci).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (x2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        return gx, gw

    out_t = Tensor._make(np.ascontiguousarray(out), (x, weight), backward)
    if bias is not None:
        out_t = out_t + as_tensor(bias).reshape(1, co, 1, 1)
    return out_t


def max_pool2d(x: Tensor, kernel_size: int, stride: int = 1, padding: int = 0) -> Tensor:
    b, c, h, w = x.shape
    k = kernel_size
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    xp = _pad(x.data, padding, value=-np.inf)
    win = _windows(xp, k, stride, 1, ho, wo).reshape(b, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    padded_shape = xp.shape

    def backward(g):
        gxp = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[_tap(i, j, stride, 1, ho, wo)] += g * (arg == i * k + j)
        return (_crop(gxp, padding, h, w),)

    return Tensor._make(np.ascontiguousarray(out), (x,), backward)


def avg_pool2d(x: Tensor, kernel_size: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Average pooling that excludes padded positions from the divisor."""
    b, c, h, w = x.shape
    k = kernel_size
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    xp = _pad(x.data, padding)
    ones = _pad(np.ones((1, 1, h, w), dtype=xp.dtype), padding)
    count = _windows(ones, k, stride, 1, ho, wo).sum(axis=(-1, -2))
    total = np.zeros((b, c, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            total += xp[_tap(i, j, stride, 1, ho, wo)]
    padded_shape = xp.shape

    def backward(g):
        share = g / count
        gxp = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[_tap(i, j, stride, 1, ho, wo)] += share
        return (_crop(gxp, padding, h, w),)

    return Tensor._make(total / count, (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Optional[Tensor],
    beta: Optional[Tensor],
    running_mean: Optional[np.ndarray],
    running_var: Optional[np.ndarray],
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization over (B, H, W) of an NCHW tensor.

    In training mode batch statistics are used and the running buffers (if
    given) are updated in place; in eval mode the running buffers are used.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    xd = x.data
    axes = (0, 2, 3) if xd.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if xd.ndim == 4 else (1, -1)
    n = xd.size // xd.shape[1]
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running_mean is not None:
            unbiased = var * (n / (n - 1)) if n > 1 else var
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    invstd = (1.0 / np.sqrt(var + eps)).astype(default_dtype())
    xhat = (xd - mu.reshape(shape)) * invstd.reshape(shape)
    gd = gamma.data.reshape(shape) if gamma is not None else None
    out = xhat * gd if gd is not None else xhat
    if beta is not None:
        out = out + beta.data.reshape(shape)
    parents = (x,) + tuple(t for t in (gamma, beta) if t is not None)

    def backward(g):
        gxhat = g * gd if gd is not None else g
        if training:
            s1 = gxhat.sum(axis=axes).reshape(shape)
            s2 = (gxhat * xhat).sum(axis=axes).reshape(shape)
            gx = (invstd.reshape(shape) / n) * (n * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * invstd.reshape(shape)
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=axes).reshape(gamma.shape))
        if beta is not None:
            grads.append(g.sum(axis=axes).reshape(beta.shape))
        return tuple(grads)

    return Tensor._make(out, parents, backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[B, in] @ weight[out, in].T + bias[out]."""
    out = matmul(x, transpose(as_tensor(weight), (1, 0)))
    if bias is not None:
        out = out + bias
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3))
