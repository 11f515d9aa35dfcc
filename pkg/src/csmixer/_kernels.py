"""Hot numeric kernels with numba and pure-numpy implementations.

The numba path is used when numba imports cleanly and ``CSMX_NUMBA`` is not
set to ``0``. Both paths are always importable so tests and the benchmark can
compare them directly::

    from csmixer import _kernels
    _kernels.numpy_impl.im2col(x, k, stride, pad)
    _kernels.numba_impl.im2col(x, k, stride, pad)   # None if numba missing
"""
from __future__ import annotations

import math
import os
import types

import numpy as np
from scipy.special import erf as _erf

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------------
# pure numpy
# --------------------------------------------------------------------------

def _np_im2col(x, k, stride, pad):
    # x: (B, H, W, C) -> (B, Ho, Wo, k, k, C)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, Ho, Wo, C, k, k)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _np_col2im(cols, h, w, stride, pad):
    b, ho, wo, k, _, c = cols.shape
    out = np.zeros((b, h + 2 * pad, w + 2 * pad, c))
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, i:i + span_h:stride, j:j + span_w:stride, :] += cols[:, :, :, i, j, :]
    if pad:
        out = out[:, pad:pad + h, pad:pad + w, :]
    return np.ascontiguousarray(out)


def _np_gelu(x):
    return 0.5 * x * (1.0 + _erf(x * _SQRT1_2))


def _np_gelu_grad(x, g):
    cdf = 0.5 * (1.0 + _erf(x * _SQRT1_2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return g * (cdf + x * pdf)


def _np_layer_norm(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[..., 0]


def _np_layer_norm_grad(g, xhat, rstd, gain):
    c = xhat.shape[-1]
    lead = tuple(range(g.ndim - 1))
    dgain = (g * xhat).sum(axis=lead)
    dbias = g.sum(axis=lead)
    gx = g * gain
    dx = (gx - gx.mean(axis=-1, keepdims=True)
          - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / c) * rstd[..., None]
    return dx, dgain, dbias


numpy_impl = types.SimpleNamespace(
    name="numpy",
    im2col=_np_im2col,
    col2im=_np_col2im,
    gelu=_np_gelu,
    gelu_grad=_np_gelu_grad,
    layer_norm=_np_layer_norm,
    layer_norm_grad=_np_layer_norm_grad,
)


# --------------------------------------------------------------------------
# numba
# --------------------------------------------------------------------------

def _build_numba():
    try:
        import numba as nb
    except ImportError:  # pragma: no cover - numba is a declared dependency
        return None

    @nb.njit(cache=True)
    def _im2col_k(x, k, stride, pad, out):
        b_, h, w, c = x.shape
        ho, wo = out.shape[1], out.shape[2]
        for b in range(b_):
            for oi in range(ho):
                for oj in range(wo):
                    for i in range(k):
                        r = oi * stride + i - pad
                        if r < 0 or r >= h:
                            continue
                        for j in range(k):
                            s = oj * stride + j - pad
                            if s < 0 or s >= w:
                                continue
                            for ch in range(c):
                                out[b, oi, oj, i, j, ch] = x[b, r, s, ch]

    @nb.njit(cache=True)
    def _col2im_k(cols, stride, pad, out):
        b_, ho, wo, k, _, c = cols.shape
        h, w = out.shape[1], out.shape[2]
        for b in range(b_):
            for oi in range(ho):
                for oj in range(wo):
                    for i in range(k):
                        r = oi * stride + i - pad
                        if r < 0 or r >= h:
                            continue
                        for j in range(k):
                            s = oj * stride + j - pad
                            if s < 0 or s >= w:
                                continue
                            for ch in range(c):
                                out[b, r, s, ch] += cols[b, oi, oj, i, j, ch]

    @nb.njit(cache=True)
    def _gelu_k(x, out):
        for i in range(x.size):
            v = x[i]
            out[i] = 0.5 * v * (1.0 + math.erf(v * _SQRT1_2))

    @nb.njit(cache=True)
    def _gelu_grad_k(x, g, out):
        for i in range(x.size):
            v = x[i]
            cdf = 0.5 * (1.0 + math.erf(v * _SQRT1_2))
            pdf = math.exp(-0.5 * v * v) * _INV_SQRT_2PI
            out[i] = g[i] * (cdf + v * pdf)

    @nb.njit(cache=True)
    def _ln_k(x, gain, bias, eps, y, xhat, rstd):
        n, c = x.shape
        for r in range(n):
            mu = 0.0
            for j in range(c):
                mu += x[r, j]
            mu /= c
            var = 0.0
            for j in range(c):
                d = x[r, j] - mu
                var += d * d
            var /= c
            rs = 1.0 / math.sqrt(var + eps)
            rstd[r] = rs
            for j in range(c):
                xh = (x[r, j] - mu) * rs
                xhat[r, j] = xh
                y[r, j] = xh * gain[j] + bias[j]

    @nb.njit(cache=True)
    def _ln_grad_k(g, xhat, rstd, gain, dx, dgain, dbias):
        n, c = g.shape
        for r in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(c):
                gx = g[r, j] * gain[j]
                s1 += gx
                s2 += gx * xhat[r, j]
                dgain[j] += g[r, j] * xhat[r, j]
                dbias[j] += g[r, j]
            s1 /= c
            s2 /= c
            for j in range(c):
                dx[r, j] = (g[r, j] * gain[j] - s1 - xhat[r, j] * s2) * rstd[r]

    def im2col(x, k, stride, pad):
        b, h, w, c = x.shape
        ho = (h + 2 * pad - k) // stride + 1
        wo = (w + 2 * pad - k) // stride + 1
        out = np.zeros((b, ho, wo, k, k, c))
        _im2col_k(np.ascontiguousarray(x), k, stride, pad, out)
        return out

    def col2im(cols, h, w, stride, pad):
        b, c = cols.shape[0], cols.shape[-1]
        out = np.zeros((b, h, w, c))
        _col2im_k(np.ascontiguousarray(cols), stride, pad, out)
        return out

    def gelu(x):
        flat = np.ascontiguousarray(x).reshape(-1)
        out = np.empty_like(flat)
        _gelu_k(flat, out)
        return out.reshape(x.shape)

    def gelu_grad(x, g):
        xf = np.ascontiguousarray(x).reshape(-1)
        gf = np.ascontiguousarray(g).reshape(-1)
        out = np.empty_like(xf)
        _gelu_grad_k(xf, gf, out)
        return out.reshape(x.shape)

    def layer_norm(x, gain, bias, eps):
        shape = x.shape
        x2 = np.ascontiguousarray(x).reshape(-1, shape[-1])
        y = np.empty_like(x2)
        xhat = np.empty_like(x2)
        rstd = np.empty(x2.shape[0])
        _ln_k(x2, np.ascontiguousarray(gain), np.ascontiguousarray(bias), eps, y, xhat, rstd)
        return y.reshape(shape), xhat.reshape(shape), rstd.reshape(shape[:-1])

    def layer_norm_grad(g, xhat, rstd, gain):
        shape = g.shape
        c = shape[-1]
        dx = np.empty((int(np.prod(shape[:-1])), c))
        dgain = np.zeros(c)
        dbias = np.zeros(c)
        _ln_grad_k(np.ascontiguousarray(g).reshape(-1, c),
                   np.ascontiguousarray(xhat).reshape(-1, c),
                   np.ascontiguousarray(rstd).reshape(-1),
                   np.ascontiguousarray(gain), dx, dgain, dbias)
        return dx.reshape(shape), dgain, dbias

    return types.SimpleNamespace(
        name="numba",
        im2col=im2col,
        col2im=col2im,
        gelu=gelu,
        gelu_grad=gelu_grad,
        layer_norm=layer_norm,
        layer_norm_grad=layer_norm_grad,
    )


numba_impl = _build_numba()


def _select():
    flag = os.environ.get("CSMX_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off") or numba_impl is None:
        return numpy_impl
    return numba_impl


active = _select()


def use(name: str) -> None:
    """Switch the active backend at runtime (``"numba"`` or ``"numpy"``)."""
    global active
    if name == "numpy":
        active = numpy_impl
    elif name == "numba":
        if numba_impl is None:
            raise RuntimeError("numba is not available")
        active = numba_impl
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
