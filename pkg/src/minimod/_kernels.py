"""Fused elementwise/reduction kernels for the autodiff hot path.

numpy's chained elementwise ops make a full memory pass per operator, which
dominates step time at desk scale. These kernels fuse those chains (numba
when available, with equivalent numpy fallbacks). Transcendentals stay in
numpy, whose SIMD exp/tanh beat scalar libm by an order of magnitude.
"""

from __future__ import annotations

import math

import numpy as np

try:
    import numba

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAS_NUMBA = False

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

if _HAS_NUMBA:
    _jit = numba.njit(fastmath=True, cache=True)

    @_jit
    def gelu_inner(x):
        n = x.size
        out = np.empty_like(x)
        xf = x.reshape(n)
        of = out.reshape(n)
        for i in range(n):
            v = xf[i]
            of[i] = _GELU_C * (v + _GELU_A * v * v * v)
        return out

    @_jit
    def gelu_combine(x, th):
        n = x.size
        out = np.empty_like(x)
        xf = x.reshape(n)
        tf = th.reshape(n)
        of = out.reshape(n)
        for i in range(n):
            of[i] = 0.5 * xf[i] * (1.0 + tf[i])
        return out

    @_jit
    def gelu_backward(x, th, g):
        n = x.size
        out = np.empty_like(x)
        xf = x.reshape(n)
        tf = th.reshape(n)
        gf = g.reshape(n)
        of = out.reshape(n)
        for i in range(n):
            v = xf[i]
            t = tf[i]
            d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
            of[i] = gf[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner)
        return out

    @_jit
    def rows_sub_max(x):
        r, c = x.shape
        out = np.empty_like(x)
        for i in range(r):
            m = x[i, 0]
            for j in range(1, c):
                if x[i, j] > m:
                    m = x[i, j]
            for j in range(c):
                out[i, j] = x[i, j] - m
        return out

    @_jit
    def rows_normalize(e):
        r, c = e.shape
        for i in range(r):
            s = 0.0
            for j in range(c):
                s += e[i, j]
            inv = 1.0 / s
            for j in range(c):
                e[i, j] *= inv

    @_jit
    def softmax_backward(y, g):
        r, c = y.shape
        out = np.empty_like(y)
        for i in range(r):
            dot = 0.0
            for j in range(c):
                dot += y[i, j] * g[i, j]
            for j in range(c):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @_jit
    def layer_norm_forward(x, gain, bias, eps):
        r, c = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        inv = np.empty(r, dtype=x.dtype)
        for i in range(r):
            mu = 0.0
            for j in range(c):
                mu += x[i, j]
            mu /= c
            var = 0.0
            for j in range(c):
                d = x[i, j] - mu
                var += d * d
            iv = 1.0 / math.sqrt(var / c + eps)
            inv[i] = iv
            for j in range(c):
                xh = (x[i, j] - mu) * iv
                xhat[i, j] = xh
                out[i, j] = xh * gain[j] + bias[j]
        return out, xhat, inv

    @_jit
    def layer_norm_backward(xhat, inv, gain, g):
        r, c = xhat.shape
        gx_out = np.empty_like(xhat)
        dgain = np.zeros(c, dtype=xhat.dtype)
        dbias = np.zeros(c, dtype=xhat.dtype)
        for i in range(r):
            m1 = 0.0
            m2 = 0.0
            for j in range(c):
                gj = g[i, j]
                dgain[j] += gj * xhat[i, j]
                dbias[j] += gj
                gw = gj * gain[j]
                m1 += gw
                m2 += gw * xhat[i, j]
            m1 /= c
            m2 /= c
            for j in range(c):
                gx_out[i, j] = inv[i] * (g[i, j] * gain[j] - m1 - xhat[i, j] * m2)
        return gx_out, dgain, dbias

    @_jit
    def adam_update(p, g, m, v, lr, b1, b2, bc1, bc2, eps, wd):
        n = p.size
        for i in range(n):
            gi = g[i]
            m[i] = b1 * m[i] + (1.0 - b1) * gi
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
            if lr != 0.0:
                upd = (m[i] / bc1) / (math.sqrt(v[i] / bc2) + eps)
                p[i] -= lr * (upd + wd * p[i])

    @_jit
    def scatter_add_rows(table, rows, g):
        n, c = g.shape
        for i in range(n):
            r = rows[i]
            for j in range(c):
                table[r, j] += g[i, j]

else:  # numpy fallbacks, same math

    def gelu_inner(x):
        return _GELU_C * (x + _GELU_A * x * x * x)

    def gelu_combine(x, th):
        return 0.5 * x * (1.0 + th)

    def gelu_backward(x, th, g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner)

    def rows_sub_max(x):
        return x - x.max(axis=-1, keepdims=True)

    def rows_normalize(e):
        e /= e.sum(axis=-1, keepdims=True)

    def softmax_backward(y, g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return y * (g - dot)

    def layer_norm_forward(x, gain, bias, eps):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        return xhat * gain + bias, xhat, inv[:, 0]

    def layer_norm_backward(xhat, inv, gain, g):
        gx = g * gain
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        out = inv[:, None] * (gx - m1 - xhat * m2)
        return out, np.sum(g * xhat, axis=0), np.sum(g, axis=0)

    def adam_update(p, g, m, v, lr, b1, b2, bc1, bc2, eps, wd):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if lr != 0.0:
            p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + eps) + wd * p)

    def scatter_add_rows(table, rows, g):
        np.add.at(table, rows, g)
