"""Fused per-layer kernels: bias, layer norm and activation in one pass.

The matrix products stay in BLAS; these loops replace the chain of
elementwise numpy temporaries around them, which dominated update time for
the small layers used here.  Arrays carry a leading member axis ``(M, R, n)``
so an ensemble and a single network share one code path.
"""

import math

from numba import njit

RELU, TANH, LINEAR = 0, 1, 2
ACT_CODES = {"relu": RELU, "tanh": TANH, "linear": LINEAR}


@njit(cache=True)
def layer_forward(z, bias, gain, offset, has_ln, act, eps, zhat, inv_std):
    """In place: ``z`` (pre-bias products) becomes the layer output.

    With layer norm, the normalised pre-activations go to ``zhat`` and the
    per-row reciprocal standard deviations to ``inv_std``.
    """
    M, R, n = z.shape
    for m in range(M):
        for r in range(R):
            if has_ln:
                s = 0.0
                for j in range(n):
                    t = z[m, r, j] + bias[m, j]
                    z[m, r, j] = t
                    s += t
                mu = s / n
                v = 0.0
                for j in range(n):
                    d = z[m, r, j] - mu
                    v += d * d
                iv = 1.0 / math.sqrt(v / n + eps)
                inv_std[m, r] = iv
                for j in range(n):
                    zh = (z[m, r, j] - mu) * iv
                    zhat[m, r, j] = zh
                    z[m, r, j] = zh * gain[m, j] + offset[m, j]
            else:
                for j in range(n):
                    z[m, r, j] += bias[m, j]
            if act == RELU:
                for j in range(n):
                    if z[m, r, j] < 0.0:
                        z[m, r, j] = 0.0
            elif act == TANH:
                for j in range(n):
                    z[m, r, j] = math.tanh(z[m, r, j])


@njit(cache=True)
def layer_backward(g, out, zhat, inv_std, gain, has_ln, act, need, g_bias, g_gain, g_offset):
    """In place: ``g`` (grad w.r.t. the layer output) becomes the grad w.r.t.
    the pre-bias products.  Bias and layer-norm grads are summed over rows
    into ``g_bias``, ``g_gain`` and ``g_offset`` when ``need`` is set.
    """
    M, R, n = g.shape
    for m in range(M):
        for r in range(R):
            if act == RELU:
                for j in range(n):
                    if not out[m, r, j] > 0.0:
                        g[m, r, j] = 0.0
            elif act == TANH:
                for j in range(n):
                    o = out[m, r, j]
                    g[m, r, j] *= 1.0 - o * o
            if has_ln:
                s1 = 0.0
                s2 = 0.0
                for j in range(n):
                    gj = g[m, r, j]
                    zh = zhat[m, r, j]
                    if need:
                        g_gain[m, j] += gj * zh
                        g_offset[m, j] += gj
                    gz = gj * gain[m, j]
                    s1 += gz
                    s2 += gz * zh
                s1 /= n
                s2 /= n
                iv = inv_std[m, r]
                for j in range(n):
                    g[m, r, j] = iv * (g[m, r, j] * gain[m, j] - s1 - zhat[m, r, j] * s2)
            if need:
                for j in range(n):
                    g_bias[m, j] += g[m, r, j]


@njit(cache=True)
def adam_update(p, g, m, v, lr, beta1, beta2, eps, correction1, correction2):
    """Bias-corrected Adam on flat arrays, in place.

    Returns -1, or the index of the first non-finite gradient (nothing is
    updated in that case).
    """
    n = p.shape[0]
    for i in range(n):
        if not math.isfinite(g[i]):
            return i
    for i in range(n):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * (gi * gi)
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / correction1) / (math.sqrt(vi / correction2) + eps)
    return -1

