"""Fused selective-scan kernels (numba) for batched training.

The exponentials are taken by numpy (vectorized) before the kernel runs:
``a_bar = exp(delta * a)`` and ``coef = expm1(delta * a) / a`` with shape
(B, T, D, N).  The kernels then run the recurrence, readout and the whole
chain rule back to ``delta``, ``a``, ``b``, ``c`` and ``u`` in a single sweep,
so ``b_bar * u`` and the per-step gradients of ``a_bar`` never hit memory.
The forward kernel keeps all T + 1 states for the backward sweep.

Shapes: u, delta (B, T, D); a (D, N); b, c (B, T, N); h0 (B, D, N);
states (B, T + 1, D, N).
The ``D u`` skip term is left to the caller.
"""

from __future__ import annotations

import os
import warnings

import numpy as np

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    import numba

if "ARC_THREADS" in os.environ:
    numba.set_num_threads(max(1, min(int(os.environ["ARC_THREADS"]), numba.config.NUMBA_NUM_THREADS)))


@numba.njit(parallel=True, fastmath=True, cache=True)
def _fwd(a_bar, coef, b, c, u, h0, post):
    nb, nt, nd, ns = a_bar.shape
    y = np.zeros((nb, nt, nd), dtype=u.dtype)
    hs = np.empty((nb, nt + 1, nd, ns), dtype=u.dtype)
    for i in numba.prange(nb):
        hs[i, 0] = h0[i]
        for t in range(nt):
            for d in range(nd):
                ut = u[i, t, d]
                acc = 0.0
                for n in range(ns):
                    hp = hs[i, t, d, n]
                    hn = a_bar[i, t, d, n] * hp + coef[i, t, d, n] * b[i, t, n] * ut
                    hs[i, t + 1, d, n] = hn
                    acc += c[i, t, n] * (hn if post else hp)
                y[i, t, d] = acc
    return y, hs

@numba.njit(parallel=True, fastmath=True, cache=True)
def _bwd(a_bar, coef, delta, a, b, c, u, hs, g_y, g_ht, post):
    nb, nt, nd, ns = a_bar.shape
    g_u = np.empty_like(u)
    g_delta = np.empty_like(delta)
    g_b = np.zeros_like(b)
    g_c = np.zeros_like(c)
    g_a_parts = np.zeros((nb, nd, ns), dtype=u.dtype)
    g_h0 = np.empty((nb, nd, ns), dtype=u.dtype)
    inv_a = 1.0 / a
    for i in numba.prange(nb):
        lam = g_ht[i].copy()
        if post:
            for d in range(nd):
                for n in range(ns):
                    lam[d, n] += c[i, nt - 1, n] * g_y[i, nt - 1, d]
        g_a = g_a_parts[i]
        gb = np.zeros(ns, dtype=u.dtype)
        gc = np.zeros(ns, dtype=u.dtype)
        for t in range(nt - 1, -1, -1):
            gb[:] = 0.0
            gc[:] = 0.0
            for d in range(nd):
                ut = u[i, t, d]
                dt = delta[i, t, d]
                gy = g_y[i, t, d]
                gy_prev = g_y[i, t - 1, d] if (post and t > 0) else 0.0
                acc_u = 0.0
                acc_delta = 0.0
                for n in range(ns):
                    ab = a_bar[i, t, d, n]
                    cf = coef[i, t, d, n]
                    bn = b[i, t, n]
                    ln = lam[d, n]
                    hp = hs[i, t, d, n]
                    g_ab = ln * hp
                    lub = ln * ut
                    g_cf = lub * bn
                    acc_u += ln * cf * bn
                    acc_delta += (g_ab * a[d, n] + g_cf) * ab
                    g_a[d, n] += g_ab * dt * ab + g_cf * (dt * ab - cf) * inv_a[d, n]
                    gb[n] += lub * cf
                    if post:
                        gc[n] += gy * hs[i, t + 1, d, n]
                        nl = ab * ln
                        if t > 0:
                            nl += c[i, t - 1, n] * gy_prev
                        lam[d, n] = nl
                    else:
                        gc[n] += gy * hp
                        lam[d, n] = ab * ln + c[i, t, n] * gy
                g_u[i, t, d] = acc_u
                g_delta[i, t, d] = acc_delta
            for n in range(ns):
                g_b[i, t, n] = gb[n]
                g_c[i, t, n] = gc[n]
        g_h0[i] = lam
    return g_u, g_delta, g_a_parts.sum(axis=0), g_b, g_c, g_h0


@numba.njit(parallel=True, fastmath=True, cache=True)
def _outer_delta_a(delta, a):
    nb, nt, nd = delta.shape
    ns = a.shape[1]
    x = np.empty((nb, nt, nd, ns), dtype=delta.dtype)
    for i in numba.prange(nb):
        for t in range(nt):
            for d in range(nd):
                dt = delta[i, t, d]
                for n in range(ns):
                    x[i, t, d, n] = dt * a[d, n]
    return x


@numba.njit(parallel=True, fastmath=True, cache=True)
def _scale_by_inverse(x, a):
    nb, nt, nd, ns = x.shape
    inv_a = 1.0 / a
    for i in numba.prange(nb):
        for t in range(nt):
            for d in range(nd):
                for n in range(ns):
                    x[i, t, d, n] *= inv_a[d, n]
    return x


def discretize(delta, a):
    """Vectorized ZOH factors ``(a_bar, coef)`` with ``b_bar = coef * b``.

    numpy's broadcasting multiply is slow for a short trailing axis, so the
    two elementwise products run in numba and only the exponentials in numpy.
    """
    delta = np.ascontiguousarray(delta)
    a = np.ascontiguousarray(a, dtype=delta.dtype)
    x = _outer_delta_a(delta, a)
    a_bar = np.exp(x)
    coef = _scale_by_inverse(np.expm1(x, out=x), a)
    return a_bar, coef


def fused_scan_forward(a_bar, coef, b, c, u, h0, post=False):
    """Return ``(y_ssm, h_terminal, states)``; ``states[:, t]`` is the state before step ``t``."""
    y, hs = _fwd(a_bar, coef, b, c, u, h0, post)
    return y, hs[:, -1].copy(), hs


def fused_scan_backward(a_bar, coef, delta, a, b, c, u, states, g_y, g_ht, post=False):
    """Return ``(g_u, g_delta, g_a, g_b, g_c, g_h0)`` through the ZOH factors."""
    return _bwd(a_bar, coef, delta, a, b, c, u, states, g_y, g_ht, post)
