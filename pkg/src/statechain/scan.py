"""Selective scan with an exposed initial state and terminal state.

Recurrence (diagonal ``a_bar``, all products elementwise)::

    h[t+1] = a_bar[t] * h[t] + b_bar_u[t]
    y[t]   = sum_n c[t, n] * h[t, d, n] + d_skip * u[t]      (readout="pre")
    y[t]   = sum_n c[t, n] * h[t+1, d, n] + d_skip * u[t]    (readout="post")

``h[0]`` is the caller's initial state; ``h_terminal`` is ``h[T]``, the state
after consuming ``u[T-1]``; it is the state other texts index as ``h(T-1)``.
A zero ``h0`` gives the conventional zero-initialized scan.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ssm import SelectiveInputs

READOUTS = ("pre", "post")


class ScanOverflowError(ArithmeticError):
    def __init__(self, timestep, what="state"):
        super().__init__(f"non-finite {what} at timestep {timestep}")
        self.timestep = timestep


@dataclass
class BoundaryState:
    h: np.ndarray  # (..., D, N)
    block_index: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.h)):
            raise ValueError("boundary state has non-finite entries")

    @classmethod
    def zeros(cls, inputs: SelectiveInputs, block_index=0):
        shape = inputs.a_bar.shape[:-3] + inputs.a_bar.shape[-2:]
        return cls(np.zeros(shape, dtype=inputs.a_bar.dtype), block_index)


@dataclass
class AdjointSeed:
    """Incoming gradient on ``h_terminal``; zero for the last block of a chain."""

    g_h_terminal: np.ndarray


@dataclass
class ScanOutput:
    y: np.ndarray  # (..., T, D)
    h_terminal: BoundaryState
    checkpoints: np.ndarray | None = None  # (n_chunks, ..., D, N): h at t = 0, chunk, 2*chunk, ...
    chunk: int | None = None


@dataclass
class ScanGrads:
    g_a_bar: np.ndarray
    g_b_bar_u: np.ndarray
    g_c: np.ndarray
    g_d_skip: np.ndarray
    g_u: np.ndarray  # through the skip term only
    g_h0: np.ndarray


def _check(inputs: SelectiveInputs, h0: BoundaryState, readout: str):
    if readout not in READOUTS:
        raise ValueError(f"readout must be one of {READOUTS}, got {readout!r}")
    a_bar = inputs.a_bar
    if inputs.b_bar_u.shape != a_bar.shape:
        raise ValueError("a_bar and b_bar_u shapes differ")
    lead, T, D, N = a_bar.shape[:-3], *a_bar.shape[-3:]
    if inputs.c.shape != (*lead, T, N) or inputs.u.shape != (*lead, T, D):
        raise ValueError("c / u shapes inconsistent with a_bar")
    if h0.h.shape != (*lead, D, N):
        raise ValueError(f"h0 has shape {h0.h.shape}, expected {(*lead, D, N)}")


def _readout(c_t, h, u_t, d_skip):
    return np.einsum("...n,...dn->...d", c_t, h) + d_skip * u_t


def scan_forward_seq(inputs: SelectiveInputs, h0: BoundaryState, readout="pre",
                     checkpoint_every: int | None = None) -> ScanOutput:
    """Reference sequential scan.

    With ``checkpoint_every`` set, states at multiples of it are kept for
    :func:`scan_backward`.
    """
    _check(inputs, h0, readout)
    T = inputs.length
    h = np.array(h0.h, dtype=inputs.a_bar.dtype, copy=True)
    y = np.empty(inputs.u.shape, dtype=h.dtype)
    ckpts = []
    for t in range(T):
        if checkpoint_every and t % checkpoint_every == 0:
            ckpts.append(h.copy())
        h_next = inputs.a_bar[..., t, :, :] * h + inputs.b_bar_u[..., t, :, :]
        if not np.all(np.isfinite(h_next)):
            raise ScanOverflowError(t)
        y[..., t, :] = _readout(inputs.c[..., t, :], h if readout == "pre" else h_next,
                                inputs.u[..., t, :], inputs.d_skip)
        h = h_next
    return ScanOutput(y=y, h_terminal=BoundaryState(h, h0.block_index),
                      checkpoints=np.stack(ckpts) if ckpts else None, chunk=checkpoint_every)


MONOID_UNIT = (1.0, 0.0)


def compose(later, earlier):
    """``(A', B') o (A, B) = (A' A, A' B + B')``: apply ``earlier`` first."""
    a2, b2 = later
    a1, b1 = earlier
    return a2 * a1, a2 * b1 + b2


def _inclusive_prefix(a, b):
    """Hillis-Steele scan over axis 0: element k becomes pair_k o ... o pair_0."""
    a, b = a.copy(), b.copy()
    n, step = a.shape[0], 1
    while step < n:
        a_new, b_new = compose((a[step:], b[step:]), (a[:-step], b[:-step]))
        a[step:], b[step:] = a_new, b_new
        step *= 2
    return a, b


def scan_forward_prefix(inputs: SelectiveInputs, h0: BoundaryState, chunk: int = 16,
                        readout="pre") -> ScanOutput:
    """Chunked prefix-scan evaluation of the same recurrence.

    Inside each chunk the pairs ``(a_bar[k], b_bar_u[k])`` are combined with a
    log-depth inclusive scan; the running state is carried between chunks.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    _check(inputs, h0, readout)
    T = inputs.length
    a_t = np.moveaxis(inputs.a_bar, -3, 0)
    b_t = np.moveaxis(inputs.b_bar_u, -3, 0)
    states = np.empty((T + 1, *h0.h.shape), dtype=inputs.a_bar.dtype)
    states[0] = h0.h
    ckpts = []
    for s in range(0, T, chunk):
        e = min(s + chunk, T)
        ckpts.append(states[s].copy())
        pa, pb = _inclusive_prefix(a_t[s:e], b_t[s:e])
        states[s + 1:e + 1] = pa * states[s] + pb
        if not np.all(np.isfinite(states[s + 1:e + 1])):
            bad = s + int(np.argmin(np.all(np.isfinite(states[s + 1:e + 1]).reshape(e - s, -1), axis=1)))
            raise ScanOverflowError(bad)
    read = states[:-1] if readout == "pre" else states[1:]
    y = np.einsum("t...n,t...dn->t...d", np.moveaxis(inputs.c, -2, 0), read)
    y = np.moveaxis(y, 0, -2) + inputs.d_skip * inputs.u
    return ScanOutput(y=y, h_terminal=BoundaryState(states[-1].copy(), h0.block_index),
                      checkpoints=np.stack(ckpts), chunk=chunk)


def scan_backward(inputs: SelectiveInputs, h0: BoundaryState, g_y: np.ndarray,
                  seed: AdjointSeed | None = None, readout="pre",
                  checkpoints: np.ndarray | None = None, chunk: int = 16) -> ScanGrads:
    """Reverse sweep of the scan with the terminal adjoint seeded from ``seed``.

    States are recomputed chunk by chunk from ``checkpoints`` (taken every
    ``chunk`` steps, as produced by the forward functions); when absent they
    are rebuilt here from ``h0``.  ``g_h0`` is the adjoint at ``t = 0`` that an
    identity boundary map hands to the previous block unchanged.
    """
    _check(inputs, h0, readout)
    T = inputs.length
    lead_shape = h0.h.shape
    dtype = inputs.a_bar.dtype
    if checkpoints is None:
        checkpoints = scan_forward_seq(inputs, h0, readout, checkpoint_every=chunk).checkpoints
    lam = np.zeros(lead_shape, dtype=dtype) if seed is None else np.array(seed.g_h_terminal, dtype=dtype)
    if lam.shape != lead_shape:
        raise ValueError(f"seed has shape {lam.shape}, expected {lead_shape}")

    g_a_bar = np.empty_like(inputs.a_bar)
    g_b_bar_u = np.empty_like(inputs.b_bar_u)
    g_c = np.empty_like(inputs.c)
    c, a_bar = inputs.c, inputs.a_bar
    if readout == "post":
        lam = lam + g_y[..., T - 1, :, None] * c[..., T - 1, None, :]

    n_chunks = -(-T // chunk)
    for k in range(n_chunks - 1, -1, -1):
        s, e = k * chunk, min((k + 1) * chunk, T)
        hs = [checkpoints[k]]
        for t in range(s, e):
            hs.append(a_bar[..., t, :, :] * hs[-1] + inputs.b_bar_u[..., t, :, :])
        for t in range(e - 1, s - 1, -1):
            h_t = hs[t - s]
            gy_t = g_y[..., t, :]
            g_a_bar[..., t, :, :] = lam * h_t
            g_b_bar_u[..., t, :, :] = lam
            if readout == "pre":
                g_c[..., t, :] = np.einsum("...d,...dn->...n", gy_t, h_t)
                lam = a_bar[..., t, :, :] * lam + gy_t[..., :, None] * c[..., t, None, :]
            else:
                g_c[..., t, :] = np.einsum("...d,...dn->...n", gy_t, hs[t - s + 1])
                lam = a_bar[..., t, :, :] * lam
                if t > 0:
                    lam = lam + g_y[..., t - 1, :, None] * c[..., t - 1, None, :]
            if not np.all(np.isfinite(lam)):
                raise ScanOverflowError(t, "adjoint")
    g_u = g_y * inputs.d_skip
    g_d = (g_y * inputs.u).reshape(-1, inputs.u.shape[-1]).sum(axis=0)
    return ScanGrads(g_a_bar=g_a_bar, g_b_bar_u=g_b_bar_u, g_c=g_c, g_d_skip=g_d, g_u=g_u, g_h0=lam)


def scan_oracle_unrolled(inputs: SelectiveInputs, h0: BoundaryState, readout="pre") -> ScanOutput:
    """O(T^2) evaluation from the explicit product-sum form (test oracle).

    ``h[t] = (prod_{j<t} a_bar[j]) h0 + sum_{i<t} (prod_{i<j<t} a_bar[j]) b_bar_u[i]``,
    with every product rebuilt from scratch.
    """
    _check(inputs, h0, readout)
    T = inputs.length
    if T > 512:
        raise ValueError("oracle is test-scale only (T <= 512)")
    a_bar, bu = inputs.a_bar, inputs.b_bar_u

    def prod(lo, hi):
        out = np.ones_like(h0.h)
        for j in range(lo, hi):
            out = out * a_bar[..., j, :, :]
        return out

    def state(t):
        h = prod(0, t) * h0.h
        for i in range(t):
            h = h + prod(i + 1, t) * bu[..., i, :, :]
        return h

    states = [state(t) for t in range(T + 1)]
    y = np.empty(inputs.u.shape, dtype=a_bar.dtype)
    for t in range(T):
        read = states[t] if readout == "pre" else states[t + 1]
        y[..., t, :] = _readout(inputs.c[..., t, :], read, inputs.u[..., t, :], inputs.d_skip)
    return ScanOutput(y=y, h_terminal=BoundaryState(states[T], h0.block_index))


def jacobian_numeric(inputs: SelectiveInputs, h0: BoundaryState, wrt="u", eps=1e-5, readout="pre"):
    """Central-difference Jacobians ``(dy/dx, dh_T/dx)`` for a single sequence.

    ``wrt="u"`` perturbs the token input with the selection held fixed
    (``b_bar_u`` follows ``b_bar * u``).  Rows index flattened ``y`` (t-major)
    or ``h_terminal``; columns index flattened ``u`` or ``h0``.
    """
    if wrt not in ("u", "h0"):
        raise ValueError("wrt must be 'u' or 'h0'")
    if inputs.u.ndim != 2:
        raise ValueError("jacobian_numeric expects an unbatched sequence")
    base = inputs.u if wrt == "u" else h0.h
    n_in = base.size
    cols_y, cols_h = [], []
    for k in range(n_in):
        outs = []
        for sign in (1.0, -1.0):
            x = base.copy().reshape(-1)
            x[k] += sign * eps
            x = x.reshape(base.shape)
            if wrt == "u":
                out = scan_forward_seq(inputs.with_u(x), h0, readout)
            else:
                out = scan_forward_seq(inputs, BoundaryState(x, h0.block_index), readout)
            outs.append(out)
        cols_y.append((outs[0].y - outs[1].y).reshape(-1) / (2 * eps))
        cols_h.append((outs[0].h_terminal.h - outs[1].h_terminal.h).reshape(-1) / (2 * eps))
    return np.stack(cols_y, axis=1), np.stack(cols_h, axis=1)
