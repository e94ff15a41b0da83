"""Continuous-time diagonal SSM parameters, selective heads and ZOH discretization.

``A`` is diagonal per (channel, state) pair and stored as ``a_log`` with
``A = -exp(a_log)``, which keeps it Hurwitz for any value of the parameter.
All functions accept arbitrary leading batch dimensions in front of the
``(T, ...)`` token axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DELTA_MIN = 1e-3
DELTA_MAX = 1e1


def softplus(x):
    # same value as logaddexp(0, x), several times faster on float32
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    # tanh form is stable for large |x| and exact enough for float64 checks
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def inverse_softplus(y):
    return y + np.log(-np.expm1(-y))


@dataclass
class SsmParams:
    """Learnable parameters of one selective SSM.

    The heads project the scan input ``u`` (width ``d_inner``) to ``B_t``,
    ``C_t`` (width ``d_state``) and pre-activation step sizes (width
    ``d_inner``).
    """

    a_log: np.ndarray  # (d_inner, d_state)
    d_skip: np.ndarray  # (d_inner,)
    w_b: np.ndarray  # (d_inner, d_state)
    w_c: np.ndarray  # (d_inner, d_state)
    w_delta: np.ndarray  # (d_inner, d_inner)
    b_delta: np.ndarray  # (d_inner,)
    delta_min: float = DELTA_MIN
    delta_max: float = DELTA_MAX

    def __post_init__(self):
        if not 0.0 < self.delta_min <= self.delta_max < np.inf:
            raise ValueError(f"need 0 < delta_min <= delta_max < inf, got {self.delta_min}, {self.delta_max}")
        d_inner, d_state = self.a_log.shape
        expected = {
            "d_skip": (d_inner,),
            "w_b": (d_inner, d_state),
            "w_c": (d_inner, d_state),
            "w_delta": (d_inner, d_inner),
            "b_delta": (d_inner,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def a(self) -> np.ndarray:
        return -np.exp(self.a_log)

    @property
    def d_inner(self) -> int:
        return self.a_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.a_log.shape[1]

    @classmethod
    def init(cls, d_inner, d_state, rng, dtype=np.float64, dt_range=(0.01, 0.1),
             delta_min=DELTA_MIN, delta_max=DELTA_MAX):
        """Random init: ``-A ~ U[0.5, 8]``, projections ``U(+-1/sqrt(fan_in))``,
        step-size bias such that ``softplus(bias)`` is log-uniform in ``dt_range``."""
        bound = 1.0 / np.sqrt(d_inner)
        dt = np.exp(rng.uniform(np.log(dt_range[0]), np.log(dt_range[1]), d_inner))
        return cls(
            a_log=np.log(rng.uniform(0.5, 8.0, (d_inner, d_state))).astype(dtype),
            d_skip=np.ones(d_inner, dtype=dtype),
            w_b=rng.uniform(-bound, bound, (d_inner, d_state)).astype(dtype),
            w_c=rng.uniform(-bound, bound, (d_inner, d_state)).astype(dtype),
            w_delta=(0.1 * rng.uniform(-bound, bound, (d_inner, d_inner))).astype(dtype),
            b_delta=inverse_softplus(dt).astype(dtype),
            delta_min=delta_min,
            delta_max=delta_max,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in ("a_log", "d_skip", "w_b", "w_c", "w_delta", "b_delta")}


@dataclass
class SelectiveInputs:
    """Per-step discretized operands of one scan.

    ``b_bar`` is kept next to ``b_bar_u`` so the token input can be swapped
    while the selection (``a_bar``, ``b_bar``, ``c``) stays frozen.
    """

    a_bar: np.ndarray  # (..., T, D, N)
    b_bar_u: np.ndarray  # (..., T, D, N)
    c: np.ndarray  # (..., T, N)
    d_skip: np.ndarray  # (D,)
    u: np.ndarray  # (..., T, D)
    delta: np.ndarray  # (..., T, D)
    b_bar: np.ndarray | None = None  # (..., T, D, N)

    @property
    def length(self) -> int:
        return self.u.shape[-2]

    def with_u(self, u: np.ndarray) -> "SelectiveInputs":
        """Same selection, new token input (``b_bar_u`` rebuilt from ``b_bar``)."""
        if self.b_bar is None:
            raise ValueError("b_bar is required to substitute the token input")
        return SelectiveInputs(self.a_bar, self.b_bar * u[..., None], self.c, self.d_skip,
                               u, self.delta, self.b_bar)


def zoh_discretize(a, b, delta):
    """Exact zero-order-hold factors for diagonal ``a``.

    Returns ``(exp(delta*a), expm1(delta*a)/a * b)``; elementwise with
    broadcasting. The ``a -> 0-`` limit is ``(1, delta*b)``.
    """
    a, b, delta = np.asarray(a, dtype=float), np.asarray(b, dtype=float), np.asarray(delta, dtype=float)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.all(np.isfinite(delta))):
        raise ValueError("zoh_discretize: non-finite input")
    if np.any(a > 0) or np.any(delta <= 0):
        raise ValueError("zoh_discretize: need a <= 0 and delta > 0")
    x = delta * a
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(a == 0, delta, np.expm1(x) / np.where(a == 0, 1.0, a))
    a_bar, b_bar = np.exp(x), ratio * b
    if a_bar.ndim == 0:
        return float(a_bar), float(b_bar)
    return a_bar, b_bar


def _check_u(u, params):
    if u.ndim < 2 or u.shape[-1] != params.d_inner:
        raise ValueError(f"u must have shape (..., T, {params.d_inner}), got {u.shape}")
    if u.shape[-2] < 1:
        raise ValueError("need T >= 1")


def step_sizes(u, params):
    """``clamp(softplus(u @ w_delta + b_delta), delta_min, delta_max)`` and its pre-activation."""
    pre = u @ params.w_delta + params.b_delta
    return np.clip(softplus(pre), params.delta_min, params.delta_max), pre


def head_projections(u, params):
    """``(B_t, C_t, delta_t, pre-activation)`` for every token of ``u``."""
    delta, pre = step_sizes(u, params)
    return u @ params.w_b, u @ params.w_c, delta, pre


def step_size_grad(g_delta, pre, params):
    """Gradient through ``clamp(softplus(pre))``; zero where the clamp is active."""
    sp = softplus(pre)
    live = (sp > params.delta_min) & (sp < params.delta_max)
    return g_delta * live * sigmoid(pre)


def selective_heads(u: np.ndarray, params: SsmParams) -> SelectiveInputs:
    _check_u(u, params)
    b, c, delta, _ = head_projections(u, params)
    a = params.a
    x = delta[..., None] * a
    a_bar = np.exp(x)
    b_bar = np.expm1(x) / a * b[..., None, :]
    return SelectiveInputs(a_bar=a_bar, b_bar_u=b_bar * u[..., None], c=c, d_skip=params.d_skip,
                           u=u, delta=delta, b_bar=b_bar)


def selective_heads_backward(u, params, g_a_bar, g_b_bar_u, g_c, g_u=None):
    """Chain rule from scan-operand gradients back to ``u`` and the head parameters.

    ``g_u`` is any gradient already reaching ``u`` directly (e.g. through the
    ``D u`` skip); the return value includes it.  Parameter gradients are
    summed over all leading batch dimensions.  ``d_skip`` is not touched here.
    """
    b = u @ params.w_b
    delta, pre = step_sizes(u, params)
    a = params.a
    x = delta[..., None] * a
    a_bar = np.exp(x)
    coef = np.expm1(x) / a
    bb = coef * b[..., None, :]

    g_u_total = np.zeros_like(u) if g_u is None else np.array(g_u, dtype=u.dtype, copy=True)
    g_bb = g_b_bar_u * u[..., None]
    g_u_total += np.sum(g_b_bar_u * bb, axis=-1)
    g_coef = g_bb * b[..., None, :]
    g_b = np.sum(g_bb * coef, axis=-2)

    # a_bar = exp(delta a), coef = expm1(delta a)/a
    g_delta = np.sum((g_a_bar * a + g_coef) * a_bar, axis=-1)
    g_a = g_a_bar * delta[..., None] * a_bar + g_coef * (delta[..., None] * a_bar - coef) / a
    g_a = g_a.reshape(-1, *a.shape).sum(axis=0)

    g_pre = step_size_grad(g_delta, pre, params)

    flat = lambda arr: arr.reshape(-1, arr.shape[-1])  # noqa: E731
    uf = flat(u)
    grads = {
        "a_log": g_a * a,
        "w_b": uf.T @ flat(g_b),
        "w_c": uf.T @ flat(g_c),
        "w_delta": uf.T @ flat(g_pre),
        "b_delta": flat(g_pre).sum(axis=0),
    }
    g_u_total += g_b @ params.w_b.T + g_c @ params.w_c.T + g_pre @ params.w_delta.T
    return grads, g_u_total
