"""ODE integration of a learned vector field from noise (``t = 0``) to data.

``model(x, t)`` receives ``x`` of shape (B, ...) and ``t`` of shape (B,).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import EPS_T

METHODS = ("rk4_fixed", "dopri5_adaptive")


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    """``nfe_budget`` counts field evaluations: RK4 takes ``nfe_budget // 4`` steps."""

    method: str = "rk4_fixed"
    nfe_budget: int = 50
    rtol: float = 1e-5
    atol: float = 1e-5
    eps_t: float = EPS_T
    max_steps: int = 10_000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.nfe_budget < 1:
            raise ValueError("nfe_budget must be >= 1")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("tolerances must be positive")
        if not 0.0 <= self.eps_t < 1.0:
            raise ValueError("eps_t must lie in [0, 1)")

    @property
    def t_end(self) -> float:
        return 1.0 - self.eps_t

    @property
    def rk4_steps(self) -> int:
        return max(1, self.nfe_budget // 4)


@dataclass
class IntegrationResult:
    x: np.ndarray
    nfe: int
    steps: int
    rejected: int = 0


def _field(model, x, t):
    return np.asarray(model(x, np.full(x.shape[0], t)))


def rk4_fixed(model, x0, t0, t1, steps) -> IntegrationResult:
    x = np.array(x0, copy=True)
    h = (t1 - t0) / steps
    for i in range(steps):
        t = t0 + i * h
        k1 = _field(model, x, t)
        k2 = _field(model, x + 0.5 * h * k1, t + 0.5 * h)
        k3 = _field(model, x + 0.5 * h * k2, t + 0.5 * h)
        k4 = _field(model, x + h * k3, t + h)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return IntegrationResult(x=x, nfe=4 * steps, steps=steps)


# Dormand-Prince 5(4)
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


def dopri5_adaptive(model, x0, t0, t1, rtol, atol, max_steps=10_000, h0=None) -> IntegrationResult:
    """Embedded 5(4) pair with FSAL and a PI step-size controller."""
    x = np.array(x0, dtype=np.float64, copy=True)
    t = t0
    span = t1 - t0
    k1 = _field(model, x, t)
    nfe = 1
    if h0 is None:
        scale = atol + rtol * np.abs(x)
        d0 = np.sqrt(np.mean((x / scale) ** 2))
        d1 = np.sqrt(np.mean((k1 / scale) ** 2))
        h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h = min(h0, span)
    safety, alpha, beta = 0.9, 0.7 / 5, 0.4 / 5
    err_prev = 1e-4
    steps = rejected = 0
    while t < t1:
        if steps + rejected >= max_steps:
            raise IntegrationError(f"dopri5: exceeded {max_steps} steps at t={t:.6g}")
        if h < 1e-12 * max(1.0, abs(t)):
            raise IntegrationError(f"dopri5: step size underflow at t={t:.6g}")
        last = t + h >= t1
        if last:
            h = t1 - t
        ks = [k1]
        for i in range(1, 7):
            xi = x + h * sum(a * k for a, k in zip(_A[i], ks))
            ks.append(_field(model, xi, t + _C[i] * h))
        nfe += 6
        x_new = x + h * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
        err_vec = h * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
        scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
        err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))
        if not np.isfinite(err):
            raise IntegrationError(f"dopri5: non-finite state at t={t:.6g}")
        if err <= 1.0:
            t = t1 if last else t + h
            x = x_new
            k1 = ks[6]
            steps += 1
            fac = safety * err ** -alpha * err_prev ** beta if err > 0 else 5.0
            h *= min(5.0, max(0.2, fac))
            err_prev = max(err, 1e-4)
        else:
            rejected += 1
            h *= max(0.2, safety * err ** -0.2)
    return IntegrationResult(x=x.astype(np.asarray(x0).dtype, copy=False), nfe=nfe, steps=steps, rejected=rejected)


def integrate(model, x0, cfg: SamplerConfig = SamplerConfig(), t0: float = 0.0) -> IntegrationResult:
    """Integrate ``dx/dt = model(x, t)`` from ``t0`` to ``1 - eps_t``."""
    x0 = np.asarray(x0)
    if cfg.method == "rk4_fixed":
        return rk4_fixed(model, x0, t0, cfg.t_end, cfg.rk4_steps)
    return dopri5_adaptive(model, x0, t0, cfg.t_end, cfg.rtol, cfg.atol, cfg.max_steps)


def integrate_batched(model, x0, cfg: SamplerConfig = SamplerConfig(), batch: int = 128) -> IntegrationResult:
    """:func:`integrate` over row chunks of ``x0`` to bound memory.

    Fixed-step results do not depend on ``batch``; the adaptive method
    controls its step on each chunk separately.  ``nfe`` is the largest
    per-chunk count, i.e. the cost charged to any single trajectory.
    """
    x0 = np.asarray(x0)
    parts = [integrate(model, x0[i:i + batch], cfg) for i in range(0, len(x0), batch)]
    return IntegrationResult(x=np.concatenate([p.x for p in parts]), nfe=max(p.nfe for p in parts),
                             steps=max(p.steps for p in parts), rejected=sum(p.rejected for p in parts))


def draw_noise(rng: np.random.Generator, n: int, dim: int, dtype=np.float32) -> np.ndarray:
    return rng.standard_normal((n, dim)).astype(dtype)
