"""Gaussian probability paths and the conditional flow-matching objective.

Noise sits at ``t = 0`` and data at ``t = 1``:  ``x_t = alpha_t z + sigma_t eps``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEDULES = ("gvp", "linear")
EPS_T = 1e-3


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t must lie in [0, 1]")
    return t


def gvp_schedule(t):
    """``(alpha, sigma, alpha_dot, sigma_dot)`` with ``alpha = sin(pi t / 2)``, ``sigma = cos(pi t / 2)``."""
    t = _check_t(t)
    h = 0.5 * np.pi
    s, c = np.sin(h * t), np.cos(h * t)
    # exact endpoints: cos(pi/2) is 6e-17 in floating point
    s = np.where(t == 1.0, 1.0, s)
    c = np.where(t == 1.0, 0.0, c)
    out = (s, c, h * c, -h * s)
    if t.ndim == 0:
        return tuple(float(v) for v in out)
    return out


def linear_schedule(t):
    t = _check_t(t)
    out = (t, 1.0 - t, np.ones_like(t), -np.ones_like(t))
    if t.ndim == 0:
        return tuple(float(v) for v in out)
    return out


@dataclass(frozen=True)
class InterpolantSchedule:
    kind: str = "gvp"

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ValueError(f"schedule kind must be one of {SCHEDULES}")

    def __call__(self, t):
        return gvp_schedule(t) if self.kind == "gvp" else linear_schedule(t)


@dataclass
class PathSample:
    t: np.ndarray  # (B,)
    z: np.ndarray
    eps: np.ndarray
    x_t: np.ndarray
    target: np.ndarray


def _bcast(v, like):
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (np.ndim(like) - v.ndim))


def conditional_vf(x_t, z, t, schedule: InterpolantSchedule = InterpolantSchedule()):
    """Target field ``(sigma_dot/sigma) x_t + (alpha_dot - alpha sigma_dot/sigma) z``.  Needs ``t < 1``."""
    alpha, sigma, a_dot, s_dot = (_bcast(v, x_t) for v in schedule(t))
    if np.any(sigma <= 0.0):
        raise ZeroDivisionError("conditional field is singular where sigma_t = 0 (t = 1)")
    r = s_dot / sigma
    return r * x_t + (a_dot - alpha * r) * z


def sample_path(z, rng: np.random.Generator, schedule: InterpolantSchedule = InterpolantSchedule(),
                eps_t: float = EPS_T, t=None) -> PathSample:
    """Draw ``t ~ U[0, 1 - eps_t]`` and ``eps ~ N(0, I)`` for each row of ``z``."""
    z = np.asarray(z)
    if z.shape[0] == 0:
        raise ValueError("empty batch")
    if t is None:
        t = rng.uniform(0.0, 1.0 - eps_t, z.shape[0])
    t = np.asarray(t, dtype=np.float64)
    eps = rng.standard_normal(z.shape)
    alpha, sigma, a_dot, s_dot = (_bcast(v, z) for v in schedule(t))
    x_t = alpha * z + sigma * eps
    target = a_dot * z + s_dot * eps
    return PathSample(t=t, z=z, eps=eps, x_t=x_t, target=target)


def cfm_loss(z, model, rng: np.random.Generator, schedule: InterpolantSchedule = InterpolantSchedule(),
             eps_t: float = EPS_T, with_grad: bool = True):
    """Mean squared error between ``model`` and the conditional target.

    ``model`` is either a plain callable ``model(x_t, t) -> v`` (``with_grad``
    must then be False) or an object with ``forward(x_t, t) -> (v, cache)``
    and ``backward(g_v, cache) -> grads``.  Returns ``(loss, grads)``.
    """
    ps = sample_path(z, rng, schedule, eps_t)
    dtype = np.asarray(z).dtype if np.issubdtype(np.asarray(z).dtype, np.floating) else np.float64
    if hasattr(model, "forward"):
        v, cache = model.forward(ps.x_t.astype(dtype), ps.t)
    else:
        v, cache = np.asarray(model(ps.x_t.astype(dtype), ps.t)), None
    diff = v - ps.target.astype(v.dtype)
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    if not with_grad:
        return loss, None
    g_v = (2.0 / diff.size) * diff
    return loss, model.backward(g_v, cache)
