"""Self-check suites behind ``statechain verify``.

Each check returns ``(name, passed, detail)``.  Everything runs in float64
on small random instances with fixed seeds.
"""

from __future__ import annotations

import math

import numpy as np

from .flow import EPS_T, conditional_vf, gvp_schedule
from .network import NetworkConfig, chain_backward, chain_forward, cross_block_rank_probe, init_params
from .sampler import SamplerConfig, integrate
from .scan import (
    AdjointSeed,
    BoundaryState,
    jacobian_numeric,
    scan_backward,
    scan_forward_prefix,
    scan_forward_seq,
    scan_oracle_unrolled,
)
from .ssm import SelectiveInputs, SsmParams, selective_heads

SUITES = ("scan", "gradients", "jacobian", "rank", "schedule", "sampler")


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def random_selective(rng, T, D, N, batch=()):
    """Scan operands from random heads, so ``a_bar`` is a genuine ZOH factor."""
    p = SsmParams.init(D, N, rng)
    p.w_delta[...] = rng.normal(0.0, 0.5, p.w_delta.shape)
    return selective_heads(rng.normal(size=(*batch, T, D)), p)


# ---------------------------------------------------------------- scan


def check_oracle(n=100, seed=0, tol=1e-10):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        T, D, N = int(rng.integers(1, 65)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        inp = random_selective(rng, T, D, N)
        h0 = BoundaryState(rng.normal(size=(D, N)))
        a, b = scan_forward_seq(inp, h0), scan_oracle_unrolled(inp, h0)
        worst = max(worst, rel_err(a.y, b.y), rel_err(a.h_terminal.h, b.h_terminal.h))
    return "sequential == unrolled oracle", worst <= tol, f"max rel err {worst:.2e} over {n} instances"


def check_prefix(seed=1, tol=1e-10, T=40):
    rng = np.random.default_rng(seed)
    inp = random_selective(rng, T, 4, 5, batch=(2,))
    h0 = BoundaryState(rng.normal(size=(2, 4, 5)))
    ref = scan_forward_seq(inp, h0)
    worst = 0.0
    for chunk in (1, 2, 3, 7, T):
        out = scan_forward_prefix(inp, h0, chunk)
        worst = max(worst, rel_err(out.y, ref.y), rel_err(out.h_terminal.h, ref.h_terminal.h))
    return "prefix scan == sequential", worst <= tol, f"max rel err {worst:.2e}, chunks 1,2,3,7,T"


def check_contraction(n=50, seed=2):
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(n):
        T = int(rng.integers(1, 40))
        inp = random_selective(rng, T, 3, 4)
        rho = float(inp.a_bar.max())
        h0, h1 = rng.normal(size=(2, 3, 4))
        d = scan_forward_seq(inp, BoundaryState(h0)).h_terminal.h - scan_forward_seq(inp, BoundaryState(h1)).h_terminal.h
        ok &= rho < 1.0 and np.linalg.norm(d) <= rho**T * np.linalg.norm(h0 - h1) * (1 + 1e-12)
    return "state contraction", bool(ok), f"{n} random instances"


# ---------------------------------------------------------------- gradients


def scan_fd_error(seed=3, readout="pre", eps=1e-6):
    """Worst relative error between :func:`scan_backward` and central differences, seed included."""
    rng = np.random.default_rng(seed)
    T, D, N = 7, 2, 3
    inp = random_selective(rng, T, D, N, batch=(2,))
    h0 = BoundaryState(rng.normal(size=(2, D, N)))
    g_y, g_ht = rng.normal(size=(2, T, D)), rng.normal(size=(2, D, N))

    def objective(a_bar, bbu, c, d, u, hh):
        out = scan_forward_seq(SelectiveInputs(a_bar, bbu, c, d, u, inp.delta), BoundaryState(hh), readout)
        return np.sum(out.y * g_y) + np.sum(out.h_terminal.h * g_ht)

    g = scan_backward(inp, h0, g_y, AdjointSeed(g_ht), readout, chunk=3)
    args = [inp.a_bar, inp.b_bar_u, inp.c, inp.d_skip, inp.u, h0.h]
    worst = 0.0
    for k, ana in enumerate([g.g_a_bar, g.g_b_bar_u, g.g_c, g.g_d_skip, g.g_u, g.g_h0]):
        fd = np.zeros_like(args[k])
        for idx in np.ndindex(fd.shape):
            vals = []
            for sign in (1.0, -1.0):
                mod = [a.copy() for a in args]
                mod[k][idx] += sign * eps
                vals.append(objective(*mod))
            fd[idx] = (vals[0] - vals[1]) / (2 * eps)
        worst = max(worst, rel_err(ana, fd))
    return worst


def network_fd_error(cfg: NetworkConfig, seed=4, eps=1e-6, per_param=12):
    """Worst per-parameter relative error of :func:`chain_backward` against central differences."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng, dtype=np.float64)
    x = rng.standard_normal((2, cfg.seq_len, cfg.in_channels))
    t = np.array([0.3, 0.8])
    r = rng.standard_normal(x.shape)
    v, cache = chain_forward(x, t, params, cfg)
    grads, _ = chain_backward(r, cache, params, cfg)
    worst = 0.0
    for name, arr in params.items():
        idxs = list(np.ndindex(arr.shape))
        if len(idxs) > per_param:
            idxs = [idxs[i] for i in rng.choice(len(idxs), per_param, replace=False)]
        fd, ana = [], []
        for idx in idxs:
            old = arr[idx]
            arr[idx] = old + eps
            fp = np.sum(chain_forward(x, t, params, cfg)[0] * r)
            arr[idx] = old - eps
            fm = np.sum(chain_forward(x, t, params, cfg)[0] * r)
            arr[idx] = old
            fd.append((fp - fm) / (2 * eps))
            ana.append(grads[name][idx])
        fd, ana = np.array(fd), np.array(ana)
        worst = max(worst, float(np.max(np.abs(ana - fd)) / max(np.max(np.abs(fd)), 1e-8)))
    return worst


TINY = dict(depth=2, d_model=8, expand=2, d_state=4, height=2, width=4, time_freq_dim=8, time_hidden=16, k=2)


def check_scan_gradients(tol=1e-5):
    worst = max(scan_fd_error(readout=r) for r in ("pre", "post"))
    return "scan backward vs finite differences", worst <= tol, f"max rel err {worst:.2e}"


def check_network_gradients(tol=1e-5):
    worst = max(network_fd_error(NetworkConfig(**TINY, arcee_enabled=on, scan_impl=impl))
                for on in (True, False) for impl in ("fused", "reference"))
    return "network backward vs finite differences", worst <= tol, f"max rel err {worst:.2e}"


# ---------------------------------------------------------------- jacobian


def causality_violation(seed=5, T=8, D=2, N=3, with_heads=True):
    """Largest |dy_t/du_s| with s > t; with heads the selection also follows ``u``."""
    rng = np.random.default_rng(seed)
    h0 = BoundaryState(rng.normal(size=(D, N)))
    if not with_heads:
        jy, _ = jacobian_numeric(random_selective(rng, T, D, N), h0, wrt="u")
    else:
        p = SsmParams.init(D, N, rng)
        u0 = rng.normal(size=(T, D))
        eps = 1e-5
        cols = []
        for k in range(u0.size):
            e = np.zeros(u0.size)
            e[k] = eps
            e = e.reshape(T, D)
            cols.append((scan_forward_seq(selective_heads(u0 + e, p), h0).y
                         - scan_forward_seq(selective_heads(u0 - e, p), h0).y).reshape(-1) / (2 * eps))
        jy = np.stack(cols, axis=1)
    blocks = jy.reshape(T, D, T, D)
    upper = max((np.max(np.abs(blocks[t, :, s, :])) for t in range(T) for s in range(t + 1, T)), default=0.0)
    return float(upper)


def check_causality(tol=1e-8):
    v = max(causality_violation(with_heads=h) for h in (False, True))
    return "dy/du lower block triangular", v < tol, f"max upper-block entry {v:.1e}"


# ---------------------------------------------------------------- rank


def check_rank():
    cfg = NetworkConfig(depth=2, d_model=1, expand=2, d_state=3, height=4, width=4, time_freq_dim=4, time_hidden=4,
                        arcee_enabled=True)
    bound = cfg.d_inner * cfg.d_state
    rank, _ = cross_block_rank_probe(cfg, np.random.default_rng(0))
    off, _ = cross_block_rank_probe(NetworkConfig(**{**cfg.__dict__, "arcee_enabled": False}),
                                    np.random.default_rng(0))
    return "cross-block rank <= d_inner*d_state", 1 <= rank <= bound and off == 0, \
        f"rank {rank} (bound {bound}), chain off -> {off}"


# ---------------------------------------------------------------- schedule


def check_schedule():
    ends = gvp_schedule(0.0) == (0.0, 1.0, math.pi / 2, 0.0) and gvp_schedule(1.0) == (1.0, 0.0, 0.0, -math.pi / 2)
    t = np.linspace(0, 1, 10001)
    a, s, _, _ = gvp_schedule(t)
    norm = float(np.max(np.abs(a * a + s * s - 1)))
    rng = np.random.default_rng(6)
    worst = 0.0
    for tt in rng.uniform(0, 1 - EPS_T, 200):
        z, e = rng.normal(size=(2, 16))
        al, si, ad, sd = gvp_schedule(tt)
        worst = max(worst, float(np.max(np.abs(conditional_vf(al * z + si * e, z, tt) - (ad * z + sd * e)))))
    ok = ends and norm < 1e-15 and worst <= 1e-12
    return "interpolant and target", ok, f"endpoints exact={ends}, |a^2+s^2-1|={norm:.1e}, forms diff={worst:.1e}"


# ---------------------------------------------------------------- sampler


def rk4_order_factor():
    x0 = np.random.default_rng(7).standard_normal((4, 3))
    exact = x0 * math.exp(-(1 - EPS_T))
    err = [np.max(np.abs(integrate(lambda x, t: -x, x0, SamplerConfig(nfe_budget=4 * n)).x - exact)) for n in (8, 16)]
    return float(err[0] / err[1])


def check_sampler():
    f = rk4_order_factor()
    x0 = np.random.default_rng(8).standard_normal((4, 3))
    zero = np.array_equal(integrate(lambda x, t: np.zeros_like(x), x0, SamplerConfig()).x, x0)
    lin = np.max(np.abs(integrate(lambda x, t: -x, x0, SamplerConfig(nfe_budget=200)).x - x0 * math.exp(-(1 - EPS_T))))
    ok = 12.0 <= f <= 20.0 and zero and lin <= 1e-6
    return "RK4 order and exactness", ok, f"halving factor {f:.2f}, zero field exact={zero}, linear err {lin:.1e}"


_CHECKS = {
    "scan": (check_oracle, check_prefix, check_contraction),
    "gradients": (check_scan_gradients, check_network_gradients),
    "jacobian": (check_causality,),
    "rank": (check_rank,),
    "schedule": (check_schedule,),
    "sampler": (check_sampler,),
}


def run_suite(name: str) -> list[tuple[str, bool, str]]:
    names = SUITES if name == "all" else (name,)
    if any(n not in _CHECKS for n in names):
        raise ValueError(f"unknown suite {name!r}; expected one of {SUITES + ('all',)}")
    results = []
    for n in names:
        for check in _CHECKS[n]:
            try:
                results.append(check())
            except Exception as exc:  # a crashing check is a failing check
                results.append((check.__name__, False, f"{type(exc).__name__}: {exc}"))
    return results


def format_table(results) -> str:
    width = max(len(r[0]) for r in results)
    return "\n".join(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}" for name, ok, detail in results)
