"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the per-criterion
lines appear under "acceptance criteria" in the terminal summary.  The
directional ablation (criterion 10) trains six 3000-step models and
dominates the runtime; deselect it with ``-m "not slow"``.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from statechain.config import load_config
from statechain.experiment import ablate
from statechain.flow import conditional_vf
from statechain.network import NetworkConfig, chain_forward, cross_block_rank_probe, init_params, param_count
from statechain.sampler import SamplerConfig, integrate
from statechain.verify import (
    TINY,
    check_contraction,
    check_oracle,
    check_prefix,
    check_schedule,
    causality_violation,
    network_fd_error,
    rk4_order_factor,
    scan_fd_error,
)

DESK = Path(__file__).resolve().parents[1] / "scripts" / "configs" / "desk_ablation.toml"


class Clock:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def test_c01_scan_oracle(criterion):
    with Clock() as c:
        _, ok, detail = check_oracle(n=100, tol=1e-10)
    ok &= c.elapsed < 10
    assert criterion(1, "sequential scan vs unrolled oracle", ok, f"{detail}, {c.elapsed:.1f}s")


def test_c02_prefix_scan(criterion):
    with Clock() as c:
        _, ok, detail = check_prefix(tol=1e-10)
    ok &= c.elapsed < 10
    assert criterion(2, "prefix scan vs sequential", ok, f"{detail}, {c.elapsed:.1f}s")


def test_c03_gradient_fidelity(criterion):
    with Clock() as c:
        scan = max(scan_fd_error(readout=r) for r in ("pre", "post"))
        net = max(network_fd_error(NetworkConfig(**TINY, arcee_enabled=on, scan_impl=impl))
                  for on in (True, False) for impl in ("fused", "reference"))
    ok = scan <= 1e-5 and net <= 1e-5 and c.elapsed < 60
    assert criterion(3, "backward vs central differences", ok,
                     f"scan {scan:.1e}, network {net:.1e}, {c.elapsed:.1f}s")


def test_c04_causality(criterion):
    with Clock() as c:
        v = max(causality_violation(with_heads=h) for h in (False, True))
    ok = v < 1e-8 and c.elapsed < 30
    assert criterion(4, "dy/du lower block triangular", ok, f"max upper-block entry {v:.1e}, {c.elapsed:.1f}s")


def test_c05_boundary_handoff(criterion):
    with Clock() as c:
        rng = np.random.default_rng(0)
        cfg = NetworkConfig(**{**TINY, "depth": 4}, arcee_enabled=True)
        params = init_params(cfg, rng)
        x = rng.standard_normal((3, cfg.seq_len, 1)).astype(np.float32)
        chain = chain_forward(x, np.array([0.1, 0.5, 0.9]), params, cfg)[1]["chain"]
        on = not chain.h0[0].any() and all(
            np.array_equal(chain.h0[i], chain.h_terminal[i - 1]) for i in range(1, cfg.depth))
        off_cfg = NetworkConfig(**{**TINY, "depth": 4}, arcee_enabled=False)
        off = all(not h.any() for h in chain_forward(x, 0.5, params, off_cfg)[1]["chain"].h0)
    ok = on and off and c.elapsed < 5
    assert criterion(5, "boundary handoff", ok, f"chain on bitwise={on}, chain off zero={off}, {c.elapsed:.1f}s")


def test_c06_rank_bottleneck(criterion):
    with Clock() as c:
        cfg = NetworkConfig(depth=2, d_model=1, expand=2, d_state=3, height=4, width=4, time_freq_dim=4,
                            time_hidden=4, arcee_enabled=True)
        bound = cfg.d_inner * cfg.d_state
        rank, sv = cross_block_rank_probe(cfg, np.random.default_rng(0), rtol=1e-7)
    ok = cfg.seq_len * cfg.d_model > bound and 1 <= rank <= bound and c.elapsed < 60
    assert criterion(6, "boundary-path Jacobian rank", ok,
                     f"rank {rank} <= {bound} (T*d_model={cfg.seq_len * cfg.d_model}), {c.elapsed:.1f}s")


def test_c07_stability(criterion):
    with Clock() as c:
        _, ok, detail = check_contraction(n=50)
    ok &= c.elapsed < 10
    assert criterion(7, "state contraction", ok, f"{detail}, {c.elapsed:.1f}s")


def test_c08_interpolant_and_transport(criterion):
    with Clock() as c:
        _, forms_ok, detail = check_schedule()
        rng = np.random.default_rng(4)
        z = rng.uniform(-1, 1, (8, 64))
        eps = rng.standard_normal(z.shape)
        res = integrate(lambda x, t: conditional_vf(x, z, t), eps,
                        SamplerConfig(method="dopri5_adaptive", rtol=1e-8, atol=1e-8, eps_t=1e-6))
        gap = float(np.max(np.abs(res.x - z)))
    ok = forms_ok and gap <= 1e-3 and c.elapsed < 30
    assert criterion(8, "interpolant, target and transport", ok,
                     f"{detail}, transport gap {gap:.1e}, {c.elapsed:.1f}s")


def test_c09_sampler_order(criterion):
    with Clock() as c:
        factor = rk4_order_factor()
        x0 = np.random.default_rng(8).standard_normal((4, 3))
        zero = np.array_equal(integrate(lambda x, t: np.zeros_like(x), x0, SamplerConfig()).x, x0)
    ok = 12 <= factor <= 20 and zero and c.elapsed < 10
    assert criterion(9, "RK4 order", ok, f"halving factor {factor:.2f}, zero field exact={zero}, {c.elapsed:.1f}s")


@pytest.mark.slow
def test_c10_directional_ablation(criterion):
    cfg = load_config(DESK)
    with Clock() as c:
        rows = ablate(cfg, k_list=[1], arcee=(False, True), seeds=[0, 1, 2])
    ed = {v: float(np.mean([r["energy_distance"] for r in rows if r["arcee"] == v])) for v in ("off", "on")}
    ratios = [r["final_loss"] / r["initial_loss"] for r in rows]
    budgets = {r["budget_hash"] for r in rows}
    ok = ed["on"] <= ed["off"] and max(ratios) < 0.5 and len(budgets) == 1
    assert criterion(10, "directional ablation (L=6, k=1, 3 seeds)", ok,
                     f"energy distance on {ed['on']:.4f} vs off {ed['off']:.4f}, "
                     f"worst loss ratio {max(ratios):.3f}, {c.elapsed / 60:.1f} min")


def test_c11_parameter_parity(criterion):
    with Clock() as c:
        base = load_config(DESK).network
        counts = {on: param_count(init_params(NetworkConfig(**{**base.__dict__, "arcee_enabled": on}),
                                              np.random.default_rng(0))) for on in (False, True)}
    ok = counts[False] == counts[True] and c.elapsed < 1
    assert criterion(11, "parameter parity", ok, f"off {counts[False]}, on {counts[True]}, {c.elapsed:.2f}s")
