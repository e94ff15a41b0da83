"""Command-line entry point: ``statechain {verify,train,sample,ablate}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config, loads
from .experiment import ablate, format_ablation, run_experiment, summarize
from .io import load_checkpoint, write_sample_grid, write_tensor
from .network import VectorFieldNet
from .sampler import integrate_batched
from .verify import SUITES, format_table, run_suite

SAMPLERS = {"rk4": "rk4_fixed", "dopri5": "dopri5_adaptive"}


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if getattr(args, "k", None) is not None and not isinstance(args.k, list):
        changes["k"] = args.k
    if getattr(args, "arcee", None) is not None and args.command == "train":
        changes["arcee_enabled"] = args.arcee == "on"
    return cfg.replace(seed=args.seed, **changes)


def _with_sampler(cfg: ExperimentConfig, args) -> ExperimentConfig:
    s = cfg.sampler
    if args.sampler:
        s = dataclasses.replace(s, method=SAMPLERS[args.sampler])
    if args.nfe is not None:
        s = dataclasses.replace(s, nfe_budget=args.nfe)
    return dataclasses.replace(cfg, sampler=s)


def _log_row(row):
    print(" ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()), flush=True)


def cmd_verify(args) -> int:
    results = run_suite(args.suite)
    print(format_table(results))
    return 0 if all(ok for _, ok, _ in results) else 1


def cmd_train(args) -> int:
    cfg = _with_sampler(_config(args), args)
    out = Path(args.out_dir)
    result = run_experiment(cfg, out, progress=_log_row)
    print(f"wrote {out} ({result.n_params} parameters, config {cfg.config_hash[:12]})")
    return 0


def cmd_sample(args) -> int:
    params, text = load_checkpoint(args.checkpoint)
    cfg = _with_sampler(loads(text), args)
    seed = cfg.seed if args.seed is None else args.seed
    net = VectorFieldNet(cfg.network, params)
    noise = np.random.default_rng(seed).standard_normal((args.n, cfg.network.seq_len)).astype(np.float32)
    res = integrate_batched(net, noise, cfg.sampler_config, cfg.trainer.sample_batch)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / "samples.arc", res.x)
    grid = write_sample_grid(out / "samples.pgm", res.x, cfg.network.height, cfg.network.width)
    print(f"wrote {args.n} samples (nfe={res.nfe}) and a {grid.shape[1]}x{grid.shape[0]} grid to {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _with_sampler(_config(args), args)
    arcee = (False, True) if args.arcee is None else (args.arcee == "on",)
    seeds = args.seeds if args.seeds else [cfg.seed]
    rows = ablate(cfg, k_list=args.k, arcee=arcee, seeds=seeds, out_dir=args.out_dir,
                  progress=lambda r: _log_row({k: v for k, v in r.items() if k != "budget_hash"}))
    if args.out_dir is None:
        sys.stdout.write(format_ablation(rows))
    for (k, on), s in summarize(rows).items():
        print(f"k={k} arcee={on}: " + json.dumps(s))
    return 0


def _k_list(text):
    return [int(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="statechain", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run numerical self-checks")
    v.add_argument("--suite", choices=SUITES + ("all",), default="all")
    v.set_defaults(func=cmd_verify)

    def common(sp, out_default):
        sp.add_argument("--config", help="experiment TOML file (defaults when omitted)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out-dir", default=out_default)
        sp.add_argument("--sampler", choices=sorted(SAMPLERS))
        sp.add_argument("--nfe", type=int, default=None, help="field-evaluation budget of the fixed-step sampler")

    t = sub.add_parser("train", help="train one configuration")
    common(t, "runs/train")
    t.add_argument("--k", type=int, default=None, help="number of distinct scan orders")
    t.add_argument("--arcee", choices=("on", "off"), default=None, help="terminal-state chain")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("-n", type=int, default=64)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out-dir", default="runs/samples")
    s.add_argument("--sampler", choices=sorted(SAMPLERS))
    s.add_argument("--nfe", type=int, default=None)
    s.set_defaults(func=cmd_sample)

    a = sub.add_parser("ablate", help="sweep scan-order count x chain on/off")
    common(a, None)
    a.add_argument("--k", type=_k_list, default=[1, 2, 4, 8], help="comma-separated, e.g. 1,2,4,8")
    a.add_argument("--arcee", choices=("on", "off"), default=None, help="restrict to one chain setting")
    a.add_argument("--seeds", type=_k_list, default=None, help="comma-separated seeds (default: --seed)")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
