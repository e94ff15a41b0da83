"""Run the desk-scale chain on/off sweep and print per-cell means.

    python scripts/run_ablation.py                      # k=1, seeds 0,1,2
    python scripts/run_ablation.py --k 1,2,4,8 --seeds 0 --out-dir runs/ablation
"""

import argparse
import time
from pathlib import Path

from statechain.config import load_config
from statechain.experiment import ablate, summarize

HERE = Path(__file__).resolve().parent


def ints(text):
    return [int(v) for v in text.split(",")]


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default=HERE / "configs" / "desk_ablation.toml")
    p.add_argument("--k", type=ints, default=[1])
    p.add_argument("--seeds", type=ints, default=[0, 1, 2])
    p.add_argument("--out-dir", default=None)
    args = p.parse_args()

    cfg = load_config(args.config)
    t0 = time.perf_counter()

    def report(row):
        print(f"[{time.perf_counter() - t0:7.0f}s] k={row['k']} arcee={row['arcee']} seed={row['seed']} "
              f"loss {row['initial_loss']:.4f} -> {row['final_loss']:.4f}  "
              f"energy distance {row['energy_distance']:.4f}", flush=True)

    rows = ablate(cfg, k_list=args.k, seeds=args.seeds, out_dir=args.out_dir, progress=report)
    print()
    for (k, arcee), s in sorted(summarize(rows).items()):
        print(f"k={k:<2} arcee={arcee:<3}  mean energy distance {s['energy_distance']:.4f}  "
              f"mean loss ratio {s['loss_ratio']:.3f}  ({s['runs']} runs)")


if __name__ == "__main__":
    main()
