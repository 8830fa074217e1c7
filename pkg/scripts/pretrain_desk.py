"""Pretrain the desk preset and report the loss decrease between the first and last 10% of steps."""

import argparse
import time

import numpy as np

from alice3d.config import configure_determinism, load_config
from alice3d.trainer import pretrain_run, read_loss_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()

    configure_determinism()
    cfg = load_config(args.config, args.preset)
    t0 = time.perf_counter()
    pretrain_run(cfg, out_dir=args.out, progress=True)
    secs = time.perf_counter() - t0

    total = np.array([r["total"] for r in read_loss_csv(f"{args.out}/losses.csv")])
    n = max(1, len(total) // 10)
    first, last = total[:n].mean(), total[-n:].mean()
    print(f"steps {len(total)}  first-10% {first:.4f}  last-10% {last:.4f}  decrease {100 * (first - last) / abs(first):.1f}%  {secs:.0f}s")


if __name__ == "__main__":
    main()
