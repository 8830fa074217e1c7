"""Pretrain and fine-tune each ablation cell under one seed set and budget; write a CSV."""

import argparse

from alice3d.config import configure_determinism, load_config
from alice3d.evaluation import ablation_matrix, flag_grid, write_ablation_csv

CELLS = {
    "full": dict(use_ldv=True, use_casa=True, loss_kind="cosine"),
    "no-ldv": dict(use_ldv=False, use_casa=True, loss_kind="cosine"),
    "no-casa": dict(use_ldv=True, use_casa=False, loss_kind="cosine"),
    "infonce": dict(use_ldv=True, use_casa=True, loss_kind="infonce"),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int, default=None, help="pretraining steps per cell")
    ap.add_argument("--full-grid", action="store_true", help="all 8 flag combinations instead of the 4 main cells")
    ap.add_argument("--out", default="runs/ablation.csv")
    args = ap.parse_args()

    configure_determinism()
    cfg = load_config(args.config, args.preset)
    grid = flag_grid() if args.full_grid else list(CELLS.values())
    rows = ablation_matrix(cfg, grid, seeds=range(args.seeds), pretrain_steps=args.steps)
    write_ablation_csv(rows, args.out)
    for row in rows:
        print(f"{row.flags}  dsc {row.mean:.4f} +- {row.std:.4f}")


if __name__ == "__main__":
    main()
