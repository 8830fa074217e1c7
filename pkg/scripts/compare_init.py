"""Fine-tune segmentation from a pretrained checkpoint and from random init over several seeds."""

import argparse

import numpy as np

from alice3d.config import configure_determinism, load_config
from alice3d.evaluation import finetune_seg


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("checkpoint")
    ap.add_argument("--config", default=None)
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()

    configure_determinism()
    cfg = load_config(args.config, args.preset)
    gains = []
    for s in range(args.seeds):
        r = finetune_seg(cfg, init="random", seed=s).mean_dsc
        p = finetune_seg(cfg, init="checkpoint", checkpoint=args.checkpoint, seed=s).mean_dsc
        gains.append(p - r)
        print(f"seed {s}  random {r:.4f}  pretrained {p:.4f}  gain {p - r:+.4f}")
    print(f"mean gain {np.mean(gains):+.4f} +- {np.std(gains):.4f}")


if __name__ == "__main__":
    main()
