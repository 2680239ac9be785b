"""200-step desk pre-training on 8 synthetic 64^3 volumes, for several seeds.

Prints the mean total loss of the first 10 steps next to the final step's loss.
"""

import argparse

import numpy as np

from glmae.pretrain import PretrainConfig, train
from glmae.volume_store import synth_volume


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--mode", default="glmae", choices=["glmae", "mae3d", "downsample_mae"])
    ap.add_argument("--out-dir", default="runs/smoke")
    args = ap.parse_args()

    vols = [synth_volume((64, 64, 64), 3, np.random.default_rng([77, i])).volume for i in range(8)]
    for seed in (int(s) for s in args.seeds.split(",")):
        cfg = PretrainConfig.desk(mode=args.mode, max_steps=args.steps, seed=seed, checkpoint_every=0,
                                  out_dir=f"{args.out_dir}/{args.mode}_seed{seed}")
        rep = train(cfg, vols)
        first = np.mean([r["total"] for r in rep.log[:10]])
        last = rep.log[-1]["total"]
        print(f"seed {seed}: first-10 mean {first:.4f}  final {last:.4f}  "
              f"{'down' if last < first else 'NOT down'}  ({rep.wall_clock:.0f}s)")


if __name__ == "__main__":
    main()
