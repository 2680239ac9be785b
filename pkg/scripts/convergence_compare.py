"""Linear-probe Dice of GL-MAE and MAE3D checkpoints over pre-training epochs."""

import argparse

from glmae.benchmark import desk_dataset
from glmae.evaluation import FinetuneConfig, convergence_compare
from glmae.pretrain import PretrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--probe-epochs", default="5,10,20")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--probe-steps", type=int, default=300)
    ap.add_argument("--out-dir", default="runs/compare")
    args = ap.parse_args()

    rows = convergence_compare(
        PretrainConfig.desk(checkpoint_every=0),
        desk_dataset(),
        [int(e) for e in args.probe_epochs.split(",")],
        FinetuneConfig(steps=args.probe_steps, lr=1e-3),
        seeds=[int(s) for s in args.seeds.split(",")],
        out_dir=args.out_dir,
    )
    for r in rows:
        print(f"{r['mode']:>6} epoch {r['epoch']:>4} seed {r['seed']}: mean Dice {r['mean_dice']:.2f}")
    print(f"wrote {args.out_dir}/convergence.csv and convergence.png")


if __name__ == "__main__":
    main()
