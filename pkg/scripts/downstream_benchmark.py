"""Pretrained vs random-init e2e fine-tuning on the fixed 20-volume desk benchmark."""

import argparse
import json

from glmae.benchmark import downstream_direction
from glmae.evaluation import FinetuneConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--mode", default="glmae", choices=["glmae", "mae3d", "downsample_mae"])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--pretrain-steps", type=int, default=500)
    ap.add_argument("--ft-steps", type=int, default=1000)
    ap.add_argument("--ft-lr", type=float, default=3e-4)
    ap.add_argument("--center-teacher", action="store_true")
    ap.add_argument("--out-dir", default="runs/downstream")
    args = ap.parse_args()

    res = downstream_direction(
        seeds=[int(s) for s in args.seeds.split(",")],
        pretrain_steps=args.pretrain_steps,
        mode=args.mode,
        ft=FinetuneConfig(mode="e2e", steps=args.ft_steps, lr=args.ft_lr),
        out_dir=f"{args.out_dir}/{'centered' if args.center_teacher else 'plain'}",
        pretrain_overrides={"center_teacher": True} if args.center_teacher else None,
    )
    for r in res["rows"]:
        print(f"seed {r['seed']}: pretrained {r['pretrained']:.2f}  random {r['random']:.2f}")
    print(f"median: pretrained {res['median_pretrained']:.2f}  random {res['median_random']:.2f}")
    print(json.dumps({k: res[k] for k in ("median_pretrained", "median_random")}))


if __name__ == "__main__":
    main()
