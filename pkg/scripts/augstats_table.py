"""Overlap / Hit of local crops against global crops as the local scale grows (64^3 volumes)."""

import argparse

from glmae.views import ViewConfig, overlap_stats


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--volumes", type=int, default=10)
    ap.add_argument("--rounds", type=int, default=1000)
    ap.add_argument("--scales", default="0.25,0.3,0.35,0.4,0.45,0.5")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    shapes = [(args.size,) * 3] * args.volumes
    print("local_scale  overlap_pct  hit_pct")
    for s in (float(x) for x in args.scales.split(",")):
        st = overlap_stats(shapes, 2, 8, ViewConfig(local_scale=(s, s)), args.seed, args.rounds)
        print(f"{s:11.2f}  {st.overlap_pct:11.2f}  {st.hit_pct:7.2f}")


if __name__ == "__main__":
    main()
