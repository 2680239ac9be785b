"""Command line entry point: ``glmae <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x]


def _load_pretrain_config(args):
    from .pretrain import PretrainConfig

    if args.config:
        cfg = PretrainConfig.from_json(args.config)
    elif args.preset == "full":
        cfg = PretrainConfig()
    else:
        cfg = PretrainConfig.desk()
    over = {}
    for name in ("mode", "seed", "manifest", "max_steps", "out_dir", "epochs"):
        val = getattr(args, name, None)
        if val is not None:
            over[name] = val
    return replace(cfg, **over) if over else cfg


def cmd_synth(args):
    from .volume_store import synth_dataset

    m = synth_dataset(args.n, args.shape, args.classes, args.seed, args.out)
    print(f"wrote {len(m)} volumes to {args.out}/manifest.json")


def cmd_pretrain(args):
    from .pretrain import train

    cfg = _load_pretrain_config(args)
    report = train(cfg, echo=not args.quiet, resume_from=args.resume)
    print(f"# final checkpoint: {report.final_checkpoint} ({len(report.log)} steps, {report.wall_clock:.1f}s)",
          file=sys.stderr)


def cmd_augstats(args):
    from .views import ViewConfig, overlap_stats
    from .volume_store import DatasetManifest

    if args.manifest:
        shapes = DatasetManifest.load(args.manifest).shapes()
    else:
        shapes = [tuple(args.shape)] * args.n
    rows = []
    for item in args.local_scales.split(","):
        lo, hi = (float(x) for x in item.split(":"))
        cfg = ViewConfig(global_scale=tuple(args.global_scale), local_scale=(lo, hi))
        st = overlap_stats(shapes, args.p, args.q, cfg, args.seed, args.rounds)
        rows.append({"local_scale_lo": lo, "local_scale_hi": hi, "overlap_pct": round(st.overlap_pct, 4),
                     "hit_pct": round(st.hit_pct, 4), "n_samples": st.n_samples, "seed": args.seed})
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.DictWriter(out, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)
    if args.out:
        out.close()


def _ft_config(args, mode):
    from .evaluation import FinetuneConfig

    cfg = FinetuneConfig(**json.loads(Path(args.ft_config).read_text())) if args.ft_config else FinetuneConfig()
    over = {"mode": mode}
    for name in ("label_fraction", "steps", "seed", "lr"):
        val = getattr(args, name, None)
        if val is not None:
            over[name] = val
    return replace(cfg, **over)


def cmd_finetune(args):
    from .evaluation import finetune, save_segmenter
    from .volume_store import DatasetManifest

    cfg = _ft_config(args, args.mode)
    ck = None if args.checkpoint in (None, "none") else args.checkpoint
    report, model = finetune(ck, DatasetManifest.load(args.manifest), cfg, return_model=True)
    if args.save:
        save_segmenter(model, report, args.save)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)


def cmd_eval(args):
    from .evaluation import eval_segmenter
    from .volume_store import DatasetManifest

    report = eval_segmenter(args.checkpoint, DatasetManifest.load(args.manifest))
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)


def cmd_compare(args):
    from .evaluation import convergence_compare
    from .volume_store import DatasetManifest

    if not args.manifest:
        raise SystemExit("compare needs --manifest (a labeled dataset)")
    cfg = _load_pretrain_config(args)
    ft = _ft_config(args, "linear")
    rows = convergence_compare(cfg, DatasetManifest.load(args.manifest), _ints(args.probe_epochs), ft,
                               seeds=_ints(args.seeds), out_dir=args.out_dir or "runs/compare")
    for r in rows:
        print(f"{r['mode']:>8} epoch {r['epoch']:>5} seed {r['seed']}  mean Dice {r['mean_dice']:.2f}")


def cmd_reconstruct(args):
    from .reconstruction import reconstruct_dump
    from .volume_store import DatasetManifest

    vol = DatasetManifest.load(args.manifest).load_volume(args.index)
    rows = reconstruct_dump(args.checkpoint, vol, args.out, seed=args.seed, mask_ratio=args.mask_ratio)
    for i, r in enumerate(rows):
        print(f"row {i} {r['kind']:>6}: masked {r['n_masked']}/{r['num_patches']} patches, mse {r['mse']:.6f}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="glmae", description="Global-local masked autoencoder pre-training for volumes")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--shape", type=int, nargs=3, default=[64, 64, 64])
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    def pretrain_opts(s):
        s.add_argument("--config", help="JSON file with PretrainConfig fields")
        s.add_argument("--preset", choices=["desk", "full"], default="desk")
        s.add_argument("--mode", choices=["glmae", "mae3d", "downsample_mae"])
        s.add_argument("--seed", type=int)
        s.add_argument("--manifest")
        s.add_argument("--max-steps", type=int)
        s.add_argument("--epochs", type=int)
        s.add_argument("--out-dir")

    s = sub.add_parser("pretrain", help="run pre-training")
    pretrain_opts(s)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--quiet", action="store_true", help="do not echo the JSON-lines log to stdout")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("augstats", help="Overlap / Hit statistics of local vs global crops (CSV)")
    s.add_argument("--manifest")
    s.add_argument("--shape", type=int, nargs=3, default=[64, 64, 64])
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--p", type=int, default=2)
    s.add_argument("--q", type=int, default=8)
    s.add_argument("--global-scale", type=float, nargs=2, default=[0.5, 1.0])
    s.add_argument("--local-scales", default="0.25:0.25,0.3:0.3,0.35:0.35,0.4:0.4,0.45:0.45,0.5:0.5,0.25:0.5")
    s.add_argument("--rounds", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_augstats)

    def ft_opts(s, manifest=True):
        if manifest:
            s.add_argument("--manifest", required=True)
        s.add_argument("--ft-config", help="JSON file with FinetuneConfig fields")
        s.add_argument("--label-fraction", type=float)
        s.add_argument("--steps", type=int)
        s.add_argument("--lr", type=float)

    s = sub.add_parser("finetune", help="linear or end-to-end segmentation fine-tuning")
    s.add_argument("--checkpoint", help="pre-training checkpoint; omit or 'none' for random init")
    s.add_argument("--mode", choices=["linear", "e2e"], default="e2e")
    s.add_argument("--seed", type=int)
    ft_opts(s)
    s.add_argument("--save", help="write the fine-tuned segmenter checkpoint here")
    s.add_argument("--out", help="write the EvalReport JSON here")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="held-out Dice of a fine-tuned segmenter checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", help="GL-MAE vs MAE3D linear-eval Dice over pre-training epochs")
    pretrain_opts(s)
    ft_opts(s, manifest=False)
    s.add_argument("--probe-epochs", default="50,100,200")
    s.add_argument("--seeds", default="0,1,2")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("reconstruct", help="PNG grid of original / masked / reconstructed views")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mask-ratio", type=float)
    s.add_argument("--out", default="reconstruction.png")
    s.set_defaults(func=cmd_reconstruct)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
