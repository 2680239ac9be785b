"""Fixed desk benchmark: pretrained vs randomly initialised encoders under e2e fine-tuning."""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .evaluation import FinetuneConfig, finetune, split_indices
from .pretrain import PretrainConfig, train
from .volume_store import LabeledVolume, synth_volume

BENCH_SEED = 100


def desk_dataset(n: int = 20, shape=(64, 64, 64), num_classes: int = 3) -> list[LabeledVolume]:
    return [synth_volume(shape, num_classes, np.random.default_rng([BENCH_SEED, i])) for i in range(n)]


def downstream_direction(
    seeds=(0, 1, 2),
    pretrain_steps: int = 500,
    mode: str = "glmae",
    ft: FinetuneConfig | None = None,
    out_dir="runs/downstream",
    pretrain_overrides: dict | None = None,
    volumes: list[LabeledVolume] | None = None,
) -> dict:
    """Pre-train on the training images only, then fine-tune both encoders on the same split.

    Returns per-seed mean Dice for both arms and their medians. Checkpoints
    already present under ``out_dir`` are reused.
    """
    ft = ft or FinetuneConfig(mode="e2e")
    volumes = volumes if volumes is not None else desk_dataset()
    train_idx, _ = split_indices(len(volumes), ft.test_fraction, ft.split_seed)
    images = [volumes[i].volume for i in train_idx]
    out = Path(out_dir)
    rows = []
    for seed in seeds:
        run = out / f"{mode}_seed{seed}"
        ck = run / "final"
        if not ck.with_suffix(".npz").exists():
            cfg = PretrainConfig.desk(mode=mode, max_steps=pretrain_steps, seed=seed, out_dir=str(run),
                                      checkpoint_every=0, **(pretrain_overrides or {}))
            train(cfg, images)
        cfg = replace(ft, seed=seed)
        pre = finetune(ck, volumes, cfg)
        rand = finetune(None, volumes, cfg)
        rows.append({"seed": seed, "pretrained": pre.mean_dice, "random": rand.mean_dice,
                     "pretrained_per_class": pre.per_class, "random_per_class": rand.per_class})
    result = {
        "mode": mode,
        "pretrain_steps": pretrain_steps,
        "finetune": ft.to_dict(),
        "rows": rows,
        "median_pretrained": float(np.median([r["pretrained"] for r in rows])),
        "median_random": float(np.median([r["random"] for r in rows])),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{mode}_summary.json").write_text(json.dumps(result, indent=1))
    return result
