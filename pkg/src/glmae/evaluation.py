"""Downstream segmentation: Dice, linear / end-to-end fine-tuning, convergence comparison."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .errors import IncompatibleCheckpointError, ShapeMismatchError
from .patcher import grid_dims_for, patchify_tensor
from .views import _triple
from .vit3d import Encoder3D, EncoderConfig
from .volume_store import DatasetManifest, LabeledVolume


# ---------------------------------------------------------------- metric


def dice(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> tuple[list[float], float]:
    """Per-class Dice (%) for classes 1..num_classes-1 and their mean.

    A class absent from both ``pred`` and ``gt`` scores NaN and is left out
    of the mean; background is never scored.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    if num_classes < 2:
        raise ValueError("dice needs at least one foreground class")
    scores = []
    for c in range(1, num_classes):
        p, g = pred == c, gt == c
        denom = int(p.sum()) + int(g.sum())
        scores.append(float("nan") if denom == 0 else 100.0 * 2 * int((p & g).sum()) / denom)
    present = [s for s in scores if not math.isnan(s)]
    return scores, (float(np.mean(present)) if present else float("nan"))


# ---------------------------------------------------------------- model


class SegHead(nn.Module):
    """Patch tokens on their grid -> transposed-conv upsampling -> per-voxel class logits."""

    def __init__(self, embed_dim: int, patch_size, num_classes: int, min_channels: int = 8):
        super().__init__()
        patch_size = _triple(patch_size)
        for p in patch_size:
            if p & (p - 1):
                raise ValueError(f"patch size {patch_size} must be powers of two")
        n_stages = max(int(math.log2(p)) for p in patch_size)
        layers, c, remaining = [], embed_dim, list(patch_size)
        for _ in range(n_stages):
            stride = tuple(2 if r > 1 else 1 for r in remaining)
            remaining = [r // s for r, s in zip(remaining, stride)]
            c_out = max(c // 2, min_channels)
            layers += [nn.ConvTranspose3d(c, c_out, kernel_size=stride, stride=stride), nn.GELU()]
            c = c_out
        self.up = nn.Sequential(*layers)
        self.classify = nn.Conv3d(c, num_classes, kernel_size=1)

    def forward(self, tokens: torch.Tensor, grid_dims) -> torch.Tensor:
        B, P, E = tokens.shape
        x = tokens.transpose(1, 2).reshape(B, E, *grid_dims)
        return self.classify(self.up(x))


class Segmenter(nn.Module):
    def __init__(self, enc_cfg: EncoderConfig, num_classes: int):
        super().__init__()
        self.enc_cfg = enc_cfg
        self.num_classes = num_classes
        self.encoder = Encoder3D(enc_cfg)
        self.head = SegHead(enc_cfg.embed_dim, enc_cfg.patch_size, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x [B, H, W, D] -> logits [B, C, H, W, D]."""
        grid = grid_dims_for(x.shape[-3:], self.enc_cfg.patch_size)
        patches = patchify_tensor(x, self.enc_cfg.patch_size)
        idx = torch.arange(patches.shape[1]).expand(patches.shape[0], -1)
        _, tokens = self.encoder(patches, idx, grid)
        return self.head(tokens, grid)


# ---------------------------------------------------------------- data splits


def split_indices(n: int, test_fraction: float = 0.2, split_seed: int = 0) -> tuple[list[int], list[int]]:
    """Fixed train/test split; the train list keeps permutation order so label subsets nest."""
    if n < 2:
        raise ValueError("need at least 2 volumes to hold one out")
    perm = [int(i) for i in np.random.default_rng([split_seed, 4]).permutation(n)]
    n_test = min(max(1, int(round(test_fraction * n))), n - 1)
    return perm[: n - n_test], sorted(perm[n - n_test:])


def label_subset(train: list[int], fraction: float) -> list[int]:
    if not 0 < fraction <= 1:
        raise ValueError("label fraction must lie in (0, 1]")
    return train[: math.ceil(fraction * len(train))]


def split_hash(ids) -> str:
    return hashlib.sha256(json.dumps(list(ids)).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- fine-tuning


@dataclass
class FinetuneConfig:
    mode: str = "e2e"  # "linear" freezes the encoder
    steps: int = 1000
    batch_size: int = 4
    crop_size: tuple = (16, 16, 16)
    lr: float = 3e-4
    weight_decay: float = 0.01
    label_fraction: float = 1.0
    test_fraction: float = 0.2
    split_seed: int = 0
    seed: int = 0
    dice_loss_weight: float = 1.0
    encoder: EncoderConfig | None = None

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.crop_size = _triple(self.crop_size)
        if self.mode not in ("linear", "e2e"):
            raise ValueError(f"fine-tuning mode must be 'linear' or 'e2e', got {self.mode!r}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


@dataclass
class EvalReport:
    per_class: list[float]
    mean_dice: float
    config: dict
    checkpoint_id: str | None
    label_fraction: float
    split_hash: str
    n_train: int
    n_test: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class"] = [None if math.isnan(x) else x for x in self.per_class]
        d["mean_dice"] = None if math.isnan(self.mean_dice) else self.mean_dice
        return json.dumps(d, indent=1)


def encoder_from_checkpoint(path) -> tuple[EncoderConfig, dict]:
    arrays, manifest = ckpt.load_arrays(path)
    enc = manifest["config"]["encoder"]
    return EncoderConfig(**enc), {k: v for k, v in arrays.items() if k.startswith("student.encoder.")}


def load_labeled(manifest: DatasetManifest) -> list[LabeledVolume]:
    return [manifest.load_labeled(i) for i in range(len(manifest))]


def _random_crop(lv: LabeledVolume, size, rng) -> tuple[np.ndarray, np.ndarray]:
    slack = np.array(lv.volume.shape) - np.array(size)
    if (slack < 0).any():
        raise ShapeMismatchError(f"crop {size} larger than volume {lv.volume.shape}")
    o = rng.integers(0, slack + 1)
    sl = tuple(slice(a, a + s) for a, s in zip(o, size))
    return lv.volume.data[sl], lv.labels[sl]


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, num_classes: int) -> torch.Tensor:
    probs = torch.softmax(logits, dim=1)[:, 1:]
    onehot = F.one_hot(target, num_classes).permute(0, 4, 1, 2, 3)[:, 1:].to(probs.dtype)
    dims = (0, 2, 3, 4)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    return 1 - ((2 * inter + 1.0) / (denom + 1.0)).mean()


@torch.no_grad()
def predict_volume(model: Segmenter, data: np.ndarray, crop_size) -> np.ndarray:
    """Label map from non-overlapping tiles of ``crop_size`` covering the volume."""
    crop_size = _triple(crop_size)
    grid_dims_for(data.shape, crop_size)
    model.eval()
    H, W, D = data.shape
    ch, cw, cd = crop_size
    tiles = torch.from_numpy(np.array(data, dtype=np.float32))
    tiles = patchify_tensor(tiles, crop_size).reshape(-1, ch, cw, cd)
    pred = model(tiles.to(next(model.parameters()).dtype)).argmax(1)
    gh, gw, gd = H // ch, W // cw, D // cd
    pred = pred.reshape(gh, gw, gd, ch, cw, cd).permute(0, 3, 1, 4, 2, 5).reshape(H, W, D)
    return pred.numpy()


def evaluate(model: Segmenter, volumes: list[LabeledVolume], crop_size) -> tuple[list[float], float]:
    """Per-volume Dice averaged over volumes; mean over classes present in each volume."""
    per_vol = []
    for lv in volumes:
        scores, _ = dice(predict_volume(model, lv.volume.data, crop_size), lv.labels, model.num_classes)
        per_vol.append(scores)
    arr = np.array(per_vol, dtype=float)
    with np.errstate(all="ignore"):
        per_class = [float(np.nanmean(col)) if not np.isnan(col).all() else float("nan") for col in arr.T]
    present = [x for x in per_class if not math.isnan(x)]
    return per_class, (float(np.mean(present)) if present else float("nan"))


def build_segmenter(cfg: FinetuneConfig, num_classes: int, checkpoint=None) -> Segmenter:
    enc_cfg = cfg.encoder
    enc_arrays = None
    if checkpoint is not None:
        ck_cfg, enc_arrays = encoder_from_checkpoint(checkpoint)
        if enc_cfg is not None and enc_cfg != ck_cfg:
            raise IncompatibleCheckpointError(f"checkpoint encoder {ck_cfg} does not match requested {enc_cfg}")
        enc_cfg = ck_cfg
    if enc_cfg is None:
        enc_cfg = EncoderConfig.desk()
    torch.manual_seed(cfg.seed)
    model = Segmenter(enc_cfg, num_classes)
    if enc_arrays is not None:
        ckpt.load_module("student.encoder", model.encoder, enc_arrays)
    return model


def finetune(
    checkpoint,
    dataset: DatasetManifest | list[LabeledVolume],
    cfg: FinetuneConfig,
    return_model: bool = False,
):
    """Train a segmentation head (and, in e2e mode, the encoder) and report held-out Dice.

    ``checkpoint=None`` gives the random-initialisation baseline.
    """
    torch.use_deterministic_algorithms(True)
    volumes = load_labeled(dataset) if isinstance(dataset, DatasetManifest) else list(dataset)
    num_classes = max(lv.num_classes for lv in volumes)
    train_idx, test_idx = split_indices(len(volumes), cfg.test_fraction, cfg.split_seed)
    used = label_subset(train_idx, cfg.label_fraction)
    model = build_segmenter(cfg, num_classes, checkpoint)

    frozen = cfg.mode == "linear"
    if frozen:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
        enc_before = {k: v.clone() for k, v in model.encoder.state_dict().items()}
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    dtype = next(model.parameters()).dtype

    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, 3, step])
        picks = rng.choice(used, size=cfg.batch_size, replace=True)
        crops = [_random_crop(volumes[i], cfg.crop_size, rng) for i in picks]
        x = torch.from_numpy(np.stack([c[0] for c in crops]).astype(np.float32)).to(dtype)
        y = torch.from_numpy(np.stack([c[1] for c in crops]))
        model.train()
        if frozen:
            model.encoder.eval()
        logits = model(x)
        loss = F.cross_entropy(logits, y)
        if cfg.dice_loss_weight:
            loss = loss + cfg.dice_loss_weight * soft_dice_loss(logits, y, num_classes)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    if frozen:
        for p in model.encoder.parameters():
            assert p.grad is None or not p.grad.any(), "frozen encoder received gradient"
        after = model.encoder.state_dict()
        assert all(torch.equal(enc_before[k], after[k]) for k in after), "frozen encoder changed"

    per_class, mean = evaluate(model, [volumes[i] for i in test_idx], cfg.crop_size)
    report = EvalReport(
        per_class=per_class,
        mean_dice=mean,
        config=cfg.to_dict(),
        checkpoint_id=None if checkpoint is None else str(checkpoint),
        label_fraction=cfg.label_fraction,
        split_hash=split_hash(test_idx),
        n_train=len(used),
        n_test=len(test_idx),
        extra={"train_ids": [int(i) for i in used], "test_ids": [int(i) for i in test_idx]},
    )
    return (report, model) if return_model else report


def linear_eval(checkpoint, dataset, cfg: FinetuneConfig | None = None, **kw):
    return finetune(checkpoint, dataset, replace(cfg or FinetuneConfig(), mode="linear", **kw))


def e2e_finetune(checkpoint, dataset, cfg: FinetuneConfig | None = None, **kw):
    return finetune(checkpoint, dataset, replace(cfg or FinetuneConfig(), mode="e2e", **kw))


def label_fraction_sweep(checkpoint, dataset, cfg: FinetuneConfig, fractions=(0.25, 0.5, 1.0)) -> list[EvalReport]:
    return [finetune(checkpoint, dataset, replace(cfg, label_fraction=f)) for f in fractions]


def save_segmenter(model: Segmenter, report: EvalReport, path) -> Path:
    arrays = ckpt.module_arrays("segmenter", model)
    manifest = {
        "kind": "segmenter",
        "config": {"encoder": model.enc_cfg.to_dict(), "num_classes": model.num_classes, "finetune": report.config},
        "step": report.config["steps"],
    }
    return ckpt.save_arrays(path, arrays, manifest)


def load_segmenter(path) -> tuple[Segmenter, dict]:
    arrays, manifest = ckpt.load_arrays(path)
    if manifest.get("kind") != "segmenter":
        raise IncompatibleCheckpointError(f"{path} is not a segmentation checkpoint")
    model = Segmenter(EncoderConfig(**manifest["config"]["encoder"]), manifest["config"]["num_classes"])
    ckpt.load_module("segmenter", model, arrays)
    return model, manifest


def eval_segmenter(path, dataset, test_fraction: float | None = None, split_seed: int | None = None) -> EvalReport:
    """Held-out Dice of a saved segmentation checkpoint, on the split it was trained with."""
    model, manifest = load_segmenter(path)
    ft = FinetuneConfig(**manifest["config"]["finetune"])
    if test_fraction is not None:
        ft = replace(ft, test_fraction=test_fraction)
    if split_seed is not None:
        ft = replace(ft, split_seed=split_seed)
    volumes = load_labeled(dataset) if isinstance(dataset, DatasetManifest) else list(dataset)
    train_idx, test_idx = split_indices(len(volumes), ft.test_fraction, ft.split_seed)
    per_class, mean = evaluate(model, [volumes[i] for i in test_idx], ft.crop_size)
    return EvalReport(per_class, mean, ft.to_dict(), str(path), ft.label_fraction, split_hash(test_idx),
                      len(label_subset(train_idx, ft.label_fraction)), len(test_idx))


# ---------------------------------------------------------------- convergence comparison


def convergence_compare(
    pretrain_cfg,
    dataset: DatasetManifest | list[LabeledVolume],
    probe_epochs,
    ft_cfg: FinetuneConfig,
    seeds=(0,),
    out_dir="runs/compare",
    modes=("glmae", "mae3d"),
) -> list[dict]:
    """Pre-train each mode, linear-evaluate at every probe epoch, write CSV and PNG.

    Both modes pre-train on the images of the training split only and are
    evaluated on the same held-out split.
    """
    from .pretrain import train, steps_per_epoch

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    volumes = load_labeled(dataset) if isinstance(dataset, DatasetManifest) else list(dataset)
    train_idx, test_idx = split_indices(len(volumes), ft_cfg.test_fraction, ft_cfg.split_seed)
    images = [volumes[i].volume for i in train_idx]
    probe_epochs = sorted(int(e) for e in probe_epochs)
    spe = steps_per_epoch(len(images), pretrain_cfg.batch_size)

    rows = []
    for seed in seeds:
        for mode in modes:
            run_dir = out / f"{mode}_seed{seed}"
            cfg = replace(
                pretrain_cfg,
                mode=mode,
                seed=seed,
                epochs=probe_epochs[-1],
                max_steps=None,
                save_at_steps=tuple(e * spe for e in probe_epochs),
                out_dir=str(run_dir),
            )
            train(cfg, images)
            for e in probe_epochs:
                ck = run_dir / "checkpoints" / f"step_{e * spe:06d}"
                rep = finetune(ck, volumes, replace(ft_cfg, mode="linear", seed=seed))
                rows.append({"mode": mode, "epoch": e, "mean_dice": rep.mean_dice, "seed": seed,
                             "split_hash": rep.split_hash})

    with open(out / "convergence.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["mode", "epoch", "mean_dice", "seed"], extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    (out / "splits.json").write_text(json.dumps({"test_ids": test_idx, "split_hash": split_hash(test_idx)}))
    _plot_convergence(rows, out / "convergence.png")
    return rows


def _plot_convergence(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode in sorted({r["mode"] for r in rows}):
        epochs = sorted({r["epoch"] for r in rows if r["mode"] == mode})
        med = [np.nanmedian([r["mean_dice"] for r in rows if r["mode"] == mode and r["epoch"] == e]) for e in epochs]
        ax.plot(epochs, med, marker="o", label=mode)
    ax.set_xlabel("pre-training epochs")
    ax.set_ylabel("linear-eval mean Dice (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
