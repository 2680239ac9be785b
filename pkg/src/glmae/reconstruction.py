"""Render (original, masked, reconstructed) centre slices of sampled views."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .objectives import recon_loss
from .patcher import grid_dims_for, patchify_tensor, sample_mask, unpatchify_tensor
from .pretrain import Pretrainer
from .views import sample_global, sample_local
from .volume_store import Volume

MASK_RGB = (110, 110, 140)
TILE = 96


def _slice_rgb(vol: np.ndarray) -> np.ndarray:
    sl = vol[:, :, vol.shape[2] // 2]
    gray = np.clip(np.nan_to_num(sl, nan=0.0), 0, 1)
    rgb = np.repeat((gray * 255).astype(np.uint8)[..., None], 3, axis=-1)
    rgb[np.isnan(sl)] = MASK_RGB
    img = Image.fromarray(rgb).resize((TILE, TILE), Image.NEAREST)
    return np.asarray(img)


@torch.no_grad()
def reconstruct_dump(checkpoint, volume: Volume, out_path, seed: int = 0, mask_ratio: float | None = None) -> list[dict]:
    """Write a PNG with one row per sampled view (p globals, then q locals).

    Returns one record per row with the masked-patch count, the masked volume
    (hidden voxels set to NaN) and the reconstruction MSE on masked patches.
    """
    trainer = Pretrainer.from_checkpoint(checkpoint, [volume])
    cfg = trainer.rcfg
    ratio = cfg.mask_ratio if mask_ratio is None else mask_ratio
    ps = cfg.encoder.patch_size
    rng = np.random.default_rng([seed, 5])
    views = [sample_global(volume, cfg.views, rng) for _ in range(cfg.p)]
    views += [sample_local(volume, cfg.views, rng) for _ in range(cfg.q)]

    rows, tiles = [], []
    student = trainer.student.eval()
    for v in views:
        grid = grid_dims_for(v.data.shape, ps)
        patches = patchify_tensor(torch.from_numpy(np.array(v.data)), ps)
        mask = sample_mask(patches.shape[0], ratio, rng)
        vis = torch.as_tensor(np.flatnonzero(~mask))[None]
        _, tok = student.encoder(patches[None], vis, grid)
        rec = student.decoder(tok, vis, grid)[0]
        mse = float(recon_loss(rec, patches, mask))
        hidden = patches.clone()
        hidden[torch.as_tensor(mask)] = float("nan")
        masked_vol = unpatchify_tensor(hidden, grid, ps).numpy()
        # visible patches are shown as input, hidden ones as the model's guess
        shown = torch.where(torch.as_tensor(mask)[:, None], rec, patches)
        rec_vol = unpatchify_tensor(shown, grid, ps).numpy()
        tiles.append(np.concatenate([_slice_rgb(v.data), _slice_rgb(masked_vol), _slice_rgb(rec_vol)], axis=1))
        rows.append({"kind": v.kind, "n_masked": int(mask.sum()), "num_patches": int(mask.size),
                     "mse": mse, "masked_volume": masked_vol})
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.concatenate(tiles, axis=0)).save(out_path)
    return rows
