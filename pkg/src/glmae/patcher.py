"""Non-overlapping 3D patch tokenization and exact-count random masking."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import MaskRatioError, ShapeMismatchError, TokenizationError
from .views import Triple, View, _triple, round_half_up


def grid_dims_for(size, patch_size) -> Triple:
    size, patch_size = _triple(size), _triple(patch_size)
    for axis, (n, p) in enumerate(zip(size, patch_size)):
        if p < 1 or n % p:
            raise TokenizationError(f"axis {axis}: size {n} is not divisible by patch size {p}", axis=axis)
    return tuple(n // p for n, p in zip(size, patch_size))


def patchify_tensor(x: torch.Tensor, patch_size) -> torch.Tensor:
    """[..., H, W, D] -> [..., P, ph*pw*pd], patches in (h, w, d) block order."""
    ph, pw, pd = _triple(patch_size)
    gh, gw, gd = grid_dims_for(x.shape[-3:], (ph, pw, pd))
    lead = x.shape[:-3]
    x = x.reshape(*lead, gh, ph, gw, pw, gd, pd)
    n = len(lead)
    x = x.permute(*range(n), n, n + 2, n + 4, n + 1, n + 3, n + 5)
    return x.reshape(*lead, gh * gw * gd, ph * pw * pd)


def unpatchify_tensor(patches: torch.Tensor, grid_dims, patch_size) -> torch.Tensor:
    """Exact inverse of :func:`patchify_tensor`."""
    gh, gw, gd = _triple(grid_dims)
    ph, pw, pd = _triple(patch_size)
    *lead, P, V = patches.shape
    if P != gh * gw * gd or V != ph * pw * pd:
        raise ShapeMismatchError(
            f"patches {tuple(patches.shape[-2:])} inconsistent with grid {(gh, gw, gd)} x patch {(ph, pw, pd)}"
        )
    n = len(lead)
    x = patches.reshape(*lead, gh, gw, gd, ph, pw, pd)
    x = x.permute(*range(n), n, n + 3, n + 1, n + 4, n + 2, n + 5)
    return x.reshape(*lead, gh * ph, gw * pw, gd * pd)


@dataclass
class PatchGrid:
    patches: torch.Tensor
    grid_dims: Triple
    patch_size: Triple
    view: View | None = None

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]


@dataclass
class MaskedView:
    grid: PatchGrid
    mask: np.ndarray  # True = masked / hidden from the encoder
    visible_index: np.ndarray

    @property
    def masked_index(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())


def patchify(view: View | np.ndarray, patch_size) -> PatchGrid:
    data = view.data if isinstance(view, View) else view
    t = torch.as_tensor(np.asarray(data))
    patches = patchify_tensor(t, patch_size)
    return PatchGrid(patches, grid_dims_for(t.shape, patch_size), _triple(patch_size), view if isinstance(view, View) else None)


def unpatchify(patches, grid_dims, patch_size) -> torch.Tensor:
    return unpatchify_tensor(torch.as_tensor(patches), grid_dims, patch_size)


def mask_count(ratio: float, num_patches: int) -> int:
    """round-half-up(ratio * P), capped so that at least one patch stays visible."""
    if not 0 <= ratio < 1:
        raise MaskRatioError(f"mask ratio must be in [0, 1), got {ratio}")
    return min(round_half_up(ratio * num_patches), num_patches - 1)


def sample_mask(num_patches: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    k = mask_count(ratio, num_patches)
    mask = np.zeros(num_patches, dtype=bool)
    mask[rng.permutation(num_patches)[:k]] = True
    return mask


def mask_patches(grid: PatchGrid, ratio: float, rng: np.random.Generator) -> MaskedView:
    mask = sample_mask(grid.num_patches, ratio, rng)
    return MaskedView(grid, mask, np.flatnonzero(~mask))


def full_view(grid: PatchGrid) -> MaskedView:
    """Everything visible (the teacher's input)."""
    mask = np.zeros(grid.num_patches, dtype=bool)
    return MaskedView(grid, mask, np.arange(grid.num_patches))


def num_patches(size, patch_size) -> int:
    return math.prod(grid_dims_for(size, patch_size))
