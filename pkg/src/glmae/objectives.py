"""Reconstruction and global-guided consistency losses.

All functions operate on torch tensors and keep the autograd graph of the
student-side inputs. Teacher-side distributions are always detached.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch

from .errors import NumericFailure, ShapeMismatchError, VacuousLossWarning

LOG_EPS = 1e-12


def recon_loss(recon: torch.Tensor, target: torch.Tensor, mask) -> torch.Tensor:
    """Mean squared voxel error over masked patches.

    ``recon`` and ``target`` are [..., P, voxels]; ``mask`` is boolean [..., P].
    With leading batch dimensions, each view is averaged over its own masked
    voxels and the result is averaged over views.
    """
    if recon.shape != target.shape:
        raise ShapeMismatchError(f"recon {tuple(recon.shape)} vs target {tuple(target.shape)}")
    mask = torch.as_tensor(mask, dtype=torch.bool, device=recon.device)
    if mask.shape != recon.shape[:-1]:
        raise ShapeMismatchError(f"mask {tuple(mask.shape)} vs patches {tuple(recon.shape[:-1])}")
    if not mask.any():
        warnings.warn("recon_loss: no masked patches, returning 0", VacuousLossWarning, stacklevel=2)
        return recon.sum() * 0.0
    sq = ((recon - target) ** 2).mean(-1)  # per patch
    w = mask.to(sq.dtype)
    per_view = (sq * w).sum(-1) / w.sum(-1).clamp_min(1.0)
    return per_view.mean()


def sharpen(e: torch.Tensor, t: float) -> torch.Tensor:
    """Temperature softmax over the last axis (max-subtracted)."""
    if not t > 0:
        raise ValueError(f"temperature must be positive, got {t}")
    z = e / t
    z = z - z.max(dim=-1, keepdim=True).values.detach()
    return torch.softmax(z, dim=-1)


def xent(p_target: torch.Tensor, p_student: torch.Tensor) -> torch.Tensor:
    """-sum_k p_target[k] log(p_student[k] + eps); p_target is treated as a constant."""
    if p_target.shape[-1] != p_student.shape[-1]:
        raise ShapeMismatchError(f"distribution sizes differ: {p_target.shape[-1]} vs {p_student.shape[-1]}")
    return -(p_target.detach() * torch.log(p_student + LOG_EPS)).sum(-1)


def entropy(p: torch.Tensor) -> torch.Tensor:
    return -(p * torch.log(p + LOG_EPS)).sum(-1)


def _pairwise_consistency(teacher: torch.Tensor, student: torch.Tensor, t_teacher: float, t_student: float) -> torch.Tensor:
    if teacher.shape[0] == 0:
        raise ValueError("consistency needs at least one teacher embedding")
    if student.shape[0] == 0:
        warnings.warn("consistency: empty student set, returning 0", VacuousLossWarning, stacklevel=3)
        return teacher.sum() * 0.0
    pt = sharpen(teacher, t_teacher).detach()
    log_ps = torch.log(sharpen(student, t_student) + LOG_EPS)
    # [n_teacher, n_student] cross-entropies, averaged over every pair
    return -(pt @ log_ps.T).mean()


def consistency_gg(ec: torch.Tensor, eg: torch.Tensor, t_teacher: float, t_student: float) -> torch.Tensor:
    """Global-to-global term: every unmasked-global teacher embedding against every masked-global student one."""
    return _pairwise_consistency(torch.atleast_2d(ec), torch.atleast_2d(eg), t_teacher, t_student)


def consistency_gl(ec: torch.Tensor, el: torch.Tensor, t_teacher: float, t_student: float) -> torch.Tensor:
    """Global-to-local term; ``el`` may be empty (q = 0), giving 0."""
    el = el.reshape(-1, ec.shape[-1]) if el.numel() == 0 else torch.atleast_2d(el)
    return _pairwise_consistency(torch.atleast_2d(ec), el, t_teacher, t_student)


@dataclass
class LossBreakdown:
    recon_local: torch.Tensor
    recon_global: torch.Tensor
    cons_gg: torch.Tensor
    cons_gl: torch.Tensor
    total: torch.Tensor
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0

    PARTS = ("recon_local", "recon_global", "cons_gg", "cons_gl")

    def grouped(self) -> tuple[torch.Tensor, torch.Tensor]:
        """(reconstruction group, weighted consistency group); they sum to ``total``."""
        rec = self.recon_local + self.beta1 * self.recon_global
        con = self.beta2 * self.cons_gg + self.beta3 * self.cons_gl
        return rec, con

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in (*self.PARTS, "total")}


def weights_from_alpha(alpha: float) -> tuple[float, float, float]:
    """β weights for the two-group form L = L_R + α·L_C."""
    return 1.0, float(alpha), float(alpha)


def _as_tensor(x, like=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.tensor(float(x), dtype=torch.float64 if like is None else like.dtype)


def total_loss(parts, beta1: float = 1.0, beta2: float = 1.0, beta3: float = 1.0) -> LossBreakdown:
    """Weighted sum of the four parts (a mapping or a 4-sequence in canonical order)."""
    if not isinstance(parts, dict):
        parts = dict(zip(LossBreakdown.PARTS, parts))
    ref = next((v for v in parts.values() if isinstance(v, torch.Tensor)), None)
    vals = {k: _as_tensor(parts[k], ref) for k in LossBreakdown.PARTS}
    for k, v in vals.items():
        if not math.isfinite(float(v.detach())):
            raise NumericFailure(f"loss part {k} is not finite ({float(v.detach())})", where=k)
    total = vals["recon_local"] + beta1 * vals["recon_global"] + beta2 * vals["cons_gg"] + beta3 * vals["cons_gl"]
    return LossBreakdown(**vals, total=total, beta1=beta1, beta2=beta2, beta3=beta3)
