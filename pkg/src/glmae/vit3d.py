"""3D ViT student encoder, light reconstruction decoder, and projection heads.

Encoder and decoder both keep a learnable positional table stored at
``base_grid_dims`` (the local-view patch grid). Views on any other grid get a
trilinearly interpolated copy of the table, so one set of weights serves local
and global views alike.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericFailure, ShapeMismatchError
from .patcher import MaskedView, patchify
from .views import Triple, View, _triple


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    mlp_ratio: float = 4.0
    patch_size: Triple = (16, 16, 16)
    base_grid_dims: Triple = (6, 6, 6)
    decoder_depth: int = 2
    decoder_dim: int | None = None  # defaults to embed_dim // 2
    decoder_heads: int | None = None  # defaults to num_heads

    def __post_init__(self):
        object.__setattr__(self, "patch_size", _triple(self.patch_size))
        object.__setattr__(self, "base_grid_dims", _triple(self.base_grid_dims))
        if self.decoder_dim is None:
            object.__setattr__(self, "decoder_dim", max(1, self.embed_dim // 2))
        if self.decoder_heads is None:
            object.__setattr__(self, "decoder_heads", self.num_heads)
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.decoder_dim % self.decoder_heads:
            raise ValueError(f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}")

    @property
    def patch_voxels(self) -> int:
        return math.prod(self.patch_size)

    @classmethod
    def vit_tiny(cls, **kw) -> "EncoderConfig":
        return cls(embed_dim=192, depth=12, num_heads=3, **kw)

    @classmethod
    def vit_base(cls, **kw) -> "EncoderConfig":
        return cls(embed_dim=768, depth=12, num_heads=12, **kw)

    @classmethod
    def desk(cls, **kw) -> "EncoderConfig":
        kw.setdefault("patch_size", (8, 8, 8))
        kw.setdefault("base_grid_dims", (2, 2, 2))
        return cls(embed_dim=64, depth=4, num_heads=4, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ProjectionConfig:
    hidden_dim: int = 2048
    out_dim: int = 512
    num_layers: int = 3

    def __post_init__(self):
        if self.out_dim <= 1:
            raise ValueError("projection output dimension must exceed 1")
        if self.num_layers < 1:
            raise ValueError("projection needs at least one layer")


@dataclass
class TokenEmbedding:
    cls: torch.Tensor
    patch_tokens: torch.Tensor


def interp_pos_embed(table: torch.Tensor, base_grid, target_grid) -> torch.Tensor:
    """Resample a flattened [P_base, C] positional table onto ``target_grid``."""
    base_grid, target_grid = _triple(base_grid), _triple(target_grid)
    if min(target_grid) < 1:
        raise ValueError(f"target grid must have positive axes, got {target_grid}")
    if table.shape[0] != math.prod(base_grid):
        raise ShapeMismatchError(f"table has {table.shape[0]} rows, base grid {base_grid} needs {math.prod(base_grid)}")
    if target_grid == base_grid:
        return table
    c = table.shape[1]
    grid = table.T.reshape(1, c, *base_grid)
    out = F.interpolate(grid, size=target_grid, mode="trilinear", align_corners=False)
    return out.reshape(c, -1).T


def _init_weights(m: nn.Module):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        h = self.num_heads

        def heads(t):
            return t.reshape(B, N, h, C // h).transpose(1, 2)

        q, k, v = heads(self.wq(x)), heads(self.wk(x)), heads(self.wv(x))
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _gather_rows(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return x.gather(1, idx[..., None].expand(-1, -1, x.shape[-1]))


class Encoder3D(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        E = cfg.embed_dim
        self.patch_embed = nn.Linear(cfg.patch_voxels, E)
        self.pos_embed = nn.Parameter(torch.zeros(math.prod(cfg.base_grid_dims), E))
        self.cls_token = nn.Parameter(torch.zeros(E))
        self.blocks = nn.ModuleList(Block(E, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(E)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.apply(_init_weights)

    def forward(self, patches: torch.Tensor, visible_idx: torch.Tensor, grid_dims) -> tuple[torch.Tensor, torch.Tensor]:
        """patches [B, P, voxels], visible_idx [B, V] -> (cls [B, E], tokens [B, V, E])."""
        pos = interp_pos_embed(self.pos_embed, self.cfg.base_grid_dims, grid_dims)
        if pos.shape[0] != patches.shape[1]:
            raise ShapeMismatchError(f"grid {grid_dims} has {pos.shape[0]} patches, input has {patches.shape[1]}")
        x = self.patch_embed(_gather_rows(patches, visible_idx)) + pos[visible_idx]
        cls = self.cls_token.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1)
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if not torch.isfinite(x).all():
                raise NumericFailure(f"non-finite activations after encoder block {i}", where=i)
        x = self.norm(x)
        return x[:, 0], x[:, 1:]


class Decoder3D(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        Dd = cfg.decoder_dim
        self.embed = nn.Linear(cfg.embed_dim, Dd)
        self.mask_token = nn.Parameter(torch.zeros(Dd))
        self.pos_embed = nn.Parameter(torch.zeros(math.prod(cfg.base_grid_dims), Dd))
        self.blocks = nn.ModuleList(Block(Dd, cfg.decoder_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth))
        self.norm = nn.LayerNorm(Dd)
        self.head = nn.Linear(Dd, cfg.patch_voxels)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        self.apply(_init_weights)

    def forward(self, tokens: torch.Tensor, visible_idx: torch.Tensor, grid_dims) -> torch.Tensor:
        """tokens [B, V, E] at positions visible_idx -> reconstructed patches [B, P, voxels]."""
        pos = interp_pos_embed(self.pos_embed, self.cfg.base_grid_dims, grid_dims)
        B, V, _ = tokens.shape
        P = pos.shape[0]
        if V > P or visible_idx.shape != (B, V):
            raise ShapeMismatchError(f"{V} tokens / index {tuple(visible_idx.shape)} do not fit a {P}-patch grid")
        x = self.embed(tokens)
        full = self.mask_token.expand(B, P, -1)
        full = full.scatter(1, visible_idx[..., None].expand(-1, -1, x.shape[-1]), x)
        x = full + pos
        for blk in self.blocks:
            x = blk(x)
        return self.head(self.norm(x))


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, cfg: ProjectionConfig = ProjectionConfig()):
        super().__init__()
        dims = [in_dim] + [cfg.hidden_dim] * (cfg.num_layers - 1) + [cfg.out_dim]
        layers = []
        for i in range(cfg.num_layers):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < cfg.num_layers - 1:
                layers.append(nn.GELU())
        self.mlp = nn.Sequential(*layers)
        self.apply(_init_weights)

    def forward(self, x):
        return self.mlp(x)


class Student(nn.Module):
    """Encoder + decoder + projection head trained by gradient descent."""

    def __init__(self, cfg: EncoderConfig, proj: ProjectionConfig = ProjectionConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder3D(cfg)
        self.decoder = Decoder3D(cfg)
        self.projector = ProjectionHead(cfg.embed_dim, proj)


class Teacher(nn.Module):
    """Momentum copy of the student's encoder and projection head."""

    def __init__(self, encoder: Encoder3D, projector: ProjectionHead):
        super().__init__()
        self.encoder = encoder
        self.projector = projector


# ---------------------------------------------------------------- single-view functional API


def _index_tensor(idx: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(idx, dtype=np.int64))[None]


def _patches(mv: MaskedView, like: nn.Module) -> torch.Tensor:
    p = next(like.parameters())
    return mv.grid.patches.to(dtype=p.dtype, device=p.device)[None]


def encode(encoder: Encoder3D, mv: MaskedView, order: np.ndarray | None = None) -> TokenEmbedding:
    """Encode the visible patches of one masked view.

    ``order`` optionally overrides the sequence order of visible positions
    (any permutation of ``mv.visible_index``).
    """
    idx = mv.visible_index if order is None else order
    if len(idx) < 1:
        raise ValueError("masked view has no visible patches")
    cls, tokens = encoder(_patches(mv, encoder), _index_tensor(idx), mv.grid.grid_dims)
    return TokenEmbedding(cls[0], tokens[0])


def encode_full(encoder: Encoder3D, view: View, patch_size=None) -> TokenEmbedding:
    from .patcher import full_view

    grid = patchify(view, patch_size or encoder.cfg.patch_size)
    return encode(encoder, full_view(grid))


def decode(decoder: Decoder3D, patch_tokens: torch.Tensor, mask: np.ndarray, target_grid) -> torch.Tensor:
    mask = np.asarray(mask, dtype=bool)
    visible = np.flatnonzero(~mask)
    if len(visible) != patch_tokens.shape[0]:
        raise ShapeMismatchError(f"{patch_tokens.shape[0]} tokens but mask leaves {len(visible)} visible")
    if len(mask) != math.prod(_triple(target_grid)):
        raise ShapeMismatchError(f"mask length {len(mask)} does not match grid {target_grid}")
    return decoder(patch_tokens[None], _index_tensor(visible), target_grid)[0]


def project(head: ProjectionHead, cls: torch.Tensor) -> torch.Tensor:
    return head(cls)


def parameter_count(m: nn.Module) -> int:
    return sum(p.numel() for p in m.parameters())
