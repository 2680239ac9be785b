"""Pre-training loop: view sampling, masking, student/teacher forward, losses, updates.

Randomness protocol (relied on by resume and by external replays):

* torch's global RNG is seeded with ``cfg.seed`` right before the student is built;
* the volume order of epoch ``e`` is ``default_rng([seed, 1, e]).permutation(N)``;
  step ``k`` of the epoch takes the ``k``-th slice of ``batch_size`` indices
  (a trailing partial batch is dropped unless N < batch_size);
* all view and mask draws of global step ``s`` come from ``default_rng([seed, 2, s])``:
  for each volume of the batch in order, p global crops, then q local crops,
  then one mask per global view, then one mask per local view.
"""

from __future__ import annotations

import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .momentum import ScheduleState, ema_update, init_teacher, lr_at, momentum_at
from .objectives import LossBreakdown, consistency_gg, consistency_gl, recon_loss, total_loss
from .patcher import grid_dims_for, patchify_tensor, sample_mask
from .views import ViewConfig, _triple, downsample_whole, sample_global, sample_local
from .vit3d import EncoderConfig, ProjectionConfig, Student, Teacher
from .volume_store import DatasetManifest, Volume

MODES = ("glmae", "mae3d", "downsample_mae")


@dataclass
class PretrainConfig:
    manifest: str | None = None
    mode: str = "glmae"
    p: int = 2
    q: int = 8
    global_size: tuple = (160, 160, 160)
    local_size: tuple = (96, 96, 96)
    global_scale: tuple = (0.5, 1.0)
    local_scale: tuple = (0.25, 0.5)
    mask_ratio: float = 0.6
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0
    t_teacher: float = 0.04
    t_student: float = 0.1
    center_teacher: bool = False
    center_momentum: float = 0.9
    mu0: float = 0.996
    epochs: int = 1600
    max_steps: int | None = None
    batch_size: int = 256
    lr0: float = 1e-2
    weight_decay: float = 0.05
    adam_betas: tuple = (0.9, 0.95)
    warmup_frac: float = 0.05
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig.vit_base)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    checkpoint_every: int = 50
    save_at_steps: tuple = ()
    out_dir: str = "runs/pretrain"

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.projection, dict):
            self.projection = ProjectionConfig(**self.projection)
        self.global_size = _triple(self.global_size)
        self.local_size = _triple(self.local_size)
        self.global_scale = tuple(float(x) for x in self.global_scale)
        self.local_scale = tuple(float(x) for x in self.local_scale)
        self.adam_betas = tuple(float(x) for x in self.adam_betas)
        self.save_at_steps = tuple(int(x) for x in self.save_at_steps)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "glmae" and self.p < 1:
            raise ValueError("glmae mode needs p >= 1")
        if self.q < 0 or self.p < 0:
            raise ValueError("p and q must be non-negative")
        if self.mode != "glmae" and self.q < 1:
            raise ValueError(f"{self.mode} mode reconstructs local views only and needs q >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        base = grid_dims_for(self.local_size, self.encoder.patch_size)
        if base != self.encoder.base_grid_dims:
            raise ValueError(f"encoder base grid {self.encoder.base_grid_dims} must equal the local-view grid {base}")
        grid_dims_for(self.global_size, self.encoder.patch_size)

    @classmethod
    def desk(cls, **kw) -> "PretrainConfig":
        """Desk-scale preset: every structural asymmetry of the full config at a fraction of the compute."""
        base = dict(
            p=2,
            q=4,
            global_size=(32, 32, 32),
            local_size=(16, 16, 16),
            batch_size=2,
            epochs=50,
            lr0=1e-3,
            encoder=EncoderConfig.desk(),
            projection=ProjectionConfig(hidden_dim=512, out_dim=512),
            checkpoint_every=50,
        )
        base.update(kw)
        return cls(**base)

    def resolved(self) -> "PretrainConfig":
        """Apply mode constraints: the baselines drop global views, the teacher and every non-local term."""
        if self.mode == "glmae":
            return self
        return replace(self, p=0, beta1=0.0, beta2=0.0, beta3=0.0)

    @property
    def views(self) -> ViewConfig:
        return ViewConfig(self.global_scale, self.global_size, self.local_scale, self.local_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PretrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ViewBatch:
    """Patchified views of one step; globals may be empty (p = 0)."""

    global_patches: torch.Tensor  # [B*p, P', voxels]
    global_masks: np.ndarray  # [B*p, P']
    global_grid: tuple
    local_patches: torch.Tensor  # [B*q, P, voxels]
    local_masks: np.ndarray
    local_grid: tuple
    batch: int
    p: int
    q: int


@dataclass
class TrainReport:
    log: list[dict]
    wall_clock: float
    final_checkpoint: Path | None
    config: dict


def steps_per_epoch(n_volumes: int, batch_size: int) -> int:
    return max(1, n_volumes // batch_size)


def _visible_index(masks: np.ndarray) -> torch.Tensor:
    # exact-count masking gives every row the same number of visible patches
    return torch.as_tensor(np.stack([np.flatnonzero(~m) for m in masks]), dtype=torch.int64)


def sample_batch(volumes: list[Volume], cfg: PretrainConfig, rng: np.random.Generator) -> ViewBatch:
    """Draw and patchify every view for one step following the module's rng protocol."""
    cfg = cfg.resolved()
    vc = cfg.views
    ps = cfg.encoder.patch_size
    g_data, l_data, g_masks, l_masks = [], [], [], []
    gP = math.prod(grid_dims_for(cfg.global_size, ps))
    lP = math.prod(grid_dims_for(cfg.local_size, ps))
    for v in volumes:
        gs = [sample_global(v, vc, rng).data for _ in range(cfg.p)]
        if cfg.mode == "downsample_mae":
            whole = downsample_whole(v, cfg.local_size).data
            ls = [whole] * cfg.q
        else:
            ls = [sample_local(v, vc, rng).data for _ in range(cfg.q)]
        g_masks += [sample_mask(gP, cfg.mask_ratio, rng) for _ in gs]
        l_masks += [sample_mask(lP, cfg.mask_ratio, rng) for _ in ls]
        g_data += gs
        l_data += ls

    def stack(arrs, size):
        if not arrs:
            return torch.zeros(0, *size)
        return torch.from_numpy(np.stack(arrs).astype(np.float32))

    return ViewBatch(
        global_patches=patchify_tensor(stack(g_data, cfg.global_size), ps),
        global_masks=np.array(g_masks, dtype=bool).reshape(len(g_data), gP),
        global_grid=grid_dims_for(cfg.global_size, ps),
        local_patches=patchify_tensor(stack(l_data, cfg.local_size), ps),
        local_masks=np.array(l_masks, dtype=bool).reshape(len(l_data), lP),
        local_grid=grid_dims_for(cfg.local_size, ps),
        batch=len(volumes),
        p=cfg.p,
        q=cfg.q,
    )


def compute_losses(
    student: Student,
    teacher: Teacher | None,
    vb: ViewBatch,
    cfg: PretrainConfig,
    center: torch.Tensor | None = None,
) -> tuple[LossBreakdown, torch.Tensor | None]:
    """Forward every view and assemble the four loss parts.

    Returns the breakdown and the batch mean of the raw teacher embeddings
    (for optional centering), or None when the teacher is not used.
    """
    cfg = cfg.resolved()
    dtype = next(student.parameters()).dtype
    zero = torch.zeros((), dtype=dtype)
    B, p, q = vb.batch, vb.p, vb.q

    L = vb.local_patches.to(dtype)
    vis_l = _visible_index(vb.local_masks)
    cls_l, tok_l = student.encoder(L, vis_l, vb.local_grid)
    rec_l = student.decoder(tok_l, vis_l, vb.local_grid)
    recon_local = recon_loss(rec_l, L, vb.local_masks)

    if p == 0:
        return total_loss((recon_local, zero, zero, zero), cfg.beta1, cfg.beta2, cfg.beta3), None

    G = vb.global_patches.to(dtype)
    vis_g = _visible_index(vb.global_masks)
    cls_g, tok_g = student.encoder(G, vis_g, vb.global_grid)
    rec_g = student.decoder(tok_g, vis_g, vb.global_grid)
    recon_global = recon_loss(rec_g, G, vb.global_masks)

    all_idx = torch.arange(G.shape[1]).expand(G.shape[0], -1)
    with torch.no_grad():
        cls_c, _ = teacher.encoder(G, all_idx, vb.global_grid)
        ec_raw = teacher.projector(cls_c)
    ec = ec_raw - center if center is not None else ec_raw
    eg = student.projector(cls_g)
    el = student.projector(cls_l) if q else eg[:0]

    gg, gl = [], []
    for b in range(B):
        ec_b = ec[b * p:(b + 1) * p]
        gg.append(consistency_gg(ec_b, eg[b * p:(b + 1) * p], cfg.t_teacher, cfg.t_student))
        gl.append(consistency_gl(ec_b, el[b * q:(b + 1) * q], cfg.t_teacher, cfg.t_student))
    parts = (recon_local, recon_global, torch.stack(gg).mean(), torch.stack(gl).mean())
    return total_loss(parts, cfg.beta1, cfg.beta2, cfg.beta3), ec_raw.mean(0)


class Pretrainer:
    """Owns the student, teacher, optimizer and step counter of one run."""

    def __init__(self, cfg: PretrainConfig, volumes: list[Volume] | None = None):
        self.cfg = cfg
        self.rcfg = cfg.resolved()
        if volumes is None:
            if cfg.manifest is None:
                raise ValueError("config has no manifest and no volumes were given")
            m = DatasetManifest.load(cfg.manifest)
            volumes = [m.load_volume(i) for i in range(len(m))]
        if not volumes:
            raise ValueError("empty dataset")
        self.volumes = volumes
        torch.manual_seed(cfg.seed)
        self.student = Student(cfg.encoder, cfg.projection)
        self.teacher = init_teacher(self.student) if self.rcfg.p > 0 else None
        self.center = torch.zeros(cfg.projection.out_dim) if (cfg.center_teacher and self.teacher) else None
        self.opt = torch.optim.AdamW(
            self.student.parameters(), lr=cfg.lr0, betas=cfg.adam_betas, weight_decay=cfg.weight_decay
        )
        self.step = 0
        self.spe = steps_per_epoch(len(volumes), cfg.batch_size)
        self.total_steps = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * self.spe
        self.warmup_steps = int(round(cfg.warmup_frac * self.total_steps))

    # -- schedules and data order

    def schedule(self, step: int | None = None) -> ScheduleState:
        return ScheduleState(
            self.step if step is None else step,
            max(self.total_steps, 1),
            self.cfg.mu0,
            self.cfg.lr0,
            min(self.warmup_steps, max(self.total_steps, 1)),
        )

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.spe)
        perm = np.random.default_rng([self.cfg.seed, 1, epoch]).permutation(len(self.volumes))
        return perm[k * self.cfg.batch_size:(k + 1) * self.cfg.batch_size]

    def step_rng(self, step: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, 2, step])

    # -- one optimization step

    def train_step(self) -> dict:
        step = self.step
        vols = [self.volumes[i] for i in self.batch_indices(step)]
        vb = sample_batch(vols, self.cfg, self.step_rng(step))
        sched = self.schedule(step)
        lr = lr_at(sched)
        for g in self.opt.param_groups:
            g["lr"] = lr

        self.student.train()
        losses, ec_mean = compute_losses(self.student, self.teacher, vb, self.cfg, self.center)
        self.opt.zero_grad(set_to_none=True)
        losses.total.backward()
        self.opt.step()

        mu = momentum_at(sched)
        if self.teacher is not None:
            ema_update(self.student, self.teacher, mu)
            if self.center is not None:
                m = self.cfg.center_momentum
                self.center.mul_(m).add_(ec_mean.detach(), alpha=1 - m)
        self.step += 1
        return {"step": step, **losses.as_floats(), "lr": lr, "mu": mu}

    # -- checkpoints

    def state_arrays(self) -> dict:
        arrays = ckpt.module_arrays("student", self.student)
        if self.teacher is not None:
            arrays.update(ckpt.module_arrays("teacher", self.teacher))
        if self.center is not None:
            arrays["teacher_center"] = self.center.numpy().astype(np.float32)
        names = {p: n for n, p in self.student.named_parameters()}
        arrays.update(ckpt.optimizer_arrays("optim", self.opt, names))
        return arrays

    def save(self, path, final: bool = False) -> Path:
        manifest = {
            "kind": "pretrain",
            "config": self.cfg.to_dict(),
            "step": self.step,
            "total_steps": self.total_steps,
            "final": final,
        }
        return ckpt.save_arrays(path, self.state_arrays(), manifest)

    @classmethod
    def from_checkpoint(cls, path, volumes: list[Volume] | None = None, **overrides) -> "Pretrainer":
        arrays, manifest = ckpt.load_arrays(path)
        cfg = PretrainConfig.from_dict({**manifest["config"], **overrides})
        self = cls(cfg, volumes)
        ckpt.load_module("student", self.student, arrays)
        if self.teacher is not None:
            ckpt.load_module("teacher", self.teacher, arrays)
        if self.center is not None and "teacher_center" in arrays:
            self.center.copy_(torch.from_numpy(arrays["teacher_center"]))
        ckpt.load_optimizer("optim", self.opt, dict(self.student.named_parameters()), arrays)
        self.step = int(manifest["step"])
        return self


def _emit(record: dict, streams) -> None:
    line = json.dumps(record)
    for s in streams:
        s.write(line + "\n")
        s.flush()


def train(
    cfg: PretrainConfig,
    volumes: list[Volume] | None = None,
    echo: bool = False,
    resume_from=None,
) -> TrainReport:
    """Run (or resume) pre-training to ``total_steps``; writes a JSON-lines log and checkpoints under out_dir."""
    torch.use_deterministic_algorithms(True)
    t0 = time.perf_counter()
    out = Path(cfg.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        trainer = Pretrainer.from_checkpoint(resume_from, volumes, out_dir=cfg.out_dir)
        mode = "a"
    else:
        trainer = Pretrainer(cfg, volumes)
        mode = "w"
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    log = []
    with open(out / "log.jsonl", mode) as fh:
        streams = [fh, sys.stdout] if echo else [fh]
        if trainer.total_steps == 0:
            trainer.save(out / "checkpoints" / "step_000000")
        while trainer.step < trainer.total_steps:
            rec = trainer.train_step()
            log.append(rec)
            _emit(rec, streams)
            s = trainer.step
            if (cfg.checkpoint_every and s % cfg.checkpoint_every == 0) or s in cfg.save_at_steps:
                trainer.save(out / "checkpoints" / f"step_{s:06d}")
    final = trainer.save(out / "final", final=True)
    return TrainReport(log, time.perf_counter() - t0, final, cfg.to_dict())
