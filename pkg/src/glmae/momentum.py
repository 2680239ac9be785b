"""Momentum teacher: initialization, EMA update, and per-iteration cosine schedules."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .vit3d import Student, Teacher


@dataclass(frozen=True)
class ScheduleState:
    step: int
    total_steps: int
    mu0: float = 0.996
    lr0: float = 1e-2
    warmup_steps: int = 0

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not 0 <= self.step <= self.total_steps:
            raise ValueError(f"step {self.step} outside [0, {self.total_steps}]")
        if not 0 < self.mu0 < 1:
            raise ValueError("mu0 must lie in (0, 1)")
        if self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")


def momentum_at(s: ScheduleState) -> float:
    """Cosine ramp of the teacher momentum from mu0 (step 0) to exactly 1 (last step)."""
    if s.step >= s.total_steps:
        return 1.0
    return 1.0 - (1.0 - s.mu0) * (math.cos(math.pi * s.step / s.total_steps) + 1.0) / 2.0


def lr_at(s: ScheduleState) -> float:
    """Linear warmup 0 -> lr0, then half-cosine decay to 0 at total_steps."""
    if s.step < s.warmup_steps:
        return s.lr0 * s.step / s.warmup_steps
    if s.step >= s.total_steps:
        return 0.0
    span = s.total_steps - s.warmup_steps
    return s.lr0 * 0.5 * (1.0 + math.cos(math.pi * (s.step - s.warmup_steps) / span))


def init_teacher(student: Student) -> Teacher:
    teacher = Teacher(copy.deepcopy(student.encoder), copy.deepcopy(student.projector))
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return teacher


@torch.no_grad()
def ema_update(student: nn.Module, teacher: nn.Module, mu: float) -> nn.Module:
    """teacher <- mu * teacher + (1 - mu) * student, in place, matched by parameter name.

    ``student`` may be the full student (extra decoder parameters are ignored)
    or any module whose named parameters cover the teacher's.
    """
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {mu}")
    src = dict(student.named_parameters())
    for name, t in teacher.named_parameters():
        if name not in src:
            raise KeyError(f"student has no parameter {name!r}")
        s = src[name]
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(s.shape)} vs {tuple(t.shape)}")
        if mu == 1.0:
            continue
        if mu == 0.0:
            t.copy_(s)
        else:
            t.lerp_(s.detach(), 1.0 - mu)
    return teacher
