"""Temporal-average (mean teacher) network."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch

from .model import ReIDNet


@dataclass
class TeacherState:
    model: ReIDNet
    momentum: float
    step: int = 0


def init_teacher(student: ReIDNet, momentum: float = 0.999) -> TeacherState:
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return TeacherState(teacher, float(momentum), 0)


@torch.no_grad()
def ema_update(teacher: TeacherState, student: ReIDNet) -> TeacherState:
    """theta_T <- m * theta_T + (1 - m) * theta_S, in place.

    BatchNorm running statistics are averaged the same way; integer buffers
    (``num_batches_tracked``) are copied from the student.
    """
    t_state = teacher.model.state_dict()
    s_state = student.state_dict()
    if t_state.keys() != s_state.keys():
        raise ValueError("teacher and student parameter names differ")
    m = teacher.momentum
    for name, t in t_state.items():
        s = s_state[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        if t.is_floating_point():
            t.mul_(m).add_(s.detach(), alpha=1.0 - m)
        else:
            t.copy_(s)
    teacher.step += 1
    return teacher
