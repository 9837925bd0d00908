"""Exponential-moving-average teacher with decay-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EMASchedule:
    policy: str = "step"          # none | step | cosine
    alpha_start: float = 0.99
    alpha_end: float = 0.9
    milestone: int = 2400
    total: int = 3000

    def validate(self) -> "EMASchedule":
        if self.policy not in ("none", "step", "cosine"):
            raise ValueError(f"unknown EMA policy {self.policy!r}")
        for a in (self.alpha_start, self.alpha_end):
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"EMA rate {a} outside [0, 1]")
        return self


def current_alpha(schedule: EMASchedule, iteration: int) -> float:
    if schedule.policy == "none":
        return schedule.alpha_start
    if schedule.policy == "step":
        return schedule.alpha_start if iteration < schedule.milestone else schedule.alpha_end
    if schedule.policy == "cosine":
        t = min(max(iteration, 0), schedule.total) / max(schedule.total, 1)
        return schedule.alpha_end + (schedule.alpha_start - schedule.alpha_end) * (1 + math.cos(math.pi * t)) / 2
    raise ValueError(f"unknown EMA policy {schedule.policy!r}")


@dataclass
class TeacherState:
    params: dict
    schedule: EMASchedule
    last_update_iteration: int = -1


def init_teacher(student: dict, schedule: EMASchedule = EMASchedule(), iteration: int = -1) -> TeacherState:
    return TeacherState({k: np.array(v, copy=True) for k, v in student.items()},
                        schedule.validate(), iteration)


def ema_update(state: TeacherState, student: dict, iteration: int) -> TeacherState:
    """In-place ``theta_t = alpha * theta_t + (1 - alpha) * theta_s``."""
    if iteration <= state.last_update_iteration:
        raise ValueError(f"EMA update at iteration {iteration} after {state.last_update_iteration}")
    if state.params.keys() != student.keys():
        raise ValueError("teacher and student parameter names differ")
    alpha = current_alpha(state.schedule, iteration)
    for k, t in state.params.items():
        s = student[k]
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch for {k}: {t.shape} vs {s.shape}")
        t *= t.dtype.type(alpha)
        t += t.dtype.type(1.0 - alpha) * s
    state.last_update_iteration = iteration
    return state
