"""Filter input features and the constant-velocity motion model.

Layout of the 13-float input vector::

    [0:2]   evader start location x_1
    [2]     t / T_max
    [3:8]   most recent detection: position (2), velocity (2), staleness
    [8:13]  second most recent detection, same layout

Staleness is (t - k) / T_max for a detection at timestep k. Missing
detections are padded with (x_1, zero velocity, t / T_max).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..ndgrad import ContractError

N_INPUT = 13
X_START = slice(0, 2)
T_NORM = 2
SLOT_STARTS = (3, 8)
VELOCITY_COLUMNS = (5, 6, 10, 11)


@dataclass(frozen=True)
class DetectionFeature:
    position: tuple[float, float]
    velocity: tuple[float, float]
    staleness: float


@dataclass(frozen=True)
class FilterInput:
    x_start: tuple[float, float]
    t_norm: float
    slots: tuple[DetectionFeature, DetectionFeature]

    def to_array(self) -> np.ndarray:
        out = [*self.x_start, self.t_norm]
        for s in self.slots:
            out += [*s.position, *s.velocity, s.staleness]
        return np.array(out, dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> FilterInput:
        a = np.asarray(a, dtype=np.float64)
        slots = tuple(
            DetectionFeature((a[i], a[i + 1]), (a[i + 2], a[i + 3]), a[i + 4]) for i in SLOT_STARTS
        )
        return cls((a[0], a[1]), a[2], slots)


def latest_two(detections: Sequence, t: int) -> list:
    """Most recent detections at distinct timesteps <= t, newest first.

    Several agents can detect the evader in the same step; those entries
    carry the same position and velocity, so one per timestep is kept.
    """
    picked = []
    for d in reversed(detections):
        if d.timestep > t:
            continue
        if picked and picked[-1].timestep == d.timestep:
            continue
        picked.append(d)
        if len(picked) == 2:
            break
    return picked


def build_filter_input(detections: Sequence, t: int, x_start, t_max: int) -> FilterInput:
    if t < 0:
        raise ContractError("t must be non-negative")
    x1 = (float(x_start[0]), float(x_start[1]))
    pad = DetectionFeature(x1, (0.0, 0.0), t / t_max)
    slots = [
        DetectionFeature(
            (float(d.position[0]), float(d.position[1])),
            (float(d.velocity[0]), float(d.velocity[1])),
            (t - d.timestep) / t_max,
        )
        for d in latest_two(detections, t)
    ]
    while len(slots) < 2:
        slots.append(pad)
    return FilterInput(x1, t / t_max, (slots[0], slots[1]))


def build_filter_array(detections: Sequence, t: int, x_start, t_max: int) -> np.ndarray:
    return build_filter_input(detections, t, x_start, t_max).to_array()


@dataclass(frozen=True)
class MotionState:
    position: tuple[float, float]
    velocity: tuple[float, float]
    timestep: int


def motion_extrapolate(m: MotionState, k: int) -> np.ndarray:
    """x_k = x_khat + (k - khat) * u_khat, clamped to the unit square."""
    if k < m.timestep:
        raise ContractError(f"cannot extrapolate backwards: k={k} < khat={m.timestep}")
    pos = np.asarray(m.position, dtype=np.float64) + (k - m.timestep) * np.asarray(m.velocity, dtype=np.float64)
    return np.clip(pos, 0.0, 1.0)


def extrapolate_inputs(X: np.ndarray, t_max: int) -> np.ndarray:
    """Batched motion_extrapolate from the newest detection slot of each row."""
    X = np.atleast_2d(X)
    s = SLOT_STARTS[0]
    # staleness * T_max is an integer step count up to rounding
    steps = np.rint(X[:, s + 4 : s + 5] * t_max)
    return np.clip(X[:, s : s + 2] + steps * X[:, s + 2 : s + 4], 0.0, 1.0)
