"""Realizing discrete driver actions as sampled accelerations, and back.

Each of the five acceleration actions draws from its own continuous
distribution (fitted to observed highway accelerations); the two lane-change
actions realize zero acceleration.  ``classify_acceleration`` is the inverse
map used when labelling recorded driver behaviour.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import Action


@dataclass
class AccelerationModel:
    """Distribution parameters for the acceleration actions (m/s^2).

    hard (de)acceleration draws ``hard_mu - |N(0, hard_sigma)|`` (mirrored
    for deceleration), clamped at the edge of the plain-acceleration range,
    so its mass sits just inside +-hard_mu and stays disjoint from the
    uniform regions.
    """

    maintain_sigma: float = 0.0075
    accel_lo: float = 0.5
    accel_hi: float = 2.5
    hard_mu: float = 3.5
    hard_sigma: float = 0.3
    # classification thresholds sit on the sampling-support boundaries so
    # labelling a sampled acceleration always recovers the action
    classify_lo: float = 0.5   # |a| below this is "maintain"
    classify_hi: float = 2.5   # |a| at or above this is "hard"


def sample_acceleration(
    kind: Action, rng: np.random.Generator, model: AccelerationModel | None = None
) -> float:
    """Draw a realized acceleration for one action; lane changes return 0."""
    m = model or AccelerationModel()
    if kind == Action.MAINTAIN:
        return float(rng.normal(0.0, m.maintain_sigma))
    if kind == Action.ACCELERATE:
        return float(rng.uniform(m.accel_lo, m.accel_hi))
    if kind == Action.DECELERATE:
        return float(rng.uniform(-m.accel_hi, -m.accel_lo))
    if kind == Action.HARD_ACCELERATE:
        return max(m.accel_hi, m.hard_mu - abs(float(rng.normal(0.0, m.hard_sigma))))
    if kind == Action.HARD_DECELERATE:
        return -max(m.accel_hi, m.hard_mu - abs(float(rng.normal(0.0, m.hard_sigma))))
    return 0.0  # MOVE_LEFT / MOVE_RIGHT


def classify_acceleration(
    a: float, lane_change: str = "none", model: AccelerationModel | None = None
) -> Action:
    """Label a continuous acceleration (and optional lane change) as an action.

    A lane change dominates any acceleration.  With default thresholds:
    |a| < 0.5 maintain, up to 2.5 (de)accelerate, at or beyond 2.5 hard.
    """
    if lane_change == "left":
        return Action.MOVE_LEFT
    if lane_change == "right":
        return Action.MOVE_RIGHT
    if lane_change != "none":
        raise ValueError(f"unknown lane_change: {lane_change!r}")
    m = model or AccelerationModel()
    if abs(a) < m.classify_lo:
        return Action.MAINTAIN
    if a >= m.classify_hi:
        return Action.HARD_ACCELERATE
    if a <= -m.classify_hi:
        return Action.HARD_DECELERATE
    return Action.ACCELERATE if a > 0 else Action.DECELERATE
