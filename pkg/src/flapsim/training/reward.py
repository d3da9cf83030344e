"""Tracking reward and episode termination."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from ..model import SimState
from ..spatial import quat_to_euler

REWARD_WEIGHTS = (0.5, 0.1, 0.2, 0.05)


@dataclass(frozen=True)
class RewardConfig:
    sigma_position_m: float = 1.0
    sigma_rate_rad_s: float = 3.0
    sigma_angle_rad: float = 0.5
    sigma_power_w: float = 5.0
    weights: tuple = REWARD_WEIGHTS


@dataclass
class RewardBreakdown:
    r_pos: np.ndarray
    r_rates: np.ndarray
    r_level: np.ndarray
    r_energy: np.ndarray
    total: np.ndarray

    def as_dict(self):
        return {k: getattr(self, k) for k in ("r_pos", "r_rates", "r_level", "r_energy", "total")}


def combine(r_pos, r_rates, r_level, r_energy, weights=REWARD_WEIGHTS):
    w = weights
    return w[0] * r_pos + w[1] * r_rates + w[2] * r_level + w[3] * r_energy


def mechanical_power(joint_torques, joint_velocities):
    return np.sum(np.abs(np.asarray(joint_torques) * np.asarray(joint_velocities)), axis=-1)


def compute_reward(state: SimState, target_position, power=0.0, config: RewardConfig = RewardConfig()) -> RewardBreakdown:
    """Exponential-kernel tracking reward; ``power`` is the mean joint power in W."""
    err = state.base_position - np.asarray(target_position, dtype=float)
    r_pos = np.exp(-np.sum(err**2, axis=-1) / config.sigma_position_m**2)
    r_rates = np.exp(-np.sum(state.base_angular_velocity**2, axis=-1) / config.sigma_rate_rad_s**2)
    eul = quat_to_euler(state.base_orientation)
    r_level = np.exp(-(eul[..., 0] ** 2 + eul[..., 1] ** 2) / config.sigma_angle_rad**2)
    r_energy = np.exp(-np.asarray(power, dtype=float) / config.sigma_power_w)
    r_energy = np.broadcast_to(r_energy, r_pos.shape)
    total = combine(r_pos, r_rates, r_level, r_energy, config.weights)
    return RewardBreakdown(r_pos, r_rates, r_level, r_energy, total)


class Termination(IntEnum):
    CONTINUE = 0
    POSITION = 1
    ORIENTATION = 2
    TIMEOUT = 3
    NONFINITE = 4

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class EpisodeConfig:
    duration_s: float = 30.0
    control_rate_hz: float = 50.0
    position_limit_m: float = 3.0
    orientation_limit_rad: float = np.pi / 2
    stage: int = 1

    @property
    def max_steps(self) -> int:
        return int(round(self.duration_s * self.control_rate_hz))

    @property
    def orientation_check(self) -> bool:
        return self.stage <= 2


def check_termination(state: SimState, target_position, step, config: EpisodeConfig = EpisodeConfig()):
    """Per-env termination codes (``Termination`` values); the first matching reason wins."""
    pos = state.base_position
    finite = np.all(np.isfinite(np.concatenate([pos, state.base_orientation, state.velocity], axis=-1)), axis=-1)
    with np.errstate(invalid="ignore"):
        err = np.linalg.norm(pos - np.asarray(target_position, dtype=float), axis=-1)
        code = np.where(finite, Termination.CONTINUE, Termination.NONFINITE)
        code = np.where((code == 0) & (err > config.position_limit_m), Termination.POSITION, code)
        if config.orientation_check:
            eul = quat_to_euler(state.base_orientation)
            tilted = (np.abs(eul[..., 0]) > config.orientation_limit_rad) | (np.abs(eul[..., 1]) > config.orientation_limit_rad)
            code = np.where((code == 0) & tilted, Termination.ORIENTATION, code)
    code = np.where((code == 0) & (np.asarray(step) >= config.max_steps), Termination.TIMEOUT, code)
    return code.astype(int)
