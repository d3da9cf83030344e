"""Closed-loop experiments: excitation runs for identification and robustness sweeps."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from ..model import RobotModel, build_default_model
from ..trajectory import CRUISE_SPEED, POLICY_DT, Trajectory, forward_flight, generate
from ..training.env import EnvConfig
from ..training.randomization import RandomizationConfig, apply_randomization, sample_factors
from ..training.reward import EpisodeConfig
from ..training.rollout import as_policy_fn, run_episode

log = logging.getLogger(__name__)

SUCCESS_RADIUS = 3.0


@dataclass(frozen=True)
class ExcitationSpec:
    """Sum of sinusoids added to a straight forward-flight command."""

    duration_s: float = 60.0
    amplitude_m: float = 1.0
    min_frequency_hz: float = 0.05
    max_frequency_hz: float = 2.0
    components: int = 8
    axes: tuple = (0, 1, 2)
    ramp_s: float = 2.0
    forward_speed_m_s: float = CRUISE_SPEED
    seed: int = 0
    max_attempts: int = 5

    def offsets(self, times, rng) -> np.ndarray:
        """(N, 3) position offsets; each excited axis peaks at ``amplitude_m``."""
        freqs = np.geomspace(self.min_frequency_hz, self.max_frequency_hz, self.components)
        out = np.zeros((len(times), 3))
        ramp = np.clip(times / self.ramp_s, 0.0, 1.0) if self.ramp_s > 0 else np.ones_like(times)
        ramp = ramp * ramp * (3 - 2 * ramp)
        for ax in self.axes:
            ph = rng.uniform(0, 2 * np.pi, self.components)
            sig = np.sin(2 * np.pi * freqs[None, :] * times[:, None] + ph).sum(axis=1)
            peak = np.max(np.abs(sig))
            out[:, ax] = ramp * sig * (self.amplitude_m / peak if peak > 0 else 0.0)
        return out


@dataclass
class IOPairs:
    """Synchronized commanded (u) and measured (y) positions as deviations from the nominal path."""

    times: np.ndarray
    u: np.ndarray  # (N, 3)
    y: np.ndarray  # (N, 3)
    sample_rate: float
    seed: int
    discarded: list = field(default_factory=list)  # (seed, reason, duration_s)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# schema_version: 1; seed: {self.seed}; sample_rate_hz: {self.sample_rate}\n")
            w = csv.writer(fh)
            w.writerow(["t_s", "u_x_m", "u_y_m", "u_z_m", "y_x_m", "y_y_m", "y_z_m"])
            for row in np.column_stack([self.times, self.u, self.y]):
                w.writerow([repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path) -> "IOPairs":
        with open(path) as fh:
            header = fh.readline()
        meta = dict(part.strip().split(": ") for part in header.lstrip("# ").split(";"))
        data = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
        return cls(data[:, 0], data[:, 1:4], data[:, 4:7], float(meta["sample_rate_hz"]), int(meta["seed"]))


def excitation_trajectory(spec: ExcitationSpec, rng) -> tuple[Trajectory, np.ndarray]:
    """Excited trajectory and the nominal path it deviates from."""
    nominal = generate(forward_flight(spec.forward_speed_m_s, spec.duration_s), POLICY_DT)
    offsets = spec.offsets(nominal.times, rng)
    return Trajectory(nominal.times, nominal.positions + offsets, POLICY_DT, nominal.headings), nominal.positions


def collect_io_pairs(policy, model: RobotModel | None = None, spec: ExcitationSpec = ExcitationSpec(), randomization=None) -> IOPairs:
    """Fly the excited trajectory and return (u, y) at the policy rate.

    An episode that terminates early is discarded and logged; the next seed is
    tried up to ``spec.max_attempts`` times before giving up.
    """
    act = as_policy_fn(policy)
    randomization = randomization or RandomizationConfig.none()
    episode = EpisodeConfig(duration_s=spec.duration_s, stage=1)
    discarded = []
    for attempt in range(spec.max_attempts):
        seed = spec.seed + attempt
        traj, nominal = excitation_trajectory(spec, np.random.default_rng(seed))
        ep = run_episode(act, model, traj, episode, seed=seed, randomization=randomization)
        if ep.reason != "timeout":
            log.warning("excitation episode seed %d ended by %s after %.2f s; discarded", seed, ep.reason, ep.duration)
            discarded.append((seed, ep.reason, ep.duration))
            continue
        n = ep.steps
        # state after step k is compared with the command that was active during it
        u = ep.targets - nominal[1 : n + 1]
        y = ep.positions - nominal[1 : n + 1]
        return IOPairs(ep.times, u, y, 1.0 / POLICY_DT, seed, discarded)
    raise RuntimeError(f"all {spec.max_attempts} excitation episodes terminated early: {discarded}")


@dataclass(frozen=True)
class SweepPoint:
    label: str
    coefficient_scale: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)  # blunt, slender, angular, Kutta, Magnus
    wind_m_s: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SweepSpec:
    points: tuple = (SweepPoint("nominal"),)
    episodes: int = 100
    duration_s: float = 30.0
    success_radius_m: float = SUCCESS_RADIUS
    seed: int = 0
    initial_state: RandomizationConfig = field(default_factory=RandomizationConfig.initial_state_only)

    @staticmethod
    def coefficient_sweep(index: int, factors, **kw) -> "SweepSpec":
        pts = []
        for f in factors:
            s = [1.0] * 5
            s[index] = float(f)
            pts.append(SweepPoint(f"c{index}x{f:g}", tuple(s)))
        return SweepSpec(points=tuple(pts), **kw)


SWEEP_COLUMNS = ("label", "blunt_scale", "slender_scale", "angular_scale", "kutta_scale", "magnus_scale", "wind_x_m_s", "wind_y_m_s", "wind_z_m_s", "episodes", "successes", "success_rate")


def success_sweep(policy, spec: SweepSpec = SweepSpec(), model: RobotModel | None = None) -> list[dict]:
    """Fraction of episodes ending within ``success_radius_m`` of the final target, per sweep point.

    Episode ``k`` of every point uses seed ``spec.seed + k`` so points differ
    only in the swept parameter.
    """
    if spec.episodes <= 0:
        return []
    act = as_policy_fn(policy)
    base = model or build_default_model()
    traj = generate(forward_flight(duration=spec.duration_s), POLICY_DT)
    episode = EpisodeConfig(duration_s=spec.duration_s, position_limit_m=spec.success_radius_m, stage=1)
    identity = sample_factors(RandomizationConfig.none(), np.random.default_rng(0))
    rows = []
    for pt in spec.points:
        sample = dataclasses.replace(identity, aero_coefficient_scale=np.asarray(pt.coefficient_scale, dtype=float))
        m = apply_randomization(base, sample)
        env_config = EnvConfig(wind_m_s=tuple(map(float, pt.wind_m_s)))
        wins = 0
        for k in range(spec.episodes):
            ep = run_episode(act, m, traj, episode, seed=spec.seed + k, randomization=spec.initial_state, env_config=env_config)
            final = np.linalg.norm(ep.positions[-1] - traj.positions[-1])
            wins += int(ep.reason == "timeout" and final <= spec.success_radius_m)
        rows.append(
            dict(
                zip(
                    SWEEP_COLUMNS,
                    (pt.label, *map(float, pt.coefficient_scale), *map(float, pt.wind_m_s), spec.episodes, wins, wins / spec.episodes),
                )
            )
        )
    return rows


def write_table(rows: list[dict], path, columns=SWEEP_COLUMNS, meta: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if meta:
            fh.write("# " + "; ".join(f"{k}: {v}" for k, v in meta.items()) + "\n")
        w = csv.DictWriter(fh, fieldnames=list(columns))
        w.writeheader()
        for r in rows:
            w.writerow(r)
