"""Single-episode rollouts with full logging."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from ..model import RobotModel
from ..trajectory import POLICY_DT, Trajectory
from .env import EnvConfig, FlightEnv
from .randomization import RandomizationConfig
from .reward import EpisodeConfig, Termination

LOG_SCHEMA_VERSION = 1


def zero_policy(obs):
    return np.zeros(obs.shape[:-1] + (5,))


def as_policy_fn(policy, deterministic=True):
    """Wrap an ``Agent``, an (ActorCritic, RunningNorm) pair or a callable as ``obs -> action``."""
    from .ppo import Agent

    if isinstance(policy, Agent):
        agent = policy
    elif isinstance(policy, tuple):
        agent = Agent(*policy)
    elif callable(policy) and not hasattr(policy, "parameters"):
        return policy
    else:
        agent = Agent(policy, None)
    return lambda obs: agent.act(obs, deterministic=deterministic)[0]


@dataclass
class EpisodeLog:
    times: np.ndarray  # (T,) time after each policy step
    observations: np.ndarray  # (T, obs) observation the action was computed from
    actions: np.ndarray  # (T, 5) raw clamped actions
    joint_targets: np.ndarray  # (T, 5)
    rewards: dict  # term name -> (T,)
    positions: np.ndarray  # (T, 3)
    orientations: np.ndarray  # (T, 4)
    linear_velocities: np.ndarray
    angular_velocities: np.ndarray
    joint_positions: np.ndarray
    joint_velocities: np.ndarray
    targets: np.ndarray  # (T, 3)
    reason: str
    seed: int
    substeps: np.ndarray | None = None  # (T*5, 3, 5) joint q, qd, tau at the plant rate
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    @property
    def steps(self) -> int:
        return len(self.times)

    @property
    def duration(self) -> float:
        return float(self.times[-1]) if len(self.times) else 0.0

    def tracking_error(self):
        return np.linalg.norm(self.positions - self.targets, axis=-1)

    def to_csv(self, path) -> None:
        """Per-policy-step CSV with a schema header (SI units in column names)."""
        cols = (
            ["t_s"]
            + [f"{a}_m" for a in ("x", "y", "z")]
            + [f"target_{a}_m" for a in ("x", "y", "z")]
            + [f"quat_{c}" for c in "wxyz"]
            + [f"v{a}_m_s" for a in ("x", "y", "z")]
            + [f"{a}_rad_s" for a in ("p", "q", "r")]
            + [f"q{j + 1}_rad" for j in range(5)]
            + [f"qd{j + 1}_rad_s" for j in range(5)]
            + [f"action{j + 1}" for j in range(5)]
            + [f"q{j + 1}_target_rad" for j in range(5)]
            + ["r_pos", "r_rates", "r_level", "r_energy", "reward"]
        )
        data = np.column_stack(
            [
                self.times,
                self.positions,
                self.targets,
                self.orientations,
                self.linear_velocities,
                self.angular_velocities,
                self.joint_positions,
                self.joint_velocities,
                self.actions,
                self.joint_targets,
                *(self.rewards[k] for k in ("r_pos", "r_rates", "r_level", "r_energy", "total")),
            ]
        )
        with open(path, "w", newline="") as fh:
            fh.write(f"# schema_version: {LOG_SCHEMA_VERSION}; seed: {self.seed}; termination: {self.reason}\n")
            w = csv.writer(fh)
            w.writerow(cols)
            for row in data:
                w.writerow([repr(float(x)) for x in row])

    def save_npz(self, path) -> None:
        arrays = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if isinstance(getattr(self, f.name), np.ndarray)}
        arrays.update({f"reward_{k}": v for k, v in self.rewards.items()})
        np.savez_compressed(
            path, schema_version=LOG_SCHEMA_VERSION, reason=self.reason, seed=self.seed, **arrays
        )

    @classmethod
    def load_npz(cls, path) -> "EpisodeLog":
        with np.load(path, allow_pickle=False) as d:
            rewards = {k[len("reward_") :]: d[k] for k in d.files if k.startswith("reward_")}
            kw = {f.name: d[f.name] for f in dataclasses.fields(cls) if f.name in d.files and f.name not in ("reason", "seed")}
            return cls(**kw, rewards=rewards, reason=str(d["reason"]), seed=int(d["seed"]))


def run_episode(
    policy,
    model: RobotModel | None = None,
    trajectory: Trajectory | None = None,
    episode_config: EpisodeConfig = EpisodeConfig(),
    seed: int = 0,
    randomization: RandomizationConfig | None = None,
    aero: bool = True,
    record_substeps: bool = False,
    deterministic: bool = True,
    max_steps: int | None = None,
    env_config: EnvConfig | None = None,
) -> EpisodeLog:
    """Run one episode (1 policy step per 5 plant steps) until termination."""
    act = as_policy_fn(policy, deterministic)
    base = env_config or EnvConfig()
    cfg = dataclasses.replace(
        base,
        num_envs=1,
        episode=episode_config,
        randomization=randomization if randomization is not None else base.randomization,
        aero=aero,
        record_substeps=record_substeps,
    )
    traj_fn = None if trajectory is None else (lambda rng, stage: trajectory)
    env = FlightEnv(cfg, seed=seed, model=model, trajectory_fn=traj_fn)
    obs = env.reset()
    rec = {k: [] for k in ("obs", "act", "qt", "state", "target", "sub")}
    rewards = {k: [] for k in ("r_pos", "r_rates", "r_level", "r_energy", "total")}
    reason = Termination.CONTINUE
    limit = max_steps if max_steps is not None else env.max_steps
    for _ in range(limit):
        a = np.clip(np.asarray(act(obs), dtype=float), -1.0, 1.0)
        rec["obs"].append(obs[0])
        obs, r, done, info = env.step(a)
        rec["act"].append(a[0])
        rec["qt"].append(info["q_target"][0])
        rec["state"].append(info["state"].index(0))
        rec["target"].append(info["target"][0])
        if record_substeps:
            rec["sub"].append(info["substeps"][0])
        rb = info["reward_terms"]
        for k in rewards:
            rewards[k].append(float(np.asarray(getattr(rb, k))[0]))
        if done[0]:
            reason = Termination(int(info["reason"][0]))
            break
    states = rec["state"]
    n = len(states)
    return EpisodeLog(
        times=np.arange(1, n + 1) * POLICY_DT,
        observations=np.asarray(rec["obs"]),
        actions=np.asarray(rec["act"]),
        joint_targets=np.asarray(rec["qt"]),
        rewards={k: np.asarray(v) for k, v in rewards.items()},
        positions=np.array([s.base_position for s in states]),
        orientations=np.array([s.base_orientation for s in states]),
        linear_velocities=np.array([s.base_linear_velocity for s in states]),
        angular_velocities=np.array([s.base_angular_velocity for s in states]),
        joint_positions=np.array([s.joint_positions for s in states]),
        joint_velocities=np.array([s.joint_velocities for s in states]),
        targets=np.asarray(rec["target"]),
        reason=reason.label,
        seed=int(seed),
        substeps=np.concatenate(rec["sub"]) if record_substeps and rec["sub"] else None,
    )


def survival_time(log: EpisodeLog) -> float:
    return log.duration
