"""Batched trajectory-tracking environment: 50 Hz policy steps over a 250 Hz plant."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .. import dynamics
from ..aero import Environment
from ..control import (
    SUBSTEPS,
    FrameHistory,
    LowPassFilter,
    PDGains,
    action_scale,
    clamp_action,
    observation_frame,
)
from ..model import ModelArrays, RobotModel, SimState, build_default_model
from ..spatial import euler_to_quat, quat_to_matrix, rotate_inv
from ..trajectory import LOOKAHEAD_STEPS, POLICY_DT, Trajectory, generate, random_spec
from .randomization import RandomizationConfig, apply_randomization, sample_factors
from .reward import EpisodeConfig, RewardConfig, Termination, check_termination, compute_reward, mechanical_power


@dataclass(frozen=True)
class EnvConfig:
    num_envs: int = 16
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    randomization: RandomizationConfig = field(default_factory=RandomizationConfig.initial_state_only)
    gains: PDGains = field(default_factory=PDGains)
    aero: bool = True
    gravity: tuple = dynamics.GRAVITY
    serial: bool = False
    record_substeps: bool = False
    wind_m_s: tuple = (0.0, 0.0, 0.0)  # steady wind added to the sampled gusts

    @property
    def stage(self) -> int:
        return self.episode.stage

    def with_stage(self, stage: int) -> "EnvConfig":
        return dataclasses.replace(self, episode=dataclasses.replace(self.episode, stage=int(stage)))


def _initial_state(traj: Trajectory, pos_offset, vel_offset) -> SimState:
    p = traj.positions
    v0 = (p[1] - p[0]) / traj.dt if len(p) > 1 else np.zeros(3)
    heading = traj.headings[0] if traj.headings is not None else 0.0
    s = SimState.zeros()
    return s.replace(
        base_position=p[0] + pos_offset,
        base_orientation=euler_to_quat(np.array([0.0, 0.0, heading])),
        base_linear_velocity=v0 + vel_offset,
    )


class FlightEnv:
    """``num_envs`` independent episodes advanced in lock step with automatic reset.

    Each env owns a random generator spawned from the seed, so an env's
    episodes depend only on its own seed stream.  ``serial=True`` advances the
    plant one env at a time and produces the same numbers as the batched path.
    """

    def __init__(self, config: EnvConfig = EnvConfig(), seed: int = 0, model: RobotModel | None = None, trajectory_fn=None):
        self.config = config
        self.base_model = model or build_default_model()
        self.n = config.num_envs
        self.rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(self.n)]
        self.trajectory_fn = trajectory_fn
        self.gains = config.gains.arrays
        self.scale = action_scale(self.base_model)
        self.max_steps = config.episode.max_steps
        n_samples = self.max_steps + LOOKAHEAD_STEPS + 1
        self.targets = np.zeros((self.n, n_samples, 3))
        self.models: list[ModelArrays] = [self.base_model.arrays] * self.n
        self.wind = np.zeros((self.n, 3))
        self.state = SimState.zeros((self.n,))
        self.filter = LowPassFilter.zeros((self.n,))
        self.history = FrameHistory((self.n,))
        self.prev_action = np.zeros((self.n, 5))
        self.steps = np.zeros(self.n, dtype=int)
        self.episode_return = np.zeros(self.n)
        self._arrays = None

    # episode management ------------------------------------------------

    def _trajectory(self, i) -> Trajectory:
        if self.trajectory_fn is not None:
            return self.trajectory_fn(self.rngs[i], self.config.stage)
        spec = random_spec(self.rngs[i], self.config.stage, duration=self.config.episode.duration_s)
        return generate(spec, POLICY_DT)

    def _reset_env(self, i):
        rng = self.rngs[i]
        traj = self._trajectory(i)
        sample = sample_factors(self.config.randomization, rng)
        model = apply_randomization(self.base_model, sample)
        self.models[i] = model.arrays
        self.wind[i] = sample.wind + np.asarray(self.config.wind_m_s, dtype=float)
        p = traj.positions
        idx = np.minimum(np.arange(self.targets.shape[1]), len(p) - 1)
        self.targets[i] = p[idx]
        s0 = _initial_state(traj, sample.initial_position_offset, sample.initial_velocity_offset)
        self._set_state(i, s0)
        self.filter.state[i] = 0.0
        self.history.frames[i] = 0.0
        self.prev_action[i] = 0.0
        self.steps[i] = 0
        self.episode_return[i] = 0.0

    def _set_state(self, i, s: SimState):
        st = self.state
        for f in dataclasses.fields(SimState):
            arr = getattr(st, f.name)
            arr[i] = s.accel() if f.name == "prev_acceleration" else getattr(s, f.name)

    def _stack_models(self):
        self._arrays = ModelArrays.stack(self.models)

    def reset(self):
        self.state = SimState.zeros((self.n,))
        for i in range(self.n):
            self._reset_env(i)
        self._stack_models()
        return self._observe()

    # observation -----------------------------------------------------------

    def lookahead(self, idx=None):
        idx = np.arange(self.n) if idx is None else np.asarray(idx)
        k = np.minimum(self.steps[idx, None] + np.arange(1, LOOKAHEAD_STEPS + 1), self.targets.shape[1] - 1)
        world = self.targets[idx[:, None], k]
        rel = world - self.state.base_position[idx, None, :]
        R = quat_to_matrix(self.state.base_orientation[idx])
        return rotate_inv(R[:, None], rel)

    def _observe(self):
        self.history.push(observation_frame(self.state, self.wind, self.prev_action))
        look = self.lookahead()
        return np.concatenate([self.history.flat(), look.reshape(self.n, -1)], axis=-1)

    def current_target(self):
        return self.targets[np.arange(self.n), np.minimum(self.steps, self.targets.shape[1] - 1)]

    # dynamics ---------------------------------------------------------------

    def _plant(self, arrays, state, q_target, wind):
        kp, kd = self.gains
        env = Environment(wind_velocity=wind) if self.config.aero else None
        power = 0.0
        trace = []
        for _ in range(SUBSTEPS):
            with np.errstate(all="ignore"):
                state, tau = dynamics.pd_step(arrays, state, q_target, kp, kd, env, gravity=self.config.gravity, check=False)
                power = power + mechanical_power(tau, state.joint_velocities)
            if self.config.record_substeps:
                trace.append(np.stack([state.joint_positions, state.joint_velocities, tau], axis=-2))
        self._trace = trace
        return state, power / SUBSTEPS

    def _advance(self, q_target):
        if not self.config.serial:
            return self._plant(self._arrays, self.state, q_target, self.wind)
        outs, traces = [], []
        for i in range(self.n):
            outs.append(self._plant(self.models[i], self.state.index(i), q_target[i], self.wind[i]))
            traces.append(self._trace)
        if self.config.record_substeps:
            self._trace = [np.stack([t[k] for t in traces]) for k in range(SUBSTEPS)]
        return SimState.stack([o[0] for o in outs]), np.array([o[1] for o in outs])

    def step(self, actions):
        """Apply one policy action per env; returns ``(obs, reward, done, info)``.

        Finished envs are reset before returning; ``info["terminal_obs"]``
        holds the observation of the final state (used to bootstrap timeouts).
        """
        a = clamp_action(actions)
        y = self.filter(a)
        q_target = y * self.scale
        state, power = self._advance(q_target)
        self.state = state
        self.prev_action = a
        self.steps = self.steps + 1
        target = self.current_target()
        with np.errstate(all="ignore"):
            rb = compute_reward(state, target, power, self.config.reward)
        code = check_termination(state, target, self.steps, self.config.episode)
        nonfinite = code == Termination.NONFINITE
        reward = np.where(nonfinite, 0.0, rb.total)
        self.episode_return += reward
        done = code != Termination.CONTINUE
        if np.any(nonfinite):
            # keep observations finite; the episode ends anyway
            for i in np.flatnonzero(nonfinite):
                self._set_state(i, SimState.zeros().replace(base_position=target[i]))
        obs = self._observe()
        info = {
            "state": state.copy(),
            "target": target,
            "q_target": q_target,
            "reason": code,
            "truncated": code == Termination.TIMEOUT,
            "terminal_obs": obs.copy(),
            "reward_terms": rb,
            "power": power,
            "episode_return": np.where(done, self.episode_return, np.nan),
            "episode_length": np.where(done, self.steps, 0),
        }
        if self.config.record_substeps:
            # (n, SUBSTEPS, 3, 5): joint positions, velocities and torques
            info["substeps"] = np.stack(self._trace, axis=1)
        if np.any(done):
            for i in np.flatnonzero(done):
                self._reset_env(i)
                self.history.push_one(i, observation_frame(self.state.index(i), self.wind[i], self.prev_action[i]))
            self._stack_models()
            obs = obs.copy()
            look = self.lookahead(np.flatnonzero(done))
            obs[done] = np.concatenate([self.history.flat()[done], look.reshape(len(look), -1)], axis=-1)
        return obs, reward, done, info

