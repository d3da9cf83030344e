"""Clipped-surrogate PPO with GAE and a staged curriculum."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..control import ActorCritic, RunningNorm, build_policy, config_hash, save_checkpoint
from .env import EnvConfig, FlightEnv
from .randomization import RandomizationConfig
from .reward import Termination

log = logging.getLogger(__name__)

RANDOMIZATION_STAGE = 4


@dataclass(frozen=True)
class PPOConfig:
    total_steps: int = 500_000
    rollout_steps: int = 64
    epochs: int = 5
    minibatches: int = 4
    learning_rate: float = 3e-4
    clip: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    desired_kl: float | None = 0.01  # adaptive step size; None keeps learning_rate fixed
    normalize_advantages: bool = True
    normalize_observations: bool = True
    hidden: tuple = (256, 256)
    init_log_std: float = -0.5
    stages: tuple = (1,)
    stage_threshold: float = 0.7
    stage_window: int = 50
    seed: int = 0

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PPOConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


class TrainingDiverged(FloatingPointError):
    pass


# losses -------------------------------------------------------------------


def gaussian_log_prob(mean, std, actions):
    var = std * std
    return torch.sum(-((actions - mean) ** 2) / (2 * var) - torch.log(std) - 0.5 * math.log(2 * math.pi), dim=-1)


def clipped_surrogate(policy: ActorCritic, obs, actions, old_log_prob, advantages, clip: float):
    """Negative clipped surrogate objective (to be minimized)."""
    mean, std, _ = policy(obs)
    ratio = torch.exp(gaussian_log_prob(mean, std, actions) - old_log_prob)
    unclipped = ratio * advantages
    clipped = torch.clamp(ratio, 1.0 - clip, 1.0 + clip) * advantages
    return -torch.mean(torch.minimum(unclipped, clipped))


def ppo_loss(policy: ActorCritic, batch: dict, cfg: PPOConfig):
    mean, std, value = policy(batch["obs"])
    logp = gaussian_log_prob(mean, std, batch["actions"])
    ratio = torch.exp(logp - batch["log_prob"])
    adv = batch["advantages"]
    surrogate = -torch.mean(torch.minimum(ratio * adv, torch.clamp(ratio, 1 - cfg.clip, 1 + cfg.clip) * adv))
    value_loss = 0.5 * torch.mean((value - batch["returns"]) ** 2)
    entropy = torch.sum(torch.log(std) + 0.5 * (1.0 + math.log(2 * math.pi)), dim=-1).mean()
    loss = surrogate + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    with torch.no_grad():
        approx_kl = torch.mean((ratio - 1) - torch.log(ratio))
        clip_frac = torch.mean((torch.abs(ratio - 1) > cfg.clip).double())
    return loss, {
        "surrogate": surrogate.item(),
        "value_loss": value_loss.item(),
        "entropy": entropy.item(),
        "approx_kl": float(approx_kl),
        "clip_fraction": float(clip_frac),
    }


def compute_gae(rewards, values, next_values, terminated, done, gamma, lam):
    """Advantages and returns for (T, N) arrays.

    ``next_values`` is V(s_{t+1}) of the state reached at step t (the terminal
    observation for finished episodes); ``terminated`` zeroes the bootstrap
    and ``done`` cuts the recursion at episode boundaries.
    """
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1])
    for t in reversed(range(T)):
        delta = rewards[t] + gamma * next_values[t] * (1.0 - terminated[t]) - values[t]
        last = delta + gamma * lam * (1.0 - done[t]) * last
        adv[t] = last
    return adv, adv + values


# rollout ------------------------------------------------------------------


@dataclass
class Rollout:
    obs: np.ndarray
    actions: np.ndarray
    log_prob: np.ndarray
    values: np.ndarray
    next_values: np.ndarray
    rewards: np.ndarray
    terminated: np.ndarray
    done: np.ndarray
    episodes: list = field(default_factory=list)  # (return, length, reason)
    reward_terms: dict = field(default_factory=dict)


class Agent:
    """Policy plus observation normalizer; samples actions with a numpy generator."""

    def __init__(self, policy: ActorCritic, norm: RunningNorm | None, seed: int = 0):
        self.policy = policy
        self.norm = norm
        self.rng = np.random.default_rng(seed)

    def _prep(self, obs):
        x = self.norm.normalize(obs) if self.norm is not None else np.asarray(obs, dtype=float)
        return torch.from_numpy(x)

    @torch.no_grad()
    def evaluate(self, obs):
        mean, std, value = self.policy(self._prep(obs))
        return mean.numpy(), std.numpy(), value.numpy()

    def act(self, obs, deterministic=False):
        mean, std, value = self.evaluate(obs)
        if deterministic:
            return mean, value, np.zeros(mean.shape[0])
        action = mean + std * self.rng.standard_normal(mean.shape)
        logp = np.sum(-((action - mean) ** 2) / (2 * std**2) - np.log(std) - 0.5 * math.log(2 * math.pi), axis=-1)
        return action, value, logp


def collect_rollout(env: FlightEnv, agent: Agent, obs, steps: int):
    n = env.n
    buf = {k: [] for k in ("obs", "actions", "log_prob", "values", "next_values", "rewards", "terminated", "done")}
    episodes = []
    terms = {k: 0.0 for k in ("r_pos", "r_rates", "r_level", "r_energy")}
    for _ in range(steps):
        action, value, logp = agent.act(obs)
        nobs, reward, done, info = env.step(action)
        term = done & ~info["truncated"]
        _, _, next_value = agent.evaluate(info["terminal_obs"])
        buf["obs"].append(obs)
        buf["actions"].append(action)
        buf["log_prob"].append(logp)
        buf["values"].append(value)
        buf["next_values"].append(next_value)
        buf["rewards"].append(reward)
        buf["terminated"].append(term.astype(float))
        buf["done"].append(done.astype(float))
        rt = info["reward_terms"]
        for k in terms:
            terms[k] += float(np.mean(getattr(rt, k))) / steps
        for i in np.flatnonzero(done):
            episodes.append((float(info["episode_return"][i]), int(info["episode_length"][i]), Termination(int(info["reason"][i])).label))
        obs = nobs
    arrays = {k: np.asarray(v) for k, v in buf.items()}
    return Rollout(**arrays, episodes=episodes, reward_terms=terms), obs


def ppo_update(policy: ActorCritic, optimizer, rollout: Rollout, norm: RunningNorm | None, cfg: PPOConfig, rng: np.random.Generator):
    """Run the PPO epochs on one rollout; returns averaged loss statistics."""
    adv, ret = compute_gae(rollout.rewards, rollout.values, rollout.next_values, rollout.terminated, rollout.done, cfg.gamma, cfg.gae_lambda)
    obs = rollout.obs.reshape(-1, rollout.obs.shape[-1])
    if norm is not None:
        obs = norm.normalize(obs)
    batch = {
        "obs": torch.from_numpy(obs),
        "actions": torch.from_numpy(rollout.actions.reshape(-1, rollout.actions.shape[-1])),
        "log_prob": torch.from_numpy(rollout.log_prob.reshape(-1)),
        "advantages": torch.from_numpy(adv.reshape(-1)),
        "returns": torch.from_numpy(ret.reshape(-1)),
    }
    n = batch["obs"].shape[0]
    size = max(1, n // cfg.minibatches)
    stats = Counter()
    count = 0
    for _ in range(cfg.epochs):
        perm = torch.from_numpy(rng.permutation(n))
        for start in range(0, n - size + 1, size):
            idx = perm[start : start + size]
            mb = {k: v[idx] for k, v in batch.items()}
            if cfg.normalize_advantages:
                a = mb["advantages"]
                mb["advantages"] = (a - a.mean()) / (a.std() + 1e-8)
            loss, info = ppo_loss(policy, mb, cfg)
            if not torch.isfinite(loss):
                raise TrainingDiverged("non-finite PPO loss")
            optimizer.zero_grad()
            loss.backward()
            if cfg.max_grad_norm:
                torch.nn.utils.clip_grad_norm_(policy.parameters(), cfg.max_grad_norm)
            optimizer.step()
            if cfg.desired_kl:
                _adapt_lr(optimizer, info["approx_kl"], cfg.desired_kl)
            info["learning_rate"] = optimizer.param_groups[0]["lr"]
            stats.update(info)
            count += 1
    return {k: v / max(count, 1) for k, v in stats.items()}


def _adapt_lr(optimizer, kl, target, lo=1e-5, hi=1e-2):
    lr = optimizer.param_groups[0]["lr"]
    if kl > 2.0 * target:
        lr = max(lr / 1.5, lo)
    elif kl < 0.5 * target:
        lr = min(lr * 1.5, hi)
    for g in optimizer.param_groups:
        g["lr"] = lr


# curriculum ---------------------------------------------------------------


def stage_env_config(base: EnvConfig, stage: int) -> EnvConfig:
    """Stages 1-3 track progressively harder paths; stage 4 adds full randomization."""
    cfg = base.with_stage(stage)
    if stage >= RANDOMIZATION_STAGE:
        cfg = dataclasses.replace(cfg, randomization=RandomizationConfig())
    return cfg


@dataclass
class TrainResult:
    policy: ActorCritic
    norm: RunningNorm | None
    metrics: list
    run_dir: Path | None = None


def train(
    env_config: EnvConfig = EnvConfig(),
    cfg: PPOConfig = PPOConfig(),
    run_dir=None,
    policy: ActorCritic | None = None,
    model=None,
    progress=None,
) -> TrainResult:
    """Train through ``cfg.stages``; writes metrics and checkpoints when ``run_dir`` is set."""
    torch.manual_seed(cfg.seed)
    policy = policy or build_policy(cfg.seed, cfg.hidden, cfg.init_log_std)
    norm = RunningNorm(policy.obs_size) if cfg.normalize_observations else None
    optimizer = torch.optim.Adam(policy.parameters(), lr=cfg.learning_rate)
    agent = Agent(policy, norm, seed=cfg.seed + 1)
    update_rng = np.random.default_rng(cfg.seed + 2)
    run_dir = Path(run_dir) if run_dir is not None else None
    meta = {"ppo": cfg.to_dict(), "env": _env_summary(env_config)}
    meta["config_hash"] = config_hash(meta)
    metrics_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "checkpoints").mkdir(exist_ok=True)
        with open(run_dir / "run_meta.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
        metrics_fh = open(run_dir / "metrics.jsonl", "w")

    metrics = []
    steps = 0
    stage_idx = 0
    stage = cfg.stages[0]
    env = FlightEnv(stage_env_config(env_config, stage), seed=cfg.seed * 1000 + stage, model=model)
    obs = env.reset()
    recent = deque(maxlen=cfg.stage_window)
    stage_max = 0.85 * env.max_steps
    per_update = env.n * cfg.rollout_steps
    n_updates = max(1, cfg.total_steps // per_update)
    try:
        for update in range(n_updates):
            t0 = time.perf_counter()
            roll, obs = collect_rollout(env, agent, obs, cfg.rollout_steps)
            losses = ppo_update(policy, optimizer, roll, norm, cfg, update_rng)
            if norm is not None:
                # refreshed only between updates so old log-probs stay consistent
                norm.update(roll.obs.reshape(-1, roll.obs.shape[-1]))
            steps += per_update
            for ep in roll.episodes:
                recent.append(ep[0])
            rets = [e[0] for e in roll.episodes]
            lens = [e[1] for e in roll.episodes]
            row = {
                "update": update,
                "steps": steps,
                "stage": stage,
                "episodes": len(roll.episodes),
                "mean_return": float(np.mean(rets)) if rets else None,
                "mean_length": float(np.mean(lens)) if lens else None,
                "mean_step_reward": float(np.mean(roll.rewards)),
                "terminations": dict(Counter(e[2] for e in roll.episodes)),
                "action_std": float(torch.exp(policy.log_std.detach()).mean()),
                "seconds": time.perf_counter() - t0,
                **{f"mean_{k}": v for k, v in roll.reward_terms.items()},
                **losses,
            }
            metrics.append(row)
            if metrics_fh is not None:
                # wall time stays out of the file so reruns compare equal
                metrics_fh.write(json.dumps({k: v for k, v in row.items() if k != "seconds"}, sort_keys=True) + "\n")
                metrics_fh.flush()
            if progress is not None:
                progress(row)
            advance = len(recent) == recent.maxlen and np.mean(recent) > cfg.stage_threshold * stage_max
            if advance and stage_idx + 1 < len(cfg.stages):
                if run_dir is not None:
                    save_checkpoint(run_dir / "checkpoints" / f"stage{stage}.npz", policy, norm, meta, {"steps": steps, "stage": stage})
                stage_idx += 1
                stage = cfg.stages[stage_idx]
                log.info("advancing to stage %d after %d steps", stage, steps)
                env = FlightEnv(stage_env_config(env_config, stage), seed=cfg.seed * 1000 + stage, model=model)
                obs = env.reset()
                recent.clear()
    except TrainingDiverged:
        if run_dir is not None:
            save_checkpoint(run_dir / "checkpoints" / "diverged.npz", policy, norm, meta, {"steps": steps, "stage": stage})
        raise
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if run_dir is not None:
        save_checkpoint(run_dir / "checkpoints" / f"stage{stage}.npz", policy, norm, meta, {"steps": steps, "stage": stage})
        save_checkpoint(run_dir / "policy.npz", policy, norm, meta, {"steps": steps, "stage": stage})
    return TrainResult(policy, norm, metrics, run_dir)


def _env_summary(cfg: EnvConfig) -> dict:
    d = dataclasses.asdict(cfg)
    return json.loads(json.dumps(d, default=lambda o: list(o) if isinstance(o, tuple) else str(o)))


def learning_curve(metrics):
    """Per-update (steps, mean return, mean length), skipping updates with no finished episode."""
    rows = [(m["steps"], m["mean_return"], m["mean_length"]) for m in metrics if m["mean_return"] is not None]
    return np.array(rows, dtype=float).reshape(-1, 3)


def decile_improvement(metrics) -> tuple[float, float]:
    """Relative gain of mean return and mean length from the first to the last tenth of training."""
    curve = learning_curve(metrics)
    k = max(1, len(curve) // 10)
    first, last = curve[:k, 1:].mean(0), curve[-k:, 1:].mean(0)
    gain = (last - first) / np.abs(first)
    return float(gain[0]), float(gain[1])
