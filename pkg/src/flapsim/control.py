"""Policy-side control stack: observations, action filtering, joint PD and the MLP policy."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .model import N_JOINTS, SimState, as_arrays
from .spatial import quat_to_matrix, rotate_inv
from .trajectory import LOOKAHEAD_STEPS, Trajectory, lookahead_window

POLICY_RATE = 50.0
SIM_RATE = 250.0
SUBSTEPS = int(round(SIM_RATE / POLICY_RATE))
FILTER_CUTOFF_HZ = 7.0
HISTORY_LENGTH = 25
FRAME_SIZE = 4 + 3 + N_JOINTS + 1 + N_JOINTS
OBS_SIZE = HISTORY_LENGTH * FRAME_SIZE + 3 * LOOKAHEAD_STEPS
ACTION_SIZE = N_JOINTS
CHECKPOINT_VERSION = 1


def clamp_action(action):
    return np.clip(np.asarray(action, dtype=float), -1.0, 1.0)


# PD -----------------------------------------------------------------------


@dataclass(frozen=True)
class PDGains:
    kp: tuple = (5.0,) * N_JOINTS
    kd: tuple = (0.1,) * N_JOINTS

    def __post_init__(self):
        if np.any(np.asarray(self.kp) < 0) or np.any(np.asarray(self.kd) < 0):
            raise ValueError("PD gains must be nonnegative")

    @property
    def arrays(self):
        return np.asarray(self.kp, dtype=float), np.asarray(self.kd, dtype=float)


def pd_torque(target, state: SimState, gains: PDGains, model=None):
    """kp*(target - q) - kd*qdot, clamped to the model's torque limits when a model is given."""
    kp, kd = gains.arrays
    tau = kp * (np.asarray(target, dtype=float) - state.joint_positions) - kd * state.joint_velocities
    if model is not None:
        lim = as_arrays(model).torque_limit
        tau = np.clip(tau, -lim, lim)
    return tau


# filter ------------------------------------------------------------------


def filter_coefficient(cutoff_hz: float = FILTER_CUTOFF_HZ, rate_hz: float = POLICY_RATE) -> float:
    """Pole of the zero-order-hold discretization of 1/(s/wc + 1)."""
    return math.exp(-2.0 * math.pi * cutoff_hz / rate_hz)


@dataclass
class LowPassFilter:
    """y_k = a*y_{k-1} + (1-a)*u_k, one instance per environment batch."""

    state: np.ndarray
    a: float = field(default_factory=filter_coefficient)

    @classmethod
    def zeros(cls, batch_shape=(), size: int = ACTION_SIZE, cutoff_hz=FILTER_CUTOFF_HZ, rate_hz=POLICY_RATE):
        return cls(np.zeros(tuple(batch_shape) + (size,)), filter_coefficient(cutoff_hz, rate_hz))

    def __call__(self, u):
        self.state = self.a * self.state + (1.0 - self.a) * np.asarray(u, dtype=float)
        return self.state

    def frequency_response(self, freq_hz, rate_hz: float = POLICY_RATE):
        z = np.exp(1j * 2 * np.pi * np.asarray(freq_hz) / rate_hz)
        return (1.0 - self.a) * z / (z - self.a)


def action_scale(model, nominal=None):
    """Symmetric half-range around the nominal pose that stays inside the joint limits."""
    arr = as_arrays(model)
    nominal = np.zeros(N_JOINTS) if nominal is None else np.asarray(nominal, dtype=float)
    return np.minimum(arr.upper - nominal, nominal - arr.lower)


def filter_and_scale(raw_action, filt: LowPassFilter, model, nominal=None):
    """Low-pass the raw action, then map [-1, 1] onto the joint range around ``nominal``."""
    nominal = np.zeros(N_JOINTS) if nominal is None else np.asarray(nominal, dtype=float)
    y = filt(clamp_action(raw_action))
    return nominal + y * action_scale(model, nominal)


# observation -------------------------------------------------------------


def pitot_velocity(state: SimState, wind=None):
    """Forward (body x) airspeed."""
    v = state.base_linear_velocity
    if wind is not None:
        v = v - np.asarray(wind, dtype=float)
    R = quat_to_matrix(state.base_orientation)
    return rotate_inv(R, v)[..., 0]


def observation_frame(state: SimState, wind, previous_action):
    q = state.base_orientation
    q = np.where(q[..., :1] < 0, -q, q)  # canonical hemisphere
    return np.concatenate(
        [
            q,
            state.base_angular_velocity,
            state.joint_positions,
            pitot_velocity(state, wind)[..., None],
            np.broadcast_to(previous_action, state.joint_positions.shape),
        ],
        axis=-1,
    )


class FrameHistory:
    """Fixed-length history of observation frames, oldest first, zero padded."""

    def __init__(self, batch_shape=(), length: int = HISTORY_LENGTH, frame_size: int = FRAME_SIZE):
        self.frames = np.zeros(tuple(batch_shape) + (length, frame_size))

    def push(self, frame):
        self.frames = np.concatenate([self.frames[..., 1:, :], np.asarray(frame)[..., None, :]], axis=-2)

    def push_one(self, index, frame):
        f = self.frames[index]
        f[:-1] = f[1:].copy()
        f[-1] = frame

    def reset(self, mask=None):
        if mask is None:
            self.frames[...] = 0.0
        else:
            self.frames[np.asarray(mask)] = 0.0

    def flat(self):
        return self.frames.reshape(self.frames.shape[:-2] + (-1,))


def build_observation(state: SimState, wind, trajectory: Trajectory, t, history: FrameHistory, previous_action):
    """Push the current frame onto ``history`` and return history + lookahead as one vector."""
    if trajectory is None:
        raise ValueError("a trajectory is required for the lookahead window")
    history.push(observation_frame(state, wind, previous_action))
    look = lookahead_window(trajectory, t, state.base_position, state.base_orientation)
    obs = np.concatenate([history.flat(), look.reshape(look.shape[:-2] + (-1,))], axis=-1)
    if not np.all(np.isfinite(obs)):
        raise FloatingPointError("non-finite observation")
    return obs


# normalization -----------------------------------------------------------


class RunningNorm:
    """Running mean/variance (parallel Welford) used to standardize observations."""

    def __init__(self, size: int, clip: float = 10.0, eps: float = 1e-8):
        self.mean = np.zeros(size)
        self.var = np.ones(size)
        self.count = eps
        self.clip = clip
        self.eps = eps

    def update(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.mean.shape[0])
        n = x.shape[0]
        if n == 0:
            return
        bm, bv = x.mean(0), x.var(0)
        tot = self.count + n
        delta = bm - self.mean
        self.mean = self.mean + delta * n / tot
        m2 = self.var * self.count + bv * n + delta**2 * self.count * n / tot
        self.var = m2 / tot
        self.count = tot

    @property
    def std(self):
        return np.sqrt(self.var + self.eps)

    def normalize(self, x, clip=True):
        z = (np.asarray(x, dtype=float) - self.mean) / self.std
        return np.clip(z, -self.clip, self.clip) if clip else z

    def denormalize(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean

    def state_dict(self):
        return {"mean": self.mean.copy(), "var": self.var.copy(), "count": float(self.count), "clip": self.clip}

    def load_state_dict(self, d):
        self.mean = np.asarray(d["mean"], dtype=float).copy()
        self.var = np.asarray(d["var"], dtype=float).copy()
        self.count = float(d["count"])
        self.clip = float(d.get("clip", self.clip))


# policy ------------------------------------------------------------------


def _mlp(sizes, activation):
    layers = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(activation())
    return nn.Sequential(*layers)


class ActorCritic(nn.Module):
    """Separate tanh MLPs for the action mean and the value; state-independent log std."""

    def __init__(self, obs_size=OBS_SIZE, action_size=ACTION_SIZE, hidden=(256, 256), init_log_std=-0.5):
        super().__init__()
        self.obs_size, self.action_size, self.hidden = obs_size, action_size, tuple(hidden)
        self.actor = _mlp([obs_size, *hidden, action_size], nn.Tanh)
        self.critic = _mlp([obs_size, *hidden, 1], nn.Tanh)
        self.log_std = nn.Parameter(torch.full((action_size,), float(init_log_std)))
        self.double()

    def forward(self, obs):
        """Return (squashed mean, std, value)."""
        if obs.shape[-1] != self.obs_size:
            raise ValueError(f"observation has {obs.shape[-1]} entries, network expects {self.obs_size}")
        mean = torch.tanh(self.actor(obs))
        std = torch.exp(self.log_std).expand_as(mean)
        value = self.critic(obs)[..., 0]
        return mean, std, value

    def init_weights(self, generator: torch.Generator | None = None, gain=1.0, last_gain=0.01):
        """Orthogonal init; small final actor layer so initial actions stay near zero."""
        with torch.no_grad():
            for net, lg in ((self.actor, last_gain), (self.critic, 1.0)):
                linears = [m for m in net if isinstance(m, nn.Linear)]
                for i, lin in enumerate(linears):
                    g = lg if i == len(linears) - 1 else gain
                    w = torch.empty_like(lin.weight)
                    _orthogonal_(w, g, generator)
                    lin.weight.copy_(w)
                    lin.bias.zero_()
        return self

    def lipschitz_bound(self) -> tuple[float, float]:
        """Upper bounds on the Lipschitz constants of the mean and value maps (2-norm)."""

        def bound(net):
            out = 1.0
            for m in net:
                if isinstance(m, nn.Linear):
                    out *= float(torch.linalg.matrix_norm(m.weight.detach(), ord=2))
            return out  # tanh is 1-Lipschitz

        return bound(self.actor), bound(self.critic)


def _orthogonal_(w, gain, generator):
    rows, cols = w.shape
    a = torch.randn(max(rows, cols), min(rows, cols), generator=generator, dtype=w.dtype)
    q, r = torch.linalg.qr(a)
    q = q * torch.sign(torch.diagonal(r))
    if rows < cols:
        q = q.T
    w.copy_(gain * q[:rows, :cols])


def build_policy(seed: int = 0, hidden=(256, 256), init_log_std=-0.5, obs_size=OBS_SIZE) -> ActorCritic:
    g = torch.Generator().manual_seed(int(seed))
    return ActorCritic(obs_size, ACTION_SIZE, hidden, init_log_std).init_weights(g)


@torch.no_grad()
def policy_forward(observation, policy: ActorCritic, norm: RunningNorm | None = None):
    """Numpy in, numpy out: (mean in [-1, 1], std, value)."""
    obs = np.asarray(observation, dtype=float)
    if norm is not None:
        obs = norm.normalize(obs)
    mean, std, value = policy(torch.from_numpy(obs))
    return mean.numpy(), std.numpy(), value.numpy()


# checkpoints -------------------------------------------------------------


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, policy: ActorCritic, norm: RunningNorm | None = None, config=None, extra=None) -> None:
    """Write an ``.npz`` container: weights, layer shapes, normalizer stats and run metadata."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in policy.state_dict().items()}
    if norm is not None:
        arrays["norm/mean"] = norm.mean
        arrays["norm/var"] = norm.var
    meta = {
        "version": CHECKPOINT_VERSION,
        "obs_size": policy.obs_size,
        "action_size": policy.action_size,
        "hidden": list(policy.hidden),
        "shapes": {k: list(v.shape) for k, v in policy.state_dict().items()},
        "norm_count": None if norm is None else norm.count,
        "norm_clip": None if norm is None else norm.clip,
        "config_hash": config_hash(config) if config is not None else None,
        "extra": extra or {},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return (policy, norm or None, metadata)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        policy = ActorCritic(meta["obs_size"], meta["action_size"], tuple(meta["hidden"]))
        sd = {k[len("param/") :]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
        policy.load_state_dict(sd)
        norm = None
        if "norm/mean" in data.files:
            norm = RunningNorm(meta["obs_size"], clip=meta["norm_clip"])
            norm.load_state_dict({"mean": data["norm/mean"], "var": data["norm/var"], "count": meta["norm_count"]})
    return policy, norm, meta
