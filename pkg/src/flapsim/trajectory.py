"""Procedural target trajectories built from skill commands and loop primitives."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from .spatial import quat_to_matrix, rotate_inv

POLICY_DT = 0.02
LOOKAHEAD_STEPS = 30
DEFAULT_COMMAND_DURATION = 3.0
# nominal cruise speed of the default airframe
CRUISE_SPEED = 3.8


@dataclass(frozen=True)
class Command:
    """Constant forward speed, vertical speed and yaw rate held for ``duration`` seconds.

    A nonzero yaw rate together with a nonzero vertical speed yields a helix.
    """

    forward_speed: float
    z_velocity: float = 0.0
    yaw_rate: float = 0.0
    duration: float = DEFAULT_COMMAND_DURATION

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"command duration must be positive, got {self.duration}")
        if self.forward_speed < 0:
            raise ValueError(f"forward speed must be nonnegative, got {self.forward_speed}")


@dataclass(frozen=True)
class LoopPrimitive:
    """Vertical loop in the plane spanned by the current heading and world up.

    ``kind="immelmann"`` flies only the upper half and leaves the path heading
    reversed for the following segments.  ``plane_yaw`` rotates the loop plane
    about world z relative to the current heading.
    """

    radius: float
    speed: float
    kind: str = "loop"
    plane_yaw: float = 0.0

    def __post_init__(self):
        if not self.radius > 0 or not self.speed > 0:
            raise ValueError("loop radius and speed must be positive")
        if self.kind not in ("loop", "immelmann"):
            raise ValueError(f"unknown loop kind {self.kind!r}")

    @property
    def sweep(self) -> float:
        return 2 * math.pi if self.kind == "loop" else math.pi

    @property
    def duration(self) -> float:
        return self.sweep * self.radius / self.speed


@dataclass(frozen=True)
class TrajectorySpec:
    segments: tuple
    start_position: tuple = (0.0, 0.0, 0.0)
    start_heading: float = 0.0

    @property
    def duration(self) -> float:
        return float(sum(s.duration for s in self.segments))


@dataclass
class _Piece:
    t0: float
    t1: float
    p0: np.ndarray
    heading: float
    seg: object


def _evaluate(piece: _Piece, tau):
    """Position at local times ``tau`` within one segment."""
    seg, psi0, p0 = piece.seg, piece.heading, piece.p0
    tau = np.asarray(tau, dtype=float)
    out = np.empty(tau.shape + (3,))
    if isinstance(seg, Command):
        v, w = seg.forward_speed, seg.yaw_rate
        if w == 0.0:
            out[..., 0] = p0[0] + v * math.cos(psi0) * tau
            out[..., 1] = p0[1] + v * math.sin(psi0) * tau
        else:
            psi = psi0 + w * tau
            out[..., 0] = p0[0] + v / w * (np.sin(psi) - math.sin(psi0))
            out[..., 1] = p0[1] - v / w * (np.cos(psi) - math.cos(psi0))
        out[..., 2] = p0[2] + seg.z_velocity * tau
    else:
        r = seg.radius
        th = seg.speed / r * tau
        yaw = psi0 + seg.plane_yaw
        fwd = r * np.sin(th)
        out[..., 0] = p0[0] + fwd * math.cos(yaw)
        out[..., 1] = p0[1] + fwd * math.sin(yaw)
        out[..., 2] = p0[2] + r * (1.0 - np.cos(th))
    return out


def _end_heading(piece: _Piece) -> float:
    seg = piece.seg
    if isinstance(seg, Command):
        return piece.heading + seg.yaw_rate * seg.duration
    if seg.kind == "immelmann":
        return piece.heading + seg.plane_yaw + math.pi
    return piece.heading


def _pieces(spec: TrajectorySpec) -> list:
    if not spec.segments:
        raise ValueError("trajectory spec has no segments")
    pieces = []
    t = 0.0
    p = np.asarray(spec.start_position, dtype=float)
    heading = float(spec.start_heading)
    for seg in spec.segments:
        piece = _Piece(t, t + seg.duration, p, heading, seg)
        pieces.append(piece)
        p = _evaluate(piece, seg.duration)
        if isinstance(seg, LoopPrimitive) and seg.kind == "loop":
            p = piece.p0.copy()  # exact closure
        heading = _end_heading(piece)
        t = piece.t1
    return pieces


@dataclass(frozen=True)
class Trajectory:
    """Target positions sampled on a uniform grid; ``times[0] == 0``."""

    times: np.ndarray
    positions: np.ndarray
    dt: float = POLICY_DT
    headings: np.ndarray = field(default=None, repr=False)

    @property
    def duration(self) -> float:
        return float(self.times[-1])

    def __len__(self):
        return len(self.times)

    def position_at(self, t):
        """Linearly interpolated target at time(s) ``t``; the end points are held."""
        t = np.asarray(t, dtype=float)
        if len(self.times) == 1:
            return np.broadcast_to(self.positions[0], t.shape + (3,)).copy()
        x = np.clip(t / self.dt, 0.0, len(self.times) - 1)
        i0 = np.minimum(np.floor(x).astype(int), len(self.times) - 2)
        frac = (x - i0)[..., None]
        return (1.0 - frac) * self.positions[i0] + frac * self.positions[i0 + 1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# schema_version: 1\n")
            w = csv.writer(fh)
            w.writerow(["t_s", "x_m", "y_m", "z_m"])
            for t, p in zip(self.times, self.positions):
                w.writerow([repr(float(t)), *(repr(float(c)) for c in p)])

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        data = np.loadtxt(path, delimiter=",", comments="#", skiprows=2)
        data = np.atleast_2d(data)
        dt = float(data[1, 0] - data[0, 0]) if len(data) > 1 else POLICY_DT
        return cls(times=data[:, 0], positions=data[:, 1:4], dt=dt)


def _sample(pieces: list, times: np.ndarray):
    positions = np.empty(times.shape + (3,))
    headings = np.empty(times.shape)
    bounds = np.array([p.t1 for p in pieces])
    which = np.minimum(np.searchsorted(bounds, times, side="right"), len(pieces) - 1)
    for k, piece in enumerate(pieces):
        sel = which == k
        if not sel.any():
            continue
        tau = np.clip(times[sel] - piece.t0, 0.0, piece.seg.duration)
        positions[sel] = _evaluate(piece, tau)
        if isinstance(piece.seg, Command):
            headings[sel] = piece.heading + piece.seg.yaw_rate * tau
        else:
            headings[sel] = piece.heading + piece.seg.plane_yaw
    return positions, headings


def evaluate(spec: TrajectorySpec, times):
    """Exact target positions at arbitrary times; the end point is held past the last segment."""
    return _sample(_pieces(spec), np.asarray(times, dtype=float))[0]


def generate(spec: TrajectorySpec, dt: float = POLICY_DT) -> Trajectory:
    """Sample the spec on ``t = k*dt`` from 0 to the total duration (rounded to the grid)."""
    pieces = _pieces(spec)
    n = int(round(pieces[-1].t1 / dt))
    times = np.arange(n + 1) * dt
    positions, headings = _sample(pieces, times)
    return Trajectory(times=times, positions=positions, dt=dt, headings=headings)


def lookahead_targets(traj: Trajectory, t, steps: int = LOOKAHEAD_STEPS):
    """World-frame targets at ``t + k*dt`` for k = 1..steps, shape (..., steps, 3)."""
    t = np.asarray(t, dtype=float)
    k = np.arange(1, steps + 1) * traj.dt
    return traj.position_at(t[..., None] + k)


def lookahead_window(traj: Trajectory, t, base_position, base_orientation, steps: int = LOOKAHEAD_STEPS):
    """Upcoming targets relative to the robot, expressed in its body frame."""
    targets = lookahead_targets(traj, t, steps)
    rel = targets - np.asarray(base_position)[..., None, :]
    R = quat_to_matrix(np.asarray(base_orientation, dtype=float))
    return rotate_inv(R[..., None, :, :], rel)


# curricula ---------------------------------------------------------------


def forward_flight(speed: float = CRUISE_SPEED, duration: float = 30.0, start_position=(0.0, 0.0, 0.0)) -> TrajectorySpec:
    n = max(1, int(round(duration / DEFAULT_COMMAND_DURATION)))
    seg = Command(speed, 0.0, 0.0, duration / n)
    return TrajectorySpec(segments=(seg,) * n, start_position=tuple(start_position))


def random_spec(
    rng: np.random.Generator,
    stage: int,
    duration: float = 30.0,
    speed_range=(3.0, 5.0),
    z_velocity_range=(-1.0, 1.0),
    yaw_rate_range=(-0.6, 0.6),
    loop_probability: float = 0.0,
    loop_radius_range=(3.0, 5.0),
) -> TrajectorySpec:
    """Random command sequence for a curriculum stage.

    Stage 1 is constant-speed level flight, stage 2 adds climbs and dives at
    varying speed and stage 3 adds turns (and optionally loops).
    """
    if stage <= 1:
        return forward_flight(duration=duration)
    segs = []
    t = 0.0
    while t < duration - 1e-9:
        if stage >= 3 and loop_probability > 0 and rng.random() < loop_probability:
            r = float(rng.uniform(*loop_radius_range))
            seg = LoopPrimitive(r, float(rng.uniform(*speed_range)), kind=str(rng.choice(["loop", "immelmann"])))
        else:
            v = float(rng.uniform(*speed_range))
            vz = float(rng.uniform(*z_velocity_range))
            w = float(rng.uniform(*yaw_rate_range)) if stage >= 3 else 0.0
            seg = Command(v, vz, w, DEFAULT_COMMAND_DURATION)
        segs.append(seg)
        t += seg.duration
    return TrajectorySpec(segments=tuple(segs))


# serialization -----------------------------------------------------------


def spec_to_dict(spec: TrajectorySpec) -> dict:
    segs = []
    for s in spec.segments:
        if isinstance(s, Command):
            keys, d = _COMMAND_KEYS, {"type": "command"}
        else:
            keys, d = _LOOP_KEYS, {"type": "loop", "kind": s.kind}
        d.update({unit: getattr(s, name) for unit, name in keys.items()})
        segs.append(d)
    return {
        "schema_version": 1,
        "start_position_m": list(spec.start_position),
        "start_heading_rad": spec.start_heading,
        "segments": segs,
    }


_COMMAND_KEYS = {"forward_speed_m_s": "forward_speed", "z_velocity_m_s": "z_velocity", "yaw_rate_rad_s": "yaw_rate", "duration_s": "duration"}
_LOOP_KEYS = {"radius_m": "radius", "speed_m_s": "speed", "plane_yaw_rad": "plane_yaw"}


def spec_from_dict(d: dict) -> TrajectorySpec:
    segs = []
    for raw in d.get("segments", ()):
        raw = dict(raw)
        kind = raw.pop("type", "command")
        keys = _COMMAND_KEYS if kind == "command" else _LOOP_KEYS
        kw = {keys.get(k, k): v for k, v in raw.items()}
        segs.append(Command(**kw) if kind == "command" else LoopPrimitive(**kw))
    start = d.get("start_position_m", d.get("start_position", (0.0, 0.0, 0.0)))
    heading = d.get("start_heading_rad", d.get("start_heading", 0.0))
    return TrajectorySpec(segments=tuple(segs), start_position=tuple(float(x) for x in start), start_heading=float(heading))


def save_spec(spec: TrajectorySpec, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(spec_to_dict(spec), fh, sort_keys=False)


def load_spec(path) -> TrajectorySpec:
    with open(path) as fh:
        return spec_from_dict(yaml.safe_load(fh))
