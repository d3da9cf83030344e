"""Robot description and canonical simulation state.

The default robot has four rigid bodies (main body, left wing, right wing,
tail) and five revolute joints.  Each wing hangs off the main body through a
flap joint followed by a feathering (pitch) joint; the tail has a single
pitch joint.  The main body is the floating base.

Body frames: x forward, y left, z up.  Generalized velocities are ordered
``[v_world (3), omega_body (3), joint rates (5)]``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import yaml

from . import geometry
from .spatial import euler_to_quat, quat_normalize, quat_to_euler

N_BODIES = 4
N_JOINTS = 5
N_DOF = 6 + N_JOINTS
BASE = 0
LEFT_WING, RIGHT_WING, TAIL = 1, 2, 3
BODY_NAMES = ("main_body", "left_wing", "right_wing", "tail")
JOINT_NAMES = ("left_flap", "left_pitch", "right_flap", "right_pitch", "tail_pitch")

ELLIPSOID = "ellipsoid"
INERTIA_BOX = "inertia-box"

# main body, left wing, right wing, tail
DEFAULT_MASS_FRACTIONS = (0.7, 0.1, 0.1, 0.1)
TOTAL_MASS = 0.31
WINGSPAN = 0.995
MEAN_CHORD = 0.17
BODY_WIDTH = 0.05
AIR_DENSITY = 1.225
# joint angles that hold a trimmed glide with the default geometry
GLIDE_POSE = (0.0, -0.6, 0.0, -0.6, 0.0)


@dataclass(frozen=True)
class FluidCoefficients:
    """Dimensionless coefficients of the ellipsoid fluid model."""

    blunt_drag: float = 0.2
    slender_drag: float = 0.12
    angular_drag: float = 1.5
    kutta_lift: float = 3.14
    magnus_lift: float = 1.0

    def as_array(self):
        return np.array([self.blunt_drag, self.slender_drag, self.angular_drag, self.kutta_lift, self.magnus_lift])

    def scaled(self, factors) -> "FluidCoefficients":
        return FluidCoefficients(*(self.as_array() * np.asarray(factors, dtype=float)).tolist())


@dataclass(frozen=True)
class FluidBodyParams:
    """Per-body parameters of the stateless fluid force model."""

    model: str
    semi_axes: tuple
    added_mass: tuple
    added_inertia: tuple
    volume: float
    area_max: float
    drag_moments: tuple
    drag_moment_max: float
    viscous_radius: float
    coefficients: FluidCoefficients = field(default_factory=FluidCoefficients)

    @classmethod
    def from_ellipsoid(cls, semi_axes, model=ELLIPSOID, density=AIR_DENSITY, coefficients=None):
        s = np.asarray(semi_axes, dtype=float)
        m_a, i_a = geometry.ellipsoid_added_mass(s, density)
        big = np.sort(s)[1:]
        moments = geometry.drag_moments(s)
        return cls(
            model=model,
            semi_axes=tuple(s.tolist()),
            added_mass=tuple(m_a.tolist()),
            added_inertia=tuple(i_a.tolist()),
            volume=float(geometry.ellipsoid_volume(s)),
            area_max=float(np.pi * big[0] * big[1]),
            drag_moments=tuple(moments.tolist()),
            drag_moment_max=float(moments.max()),
            viscous_radius=float(s.mean()),
            coefficients=coefficients or FluidCoefficients(),
        )


@dataclass(frozen=True)
class BodyDesc:
    name: str
    mass: float
    inertia: tuple  # 3x3 about the CoM, body frame
    com: tuple  # CoM in the body frame
    parent: int  # -1 for the floating base
    anchor: tuple  # body frame origin in the parent frame
    fluid: FluidBodyParams


@dataclass(frozen=True)
class JointDesc:
    name: str
    parent: int
    child: int
    axis: tuple  # in the child frame preceding this joint's rotation
    lower: float
    upper: float
    velocity_limit: float
    damping: float
    torque_limit: float


@dataclass(frozen=True)
class RobotModel:
    bodies: tuple
    joints: tuple
    total_wingspan: float = WINGSPAN
    mean_chord: float = MEAN_CHORD
    fixed_base: bool = False
    locked_joints: tuple = ()
    design_lift_to_drag: float = 6.0

    @property
    def base(self) -> BodyDesc:
        return self.bodies[BASE]

    @property
    def total_mass(self) -> float:
        return float(sum(b.mass for b in self.bodies))

    @property
    def n_dof(self) -> int:
        return N_DOF

    def replace(self, **changes) -> "RobotModel":
        return dataclasses.replace(self, **changes)

    @cached_property
    def arrays(self) -> "ModelArrays":
        return ModelArrays.from_model(self)


@dataclass
class ModelArrays:
    """Numeric view of one model, or a stack of models along a leading axis.

    Kinematic topology (parents, joint-to-body map) is shared; every numeric
    field may carry batch dimensions in front.
    """

    mass: np.ndarray  # (..., 4)
    inertia: np.ndarray  # (..., 4, 3, 3)
    com: np.ndarray  # (..., 4, 3)
    anchor: np.ndarray  # (..., 4, 3)
    axis: np.ndarray  # (..., 5, 3)
    lower: np.ndarray
    upper: np.ndarray
    velocity_limit: np.ndarray
    damping: np.ndarray
    torque_limit: np.ndarray
    # fluid
    ellipsoid: np.ndarray  # (..., 4) bool
    semi_axes: np.ndarray
    added_mass: np.ndarray
    added_inertia: np.ndarray
    volume: np.ndarray
    area_max: np.ndarray
    drag_moments: np.ndarray
    drag_moment_max: np.ndarray
    viscous_radius: np.ndarray
    coefficients: np.ndarray  # (..., 4, 5)
    thin_axis: np.ndarray  # (4,) index of the smallest semi-axis
    free: np.ndarray  # (11,) bool, generalized coordinates that may move
    body_joints: tuple  # per body, tuple of joint indices driving it

    @classmethod
    def from_model(cls, model: RobotModel) -> "ModelArrays":
        b, j = model.bodies, model.joints
        body_joints = tuple(tuple(k for k, jt in enumerate(j) if jt.child == i) for i in range(len(b)))
        free = np.ones(N_DOF, dtype=bool)
        if model.fixed_base:
            free[:6] = False
        for k in model.locked_joints:
            free[6 + k] = False
        semi = np.array([x.fluid.semi_axes for x in b], dtype=float)
        return cls(
            mass=np.array([x.mass for x in b], dtype=float),
            inertia=np.array([x.inertia for x in b], dtype=float),
            com=np.array([x.com for x in b], dtype=float),
            anchor=np.array([x.anchor for x in b], dtype=float),
            axis=np.array([x.axis for x in j], dtype=float),
            lower=np.array([x.lower for x in j], dtype=float),
            upper=np.array([x.upper for x in j], dtype=float),
            velocity_limit=np.array([x.velocity_limit for x in j], dtype=float),
            damping=np.array([x.damping for x in j], dtype=float),
            torque_limit=np.array([x.torque_limit for x in j], dtype=float),
            ellipsoid=np.array([x.fluid.model == ELLIPSOID for x in b]),
            semi_axes=semi,
            added_mass=np.array([x.fluid.added_mass for x in b], dtype=float),
            added_inertia=np.array([x.fluid.added_inertia for x in b], dtype=float),
            volume=np.array([x.fluid.volume for x in b], dtype=float),
            area_max=np.array([x.fluid.area_max for x in b], dtype=float),
            drag_moments=np.array([x.fluid.drag_moments for x in b], dtype=float),
            drag_moment_max=np.array([x.fluid.drag_moment_max for x in b], dtype=float),
            viscous_radius=np.array([x.fluid.viscous_radius for x in b], dtype=float),
            coefficients=np.array([x.fluid.coefficients.as_array() for x in b], dtype=float),
            thin_axis=np.argmin(semi, axis=-1),
            free=free,
            body_joints=body_joints,
        )

    @classmethod
    def stack(cls, models) -> "ModelArrays":
        """Stack several models (same topology and locking) along a new first axis."""
        arrs = [m.arrays if isinstance(m, RobotModel) else m for m in models]
        first = arrs[0]
        shared = {"thin_axis", "free", "body_joints"}
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name in shared:
                kw[f.name] = getattr(first, f.name)
            else:
                kw[f.name] = np.stack([getattr(a, f.name) for a in arrs])
        return cls(**kw)


def as_arrays(model) -> ModelArrays:
    return model.arrays if isinstance(model, RobotModel) else model


@dataclass(frozen=True)
class SimState:
    """Full kinematic state; every field may carry matching batch dimensions."""

    base_position: np.ndarray
    base_orientation: np.ndarray
    base_linear_velocity: np.ndarray  # world frame
    base_angular_velocity: np.ndarray  # body frame
    joint_positions: np.ndarray
    joint_velocities: np.ndarray
    time: np.ndarray | float = 0.0
    # generalized acceleration of the previous step, used by the added-mass terms
    prev_acceleration: np.ndarray | None = None

    @classmethod
    def zeros(cls, batch_shape=()) -> "SimState":
        shape = tuple(batch_shape)
        quat = np.zeros(shape + (4,))
        quat[..., 0] = 1.0
        return cls(
            base_position=np.zeros(shape + (3,)),
            base_orientation=quat,
            base_linear_velocity=np.zeros(shape + (3,)),
            base_angular_velocity=np.zeros(shape + (3,)),
            joint_positions=np.zeros(shape + (N_JOINTS,)),
            joint_velocities=np.zeros(shape + (N_JOINTS,)),
            time=np.zeros(shape) if shape else 0.0,
            prev_acceleration=np.zeros(shape + (N_DOF,)),
        )

    @classmethod
    def from_vectors(cls, q, qd, time=0.0) -> "SimState":
        """Build from ``q = [position, roll/pitch/yaw, joints]`` and generalized velocity."""
        q = np.asarray(q, dtype=float)
        qd = np.asarray(qd, dtype=float)
        return cls(
            base_position=q[..., 0:3].copy(),
            base_orientation=euler_to_quat(q[..., 3:6]),
            base_linear_velocity=qd[..., 0:3].copy(),
            base_angular_velocity=qd[..., 3:6].copy(),
            joint_positions=q[..., 6:].copy(),
            joint_velocities=qd[..., 6:].copy(),
            time=time,
            prev_acceleration=np.zeros(qd.shape),
        )

    @property
    def batch_shape(self) -> tuple:
        return self.base_position.shape[:-1]

    @property
    def euler(self):
        """Roll, pitch, yaw derived from the quaternion."""
        return quat_to_euler(self.base_orientation)

    @property
    def q(self):
        """Generalized position with Euler angles for the base rotation."""
        return np.concatenate([self.base_position, self.euler, self.joint_positions], axis=-1)

    @property
    def velocity(self):
        """Generalized velocity ``[v_world, omega_body, joint rates]``."""
        return np.concatenate(
            [self.base_linear_velocity, self.base_angular_velocity, self.joint_velocities], axis=-1
        )

    def accel(self):
        if self.prev_acceleration is None:
            return np.zeros(self.batch_shape + (N_DOF,))
        return self.prev_acceleration

    def replace(self, **changes) -> "SimState":
        return dataclasses.replace(self, **changes)

    def index(self, idx) -> "SimState":
        """Select batch element(s)."""
        return SimState(
            **{
                f.name: _take(getattr(self, f.name), idx)
                for f in dataclasses.fields(self)
            }
        )

    @staticmethod
    def stack(states) -> "SimState":
        return SimState(
            **{
                f.name: np.stack([np.asarray(s.accel() if f.name == "prev_acceleration" else getattr(s, f.name), dtype=float) for s in states])
                for f in dataclasses.fields(SimState)
            }
        )

    def copy(self) -> "SimState":
        return SimState(**{f.name: (None if getattr(self, f.name) is None else np.array(getattr(self, f.name))) for f in dataclasses.fields(self)})

    def normalized(self) -> "SimState":
        return self.replace(base_orientation=quat_normalize(self.base_orientation))


def _take(x, idx):
    if x is None:
        return None
    x = np.asarray(x)
    return x if x.ndim == 0 else x[idx]  # a scalar time is shared by the batch


def _mirror_axis(axis):
    # reflection y -> -y of an axial vector
    x, y, z = axis
    return (-x, y, -z)


def build_default_model(
    mass_fractions=DEFAULT_MASS_FRACTIONS,
    total_mass=TOTAL_MASS,
    wing_anchor_x=-0.09,
    coefficients: FluidCoefficients | None = None,
    flap_limit=np.deg2rad(60.0),
    pitch_limit=np.deg2rad(45.0),
    tail_limit=np.deg2rad(45.0),
    joint_damping=(0.005, 0.002, 0.005, 0.002, 0.002),
    torque_limits=(3.0, 1.0, 3.0, 1.0, 1.0),
    velocity_limit=60.0,
    design_lift_to_drag=6.0,
) -> RobotModel:
    """Default 4-body, 5-joint flapping-wing robot (0.995 m span, 0.17 m chord, 0.31 kg)."""
    coefficients = coefficients or FluidCoefficients()
    masses = np.asarray(mass_fractions, dtype=float) * total_mass

    body_semi = (0.15, BODY_WIDTH / 2, BODY_WIDTH / 2)
    half_span = (WINGSPAN - BODY_WIDTH) / 2
    # elliptic planform: mean chord = pi/4 * root chord
    root_chord = 4.0 * MEAN_CHORD / np.pi
    thickness = 0.05 * MEAN_CHORD
    wing_semi = (root_chord / 2, half_span / 2, thickness / 2)
    tail_chord, tail_span = 0.14, 0.16
    tail_semi = (tail_chord / 2, tail_span / 2, 0.05 * tail_chord / 2)

    def body(name, k, semi, parent, anchor, com, fluid_model):
        fluid = FluidBodyParams.from_ellipsoid(semi, model=fluid_model, coefficients=coefficients)
        inertia = geometry.solid_ellipsoid_inertia(masses[k], semi)
        return BodyDesc(
            name=name,
            mass=float(masses[k]),
            inertia=tuple(map(tuple, inertia.tolist())),
            com=tuple(float(c) for c in com),
            parent=parent,
            anchor=tuple(float(a) for a in anchor),
            fluid=fluid,
        )

    bodies = (
        body("main_body", 0, body_semi, -1, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0), INERTIA_BOX),
        body("left_wing", 1, wing_semi, BASE, (wing_anchor_x, BODY_WIDTH / 2, 0.0), (0.0, half_span / 2, 0.0), ELLIPSOID),
        body("right_wing", 2, wing_semi, BASE, (wing_anchor_x, -BODY_WIDTH / 2, 0.0), (0.0, -half_span / 2, 0.0), ELLIPSOID),
        body("tail", 3, tail_semi, BASE, (-body_semi[0], 0.0, 0.0), (-tail_chord / 2, 0.0, 0.0), ELLIPSOID),
    )

    flap_axis = (1.0, 0.0, 0.0)
    pitch_axis = (0.0, 1.0, 0.0)
    spec = [
        ("left_flap", LEFT_WING, flap_axis, flap_limit),
        ("left_pitch", LEFT_WING, pitch_axis, pitch_limit),
        ("right_flap", RIGHT_WING, _mirror_axis(flap_axis), flap_limit),
        ("right_pitch", RIGHT_WING, _mirror_axis(pitch_axis), pitch_limit),
        ("tail_pitch", TAIL, (0.0, 1.0, 0.0), tail_limit),
    ]
    joints = tuple(
        JointDesc(
            name=name,
            parent=BASE,
            child=child,
            axis=tuple(float(a) for a in axis),
            lower=-float(limit),
            upper=float(limit),
            velocity_limit=float(velocity_limit),
            damping=float(joint_damping[k]),
            torque_limit=float(torque_limits[k]),
        )
        for k, (name, child, axis, limit) in enumerate(spec)
    )
    return RobotModel(bodies=bodies, joints=joints, design_lift_to_drag=float(design_lift_to_drag))


def validate_model(model: RobotModel, mass_tolerance=None) -> list[str]:
    """Return human-readable invariant violations; empty when the model is valid.

    ``mass_tolerance`` (kg) additionally checks the total mass against 0.31 kg.
    """
    problems = []
    if len(model.bodies) != N_BODIES:
        problems.append(f"expected {N_BODIES} bodies, got {len(model.bodies)}")
    if len(model.joints) != N_JOINTS:
        problems.append(f"expected {N_JOINTS} joints, got {len(model.joints)}")
    for b in model.bodies:
        if not b.mass > 0:
            problems.append(f"{b.name}: mass must be positive (got {b.mass})")
        inertia = np.asarray(b.inertia, dtype=float)
        if inertia.shape != (3, 3) or not np.allclose(inertia, inertia.T, rtol=0, atol=1e-15):
            problems.append(f"{b.name}: inertia tensor is not symmetric")
        else:
            eig = np.linalg.eigvalsh(inertia)
            if eig.min() <= 0:
                problems.append(f"{b.name}: inertia tensor is not positive definite")
        if any(v < 0 for v in (*b.fluid.added_mass, *b.fluid.added_inertia, *b.fluid.semi_axes)):
            problems.append(f"{b.name}: fluid parameters must be nonnegative")
        if b.fluid.model not in (ELLIPSOID, INERTIA_BOX):
            problems.append(f"{b.name}: unknown fluid model {b.fluid.model!r}")
        if any(c < 0 for c in b.fluid.coefficients.as_array()):
            problems.append(f"{b.name}: fluid coefficients must be nonnegative")
    for j in model.joints:
        axis = np.asarray(j.axis, dtype=float)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            problems.append(f"{j.name}: joint axis is not a unit vector")
        if not j.lower < j.upper:
            problems.append(f"{j.name}: joint limits must satisfy lower < upper")
        if j.damping < 0 or j.torque_limit < 0 or j.velocity_limit <= 0:
            problems.append(f"{j.name}: damping/limits must be nonnegative")
        if not (0 <= j.parent < len(model.bodies) and 0 <= j.child < len(model.bodies)):
            problems.append(f"{j.name}: joint references a missing body")
    if mass_tolerance is not None and abs(model.total_mass - TOTAL_MASS) > mass_tolerance:
        problems.append(f"total mass {model.total_mass:.6f} kg differs from {TOTAL_MASS} kg")
    return problems


# -- text config -------------------------------------------------------------

def model_to_dict(model: RobotModel) -> dict:
    def fluid(f: FluidBodyParams):
        return {
            "model": f.model,
            "semi_axes_m": list(f.semi_axes),
            "added_mass_kg": list(f.added_mass),
            "added_inertia_kg_m2": list(f.added_inertia),
            "volume_m3": f.volume,
            "area_max_m2": f.area_max,
            "drag_moments_m5": list(f.drag_moments),
            "drag_moment_max_m5": f.drag_moment_max,
            "viscous_radius_m": f.viscous_radius,
            "coefficients": dataclasses.asdict(f.coefficients),
        }

    return {
        "schema_version": 1,
        "total_wingspan_m": model.total_wingspan,
        "mean_chord_m": model.mean_chord,
        "fixed_base": model.fixed_base,
        "locked_joints": list(model.locked_joints),
        "design_lift_to_drag": model.design_lift_to_drag,
        "bodies": [
            {
                "name": b.name,
                "mass_kg": b.mass,
                "inertia_kg_m2": [list(r) for r in b.inertia],
                "com_m": list(b.com),
                "parent": b.parent,
                "anchor_m": list(b.anchor),
                "fluid": fluid(b.fluid),
            }
            for b in model.bodies
        ],
        "joints": [
            {
                "name": j.name,
                "parent": j.parent,
                "child": j.child,
                "axis": list(j.axis),
                "lower_rad": j.lower,
                "upper_rad": j.upper,
                "velocity_limit_rad_s": j.velocity_limit,
                "damping_N_m_s_rad": j.damping,
                "torque_limit_N_m": j.torque_limit,
            }
            for j in model.joints
        ],
    }


def model_from_dict(d: dict) -> RobotModel:
    def fluid(f):
        return FluidBodyParams(
            model=f["model"],
            semi_axes=tuple(f["semi_axes_m"]),
            added_mass=tuple(f["added_mass_kg"]),
            added_inertia=tuple(f["added_inertia_kg_m2"]),
            volume=f["volume_m3"],
            area_max=f["area_max_m2"],
            drag_moments=tuple(f["drag_moments_m5"]),
            drag_moment_max=f["drag_moment_max_m5"],
            viscous_radius=f["viscous_radius_m"],
            coefficients=FluidCoefficients(**f["coefficients"]),
        )

    bodies = tuple(
        BodyDesc(
            name=b["name"],
            mass=b["mass_kg"],
            inertia=tuple(tuple(r) for r in b["inertia_kg_m2"]),
            com=tuple(b["com_m"]),
            parent=b["parent"],
            anchor=tuple(b["anchor_m"]),
            fluid=fluid(b["fluid"]),
        )
        for b in d["bodies"]
    )
    joints = tuple(
        JointDesc(
            name=j["name"],
            parent=j["parent"],
            child=j["child"],
            axis=tuple(j["axis"]),
            lower=j["lower_rad"],
            upper=j["upper_rad"],
            velocity_limit=j["velocity_limit_rad_s"],
            damping=j["damping_N_m_s_rad"],
            torque_limit=j["torque_limit_N_m"],
        )
        for j in d["joints"]
    )
    return RobotModel(
        bodies=bodies,
        joints=joints,
        total_wingspan=d["total_wingspan_m"],
        mean_chord=d["mean_chord_m"],
        fixed_base=d.get("fixed_base", False),
        locked_joints=tuple(d.get("locked_joints", ())),
        design_lift_to_drag=d.get("design_lift_to_drag", 6.0),
    )


def save_model(model: RobotModel, path) -> None:
    Path(path).write_text(yaml.safe_dump(model_to_dict(model), sort_keys=False))


def load_model(path) -> RobotModel:
    return model_from_dict(yaml.safe_load(Path(path).read_text()))
