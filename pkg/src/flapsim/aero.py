"""Stateless aerodynamic wrenches (ellipsoid and inertia-box fluid models).

Per body, in its CoM frame, with ``v`` the velocity relative to the air::

    f_A = -m_A o vdot + (m_A o v) x w
    t_A = -I_A o wdot + (m_A o v) x v + (I_A o w) x w
    f_D = -rho [C_blunt A_v + C_slender (A_max - A_v)] |v| v
    t_D = -rho [C_ang I_D + C_slender (I_max - I_D)] |w| w
    f_M = C_M rho V w x v
    f_K = C_K rho A_v / |v| * (v x v_par) x v
    f_V = -6 pi r_V nu v
    t_V = -8 pi r_V^3 nu w

The inertia-box model keeps only the A and V terms.  ``v_par`` is the part
of ``v`` lying in the plane of the two largest semi-axes and ``I_D`` is the
norm of the per-axis drag moments weighted by the rotation direction.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass

import numpy as np

from .dynamics import Kinematics, kinematics
from .geometry import projected_area  # noqa: F401  (re-exported)
from .model import BODY_NAMES, FluidBodyParams, FluidCoefficients, SimState, as_arrays  # noqa: F401
from .spatial import cross, rotate, rotate_inv

TERMS = ("added_mass", "drag", "magnus", "kutta", "viscous")
_TINY = 1e-12


@dataclass(frozen=True)
class Environment:
    fluid_density: float = 1.225
    kinematic_viscosity: float = 1.5e-5
    wind_velocity: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (np.all(np.asarray(self.fluid_density) > 0) and np.all(np.asarray(self.kinematic_viscosity) > 0)):
            raise ValueError("fluid density and viscosity must be positive")

    @property
    def wind(self):
        return np.asarray(self.wind_velocity, dtype=float)


@dataclass
class Wrench:
    """Force and torque at a body's CoM, expressed in ``frame``."""

    force: np.ndarray
    torque: np.ndarray
    frame: str = "body"

    @property
    def vector(self):
        return np.concatenate([self.force, self.torque], axis=-1)


@dataclass
class WrenchTerms:
    """Per-term breakdown of an aerodynamic wrench (body frame)."""

    f_added_mass: np.ndarray
    f_drag: np.ndarray
    f_magnus: np.ndarray
    f_kutta: np.ndarray
    f_viscous: np.ndarray
    t_added_mass: np.ndarray
    t_drag: np.ndarray
    t_viscous: np.ndarray

    @property
    def force(self):
        return self.f_added_mass + self.f_drag + self.f_magnus + self.f_kutta + self.f_viscous

    @property
    def torque(self):
        return self.t_added_mass + self.t_drag + self.t_viscous

    def total(self) -> Wrench:
        return Wrench(self.force, self.torque)


@dataclass
class BodyKinematics:
    """Body-frame kinematics of one or more bodies relative to the air."""

    velocity: np.ndarray  # v relative to the air
    angular_velocity: np.ndarray
    acceleration: np.ndarray  # time derivative of the body-frame v
    angular_acceleration: np.ndarray

    @classmethod
    def at_rest(cls, shape=()):
        z = np.zeros(tuple(shape) + (3,))
        return cls(z, z.copy(), z.copy(), z.copy())


def _params_arrays(params):
    """Per-body arrays from a FluidBodyParams (or the stacked ModelArrays fields)."""
    if isinstance(params, FluidBodyParams):
        s = np.asarray(params.semi_axes, dtype=float)
        return dict(
            semi_axes=s,
            added_mass=np.asarray(params.added_mass, dtype=float),
            added_inertia=np.asarray(params.added_inertia, dtype=float),
            volume=params.volume,
            area_max=params.area_max,
            drag_moments=np.asarray(params.drag_moments, dtype=float),
            drag_moment_max=params.drag_moment_max,
            viscous_radius=params.viscous_radius,
            thin_axis=int(np.argmin(s)),
        )
    return params


def _coeff_array(coeffs):
    if isinstance(coeffs, FluidCoefficients):
        return coeffs.as_array()
    return np.asarray(coeffs, dtype=float)


def _check(bk: BodyKinematics):
    for x in (bk.velocity, bk.angular_velocity, bk.acceleration, bk.angular_acceleration):
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite body kinematics")


def _in_plane(v, thin_axis):
    """Remove the component of ``v`` along the smallest semi-axis."""
    thin_axis = np.asarray(thin_axis)
    mask = np.ones(v.shape)
    np.put_along_axis(mask, np.broadcast_to(thin_axis[..., None], v.shape[:-1] + (1,)), 0.0, axis=-1)
    return v * mask


def wrench_terms(bk: BodyKinematics, params, coeffs, env: Environment, ellipsoid=True) -> WrenchTerms:
    """Evaluate every fluid-force term.

    ``ellipsoid`` may be a boolean array (one flag per body); bodies with a
    False flag get only the added-mass and viscous terms.
    """
    p = _params_arrays(params)
    c = _coeff_array(coeffs)
    rho = np.asarray(env.fluid_density, dtype=float)[..., None]
    nu = np.asarray(env.kinematic_viscosity, dtype=float)[..., None]
    v, w = bk.velocity, bk.angular_velocity
    vdot, wdot = bk.acceleration, bk.angular_acceleration
    m_a, i_a = p["added_mass"], p["added_inertia"]
    speed = np.linalg.norm(v, axis=-1, keepdims=True)
    wnorm = np.linalg.norm(w, axis=-1, keepdims=True)
    c_blunt, c_slender, c_ang, c_kutta, c_magnus = (c[..., k : k + 1] for k in range(5))

    mv = m_a * v
    f_a = -m_a * vdot + cross(mv, w)
    t_a = -i_a * wdot + cross(mv, v) + cross(i_a * w, w)

    s = p["semi_axes"]
    moving = speed > _TINY
    u = np.where(moving, v / np.where(moving, speed, 1.0), 0.0)
    a_v = np.pi * np.sqrt(
        (s[..., 1] * s[..., 2] * u[..., 0]) ** 2
        + (s[..., 0] * s[..., 2] * u[..., 1]) ** 2
        + (s[..., 0] * s[..., 1] * u[..., 2]) ** 2
    )[..., None]
    a_max = np.asarray(p["area_max"], dtype=float)[..., None]
    f_d = -rho * (c_blunt * a_v + c_slender * (a_max - a_v)) * speed * v

    rotating = wnorm > _TINY
    w_hat = np.where(rotating, w / np.where(rotating, wnorm, 1.0), 0.0)
    i_d = np.linalg.norm(p["drag_moments"] * w_hat, axis=-1, keepdims=True)
    i_max = np.asarray(p["drag_moment_max"], dtype=float)[..., None]
    t_d = -rho * (c_ang * i_d + c_slender * (i_max - i_d)) * wnorm * w

    volume = np.asarray(p["volume"], dtype=float)[..., None]
    f_m = c_magnus * rho * volume * cross(w, v)

    v_par = _in_plane(v, p["thin_axis"])
    circ = cross(cross(v, v_par), v)
    f_k = c_kutta * rho * a_v * circ / np.where(moving, speed, 1.0)

    r_v = np.asarray(p["viscous_radius"], dtype=float)[..., None]
    f_v = -6.0 * np.pi * r_v * nu * v
    t_v = -8.0 * np.pi * r_v**3 * nu * w

    on = np.asarray(ellipsoid, dtype=float)[..., None]
    return WrenchTerms(
        f_added_mass=f_a,
        f_drag=f_d * on,
        f_magnus=f_m * on,
        f_kutta=f_k * on,
        f_viscous=f_v,
        t_added_mass=t_a,
        t_drag=t_d * on,
        t_viscous=t_v,
    )


def ellipsoid_wrench(bk: BodyKinematics, params, coeffs, env: Environment) -> Wrench:
    _check(bk)
    return wrench_terms(bk, params, coeffs, env, ellipsoid=True).total()


def inertia_box_wrench(bk: BodyKinematics, params, env: Environment) -> Wrench:
    _check(bk)
    return wrench_terms(bk, params, np.zeros(5), env, ellipsoid=False).total()


def body_kinematics(model, state: SimState, env: Environment, kin: Kinematics | None = None) -> BodyKinematics:
    """Body-frame air-relative kinematics of every body, shape (..., nb, 3).

    Accelerations combine ``state.prev_acceleration`` with the current
    velocity-product terms.
    """
    arr = as_arrays(model)
    kin = kin or kinematics(arr, state)
    wind = np.asarray(env.wind_velocity, dtype=float)[..., None, :]
    v_air = kin.vel - wind
    acc = np.einsum("...bkj,...j->...bk", kin.jac, state.accel()) + kin.bias_acc
    Rs = kin.R
    return BodyKinematics(
        velocity=rotate_inv(Rs, v_air),
        angular_velocity=rotate_inv(Rs, kin.omega),
        acceleration=rotate_inv(Rs, acc[..., 0:3] - cross(kin.omega, v_air)),
        angular_acceleration=rotate_inv(Rs, acc[..., 3:6]),
    )


def _model_params(arr):
    return dict(
        semi_axes=arr.semi_axes,
        added_mass=arr.added_mass,
        added_inertia=arr.added_inertia,
        volume=arr.volume,
        area_max=arr.area_max,
        drag_moments=arr.drag_moments,
        drag_moment_max=arr.drag_moment_max,
        viscous_radius=arr.viscous_radius,
        thin_axis=arr.thin_axis,
    )


def body_wrench_terms(model, state: SimState, env: Environment, kin: Kinematics | None = None) -> WrenchTerms:
    arr = as_arrays(model)
    kin = kin or kinematics(arr, state)
    bk = body_kinematics(arr, state, env, kin)
    return wrench_terms(bk, _model_params(arr), arr.coefficients, _broadcast_env(env), ellipsoid=arr.ellipsoid)


def _broadcast_env(env):
    # per-env density/viscosity arrays need a body axis
    rho = np.asarray(env.fluid_density, dtype=float)
    nu = np.asarray(env.kinematic_viscosity, dtype=float)
    if rho.ndim == 0 and nu.ndim == 0:
        return env
    return Environment(rho[..., None], nu[..., None], env.wind_velocity)


def body_wrenches(model, state: SimState, env: Environment, kin: Kinematics | None = None) -> Wrench:
    """Aerodynamic wrench of every body in its own CoM frame, shape (..., nb, 3)."""
    return body_wrench_terms(model, state, env, kin).total()


def project_wrenches(kin: Kinematics, wrenches: Wrench):
    """sum_i J_i^T F_i with ``wrenches`` in body or world frame."""
    f, t = wrenches.force, wrenches.torque
    if wrenches.frame == "body":
        f, t = rotate(kin.R, f), rotate(kin.R, t)
    elif wrenches.frame != "world":
        raise ValueError(f"unknown wrench frame {wrenches.frame!r}")
    return np.einsum("...bki,...bk->...i", kin.jac, np.concatenate([f, t], axis=-1))


def generalized_aero_force(model, state: SimState, wrenches: Wrench):
    """Map one wrench per body to generalized forces (11,)."""
    arr = as_arrays(model)
    nb = arr.mass.shape[-1]
    f = np.asarray(wrenches.force)
    t = np.asarray(wrenches.torque)
    if f.shape[-2:] != (nb, 3) or t.shape[-2:] != (nb, 3):
        raise ValueError(f"expected one wrench per body ({nb}, 3), got {f.shape} and {t.shape}")
    return project_wrenches(kinematics(arr, state), wrenches)


def export_terms_csv(terms: WrenchTerms, path, time=None) -> None:
    """Write a per-body, per-term wrench breakdown (body frame, N and N*m)."""
    cols = ["f_added_mass", "f_drag", "f_magnus", "f_kutta", "f_viscous", "t_added_mass", "t_drag", "t_viscous"]
    data = {c: np.asarray(getattr(terms, c)) for c in cols}
    lead = data["f_drag"].shape[:-2]
    nb = data["f_drag"].shape[-2]
    rows = np.prod(lead, dtype=int) if lead else 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        fh.write("# schema_version: 1; units: force N, torque N*m; frame: body\n")
        header = ["row", "time_s", "body"] + [f"{c}_{ax}" for c in cols for ax in "xyz"]
        w.writerow(header)
        for r in range(rows):
            idx = np.unravel_index(r, lead) if lead else ()
            t = "" if time is None else float(np.asarray(time).reshape(-1)[r])
            for b in range(nb):
                vals = [x for c in cols for x in data[c][idx + (b,)]]
                w.writerow([r, t, BODY_NAMES[b] if b < len(BODY_NAMES) else b] + [repr(float(x)) for x in vals])


@dataclass
class GlideResult:
    """Steady-glide measurements; fields are arrays when several poses are flown at once."""

    lift_to_drag: np.ndarray  # horizontal distance / height lost over the settled window
    speed: np.ndarray  # m/s, mean airspeed over the window
    sink_rate: np.ndarray  # m/s
    pitch: np.ndarray  # rad, mean body pitch
    steady: np.ndarray  # ratio agrees between the two halves of the window within 2 %
    pose: np.ndarray


def steady_glide(model, pose=None, initial_speed=3.6, duration=16.0, settle=8.0, env: Environment | None = None, dt=None) -> GlideResult:
    """Glide with every joint locked at ``pose`` (shape (5,) or (B, 5)) and measure the glide ratio."""
    from .dynamics import DEFAULT_DT, step
    from .model import GLIDE_POSE, N_JOINTS

    dt = dt or DEFAULT_DT
    env = env or Environment()
    pose = np.asarray(GLIDE_POSE if pose is None else pose, dtype=float)
    batch = pose.shape[:-1]
    locked = model.replace(locked_joints=tuple(range(N_JOINTS)))
    v0 = np.array([initial_speed, 0.0, -initial_speed / max(model.design_lift_to_drag, 1.0)])
    s = SimState.zeros(batch).replace(joint_positions=pose.copy(), base_linear_velocity=np.broadcast_to(v0, batch + (3,)).copy())
    n, k0 = int(round(duration / dt)), int(round(settle / dt))
    pos, vel, pitch = [], [], []
    tau = np.zeros(batch + (N_JOINTS,))
    with np.errstate(all="ignore"):
        for k in range(n):
            s = step(locked, s, tau, env, dt=dt, check=False)
            if k >= k0:
                pos.append(s.base_position)
                vel.append(s.base_linear_velocity)
                pitch.append(s.euler[..., 1])
        pos, vel = np.asarray(pos), np.asarray(vel)

        def ratio(p):
            drop = p[0, ..., 2] - p[-1, ..., 2]
            dist = np.linalg.norm(p[-1, ..., :2] - p[0, ..., :2], axis=-1)
            return np.where(drop > 0, dist / np.where(drop > 0, drop, 1.0), np.inf)

        half = len(pos) // 2
        r, r1, r2 = ratio(pos), ratio(pos[: half + 1]), ratio(pos[half:])
        ok = np.isfinite(r) & np.all(np.isfinite(pos), axis=(0, -1)) & (np.abs(r1 - r2) <= 0.02 * np.abs(r))
        return GlideResult(
            lift_to_drag=r,
            speed=np.mean(np.linalg.norm(vel - env.wind, axis=-1), axis=0),
            sink_rate=-np.mean(vel[..., 2], axis=0),
            pitch=np.mean(pitch, axis=0),
            steady=ok,
            pose=pose,
        )


TRIM_TAIL_ANGLES = tuple(np.round(np.linspace(-0.6, 0.6, 9), 3))


def trim_glide(model, tail_angles=TRIM_TAIL_ANGLES, base_pose=None, **kw) -> GlideResult:
    """Best steady glide over tail settings, the way an elevator trims a glider.

    Returns the scalar result for the steady trim with the highest glide ratio;
    ``steady`` is False when no tail setting glides steadily.
    """
    from .model import GLIDE_POSE

    base = np.asarray(GLIDE_POSE if base_pose is None else base_pose, dtype=float)
    poses = np.repeat(base[None], len(tail_angles), axis=0)
    poses[:, 4] = tail_angles
    g = steady_glide(model, poses, **kw)
    score = np.where(g.steady, g.lift_to_drag, -np.inf)
    i = int(np.argmax(score))
    return GlideResult(*(np.asarray(getattr(g, f.name))[i] for f in dataclasses.fields(GlideResult)))
