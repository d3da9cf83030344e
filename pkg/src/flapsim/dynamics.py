"""Floating-base multibody dynamics.

Equations of motion are assembled by projecting each body's Newton-Euler
equations through its CoM Jacobian::

    M(q) qdd + h(q, qd) = [0_6; tau] + u_aero,   h = C(q, qd) qd + G(q)
    M = sum_i J_i^T diag(m_i I, I_i) J_i
    h = sum_i J_i^T [m_i (Jdot_i qd - g); I_i alpha_i + w_i x I_i w_i]

where every quantity is expressed in the world frame.  All functions accept
states and models with leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import N_DOF, N_JOINTS, ModelArrays, RobotModel, SimState, as_arrays
from .spatial import axis_angle_matrix, cross, quat_integrate, quat_to_matrix, rotate, skew

GRAVITY = np.array([0.0, 0.0, -9.81])
DEFAULT_DT = 1.0 / 250.0


class SingularMassMatrixError(ValueError):
    pass


class NonFiniteStateError(FloatingPointError):
    pass


@dataclass
class Kinematics:
    R: np.ndarray  # (..., nb, 3, 3) body -> world
    origin: np.ndarray  # (..., nb, 3)
    com: np.ndarray  # (..., nb, 3) world CoM positions
    vel: np.ndarray  # (..., nb, 3) world CoM velocities
    omega: np.ndarray  # (..., nb, 3) world angular velocities
    jac: np.ndarray  # (..., nb, 6, 11) [linear; angular] world-frame CoM Jacobians
    bias_acc: np.ndarray  # (..., nb, 6) Jdot @ qd
    joint_axes: np.ndarray  # (..., 5, 3) world joint axes


_cross = cross


def kinematics(model, state: SimState) -> Kinematics:
    arr = as_arrays(model)
    nb = arr.mass.shape[-1]
    nj = arr.axis.shape[-2]
    R0 = quat_to_matrix(state.base_orientation)
    p0 = np.asarray(state.base_position, dtype=float)
    batch = np.broadcast_shapes(p0.shape[:-1], arr.mass.shape[:-1])
    qj = np.broadcast_to(state.joint_positions, batch + (nj,))
    qdj = np.broadcast_to(state.joint_velocities, batch + (nj,))

    R = np.empty(batch + (nb, 3, 3))
    origin = np.empty(batch + (nb, 3))
    com = np.empty(batch + (nb, 3))
    vel = np.empty(batch + (nb, 3))
    omega = np.empty(batch + (nb, 3))
    bias = np.empty(batch + (nb, 6))
    jac = np.zeros(batch + (nb, 6, N_DOF))
    zs = np.empty(batch + (nj, 3))
    o_vel = np.empty(batch + (nb, 3))
    o_acc = np.empty(batch + (nb, 3))
    alpha = np.empty(batch + (nb, 3))
    chain = []  # joints influencing each body, ancestors first

    for i, joints in enumerate(arr.body_joints):
        if i == 0:
            R[..., 0, :, :] = R0
            origin[..., 0, :] = p0
            o_vel[..., 0, :] = state.base_linear_velocity
            omega[..., 0, :] = rotate(R0, state.base_angular_velocity)
            o_acc[..., 0, :] = 0.0
            alpha[..., 0, :] = 0.0
            chain.append(())
        else:
            p = 0  # every default body hangs off the base
            d = rotate(R[..., p, :, :], arr.anchor[..., i, :])
            origin[..., i, :] = origin[..., p, :] + d
            wp = omega[..., p, :]
            o_vel[..., i, :] = o_vel[..., p, :] + _cross(wp, d)
            o_acc[..., i, :] = o_acc[..., p, :] + _cross(alpha[..., p, :], d) + _cross(wp, _cross(wp, d))
            Rc, wc, ac = R[..., p, :, :], wp, alpha[..., p, :]
            for j in joints:
                a = arr.axis[..., j, :]
                z = rotate(Rc, a)
                rate = qdj[..., j, None]
                ac = ac + _cross(wc, z) * rate
                wc = wc + z * rate
                Rc = Rc @ axis_angle_matrix(a, qj[..., j])
                zs[..., j, :] = z
            R[..., i, :, :] = Rc
            omega[..., i, :] = wc
            alpha[..., i, :] = ac
            chain.append(chain[p] + tuple((j, i) for j in joints))

        e = rotate(R[..., i, :, :], arr.com[..., i, :])
        w = omega[..., i, :]
        com[..., i, :] = origin[..., i, :] + e
        vel[..., i, :] = o_vel[..., i, :] + _cross(w, e)
        bias[..., i, 0:3] = o_acc[..., i, :] + _cross(alpha[..., i, :], e) + _cross(w, _cross(w, e))
        bias[..., i, 3:6] = alpha[..., i, :]

        jac[..., i, 0, 0] = jac[..., i, 1, 1] = jac[..., i, 2, 2] = 1.0
        r = com[..., i, :] - p0
        jac[..., i, 0:3, 3:6] = -skew(r) @ R0
        jac[..., i, 3:6, 3:6] = R0
        for j, owner in chain[i]:
            z = zs[..., j, :]
            jac[..., i, 0:3, 6 + j] = _cross(z, com[..., i, :] - origin[..., owner, :])
            jac[..., i, 3:6, 6 + j] = z

    return Kinematics(R=R, origin=origin, com=com, vel=vel, omega=omega, jac=jac, bias_acc=bias, joint_axes=zs)


def world_inertia(arr: ModelArrays, kin: Kinematics):
    return kin.R @ arr.inertia @ np.swapaxes(kin.R, -1, -2)


def _mass_matrix(arr, kin):
    Jv = kin.jac[..., 0:3, :]
    Jw = kin.jac[..., 3:6, :]
    Iw = world_inertia(arr, kin)
    M = np.einsum("...b,...bki,...bkj->...ij", arr.mass, Jv, Jv)
    M = M + np.einsum("...bki,...bkl,...blj->...ij", Jw, Iw, Jw)
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _bias(arr, kin, gravity):
    Iw = world_inertia(arr, kin)
    w = kin.omega
    lin = arr.mass[..., None] * (kin.bias_acc[..., 0:3] - np.asarray(gravity, dtype=float))
    ang = rotate(Iw, kin.bias_acc[..., 3:6]) + _cross(w, rotate(Iw, w))
    wrench = np.concatenate([lin, ang], axis=-1)
    return np.einsum("...bki,...bk->...i", kin.jac, wrench)


def mass_matrix(model, state: SimState):
    """Joint-space inertia matrix M(q), shape (..., 11, 11)."""
    arr = as_arrays(model)
    return _mass_matrix(arr, kinematics(arr, state))


def bias_forces(model, state: SimState, gravity=GRAVITY):
    """C(q, qd) qd + G(q), shape (..., 11)."""
    arr = as_arrays(model)
    return _bias(arr, kinematics(arr, state), gravity)


def gravity_forces(model, state: SimState, gravity=GRAVITY):
    return bias_forces(model, state.replace(
        base_linear_velocity=np.zeros_like(state.base_linear_velocity),
        base_angular_velocity=np.zeros_like(state.base_angular_velocity),
        joint_velocities=np.zeros_like(state.joint_velocities),
    ), gravity)


def body_jacobian(model, state: SimState, body_id: int, frame: str = "world"):
    """6x11 map from generalized velocity to the body's CoM [linear; angular] velocity.

    ``frame="local"`` expresses both rows in the body's own frame.
    """
    arr = as_arrays(model)
    nb = arr.mass.shape[-1]
    if not isinstance(body_id, (int, np.integer)) or not 0 <= body_id < nb:
        raise IndexError(f"invalid body id {body_id!r}")
    kin = kinematics(arr, state)
    J = kin.jac[..., body_id, :, :]
    if frame == "world":
        return J
    if frame == "local":
        Rt = np.swapaxes(kin.R[..., body_id, :, :], -1, -2)
        return np.concatenate([Rt @ J[..., 0:3, :], Rt @ J[..., 3:6, :]], axis=-2)
    raise ValueError(f"unknown frame {frame!r}")


def clamp_torques(model, joint_torques):
    arr = as_arrays(model)
    lim = arr.torque_limit
    return np.clip(joint_torques, -lim, lim)


def applied_forces(model, state: SimState, joint_torques, generalized_aero=None):
    """Right-hand side ``[0_6; tau - damping * qd_j] + u_aero`` (torques clamped)."""
    arr = as_arrays(model)
    tau = clamp_torques(arr, np.asarray(joint_torques, dtype=float)) - arr.damping * state.joint_velocities
    batch = np.broadcast_shapes(tau.shape[:-1], state.batch_shape)
    rhs = np.zeros(batch + (N_DOF,))
    rhs[..., 6:] = tau
    if generalized_aero is not None:
        rhs = rhs + generalized_aero
    return rhs


def _solve(arr, M, rhs):
    free = arr.free
    qdd = np.zeros(np.broadcast_shapes(M.shape[:-1], rhs.shape))
    if free.all():
        Mf, rf = M, rhs
    else:
        Mf = M[..., free, :][..., :, free]
        rf = rhs[..., free]
    try:
        sol = np.linalg.solve(Mf, rf[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularMassMatrixError("mass matrix is singular; the model is invalid") from exc
    qdd[..., free] = sol
    return qdd


def forward_dynamics(model, state: SimState, joint_torques, generalized_aero=None, gravity=GRAVITY):
    """Generalized acceleration solving M qdd + h = [0_6; tau] + u_aero.

    Locked coordinates (fixed base, locked joints) have zero acceleration.
    """
    arr = as_arrays(model)
    kin = kinematics(arr, state)
    M = _mass_matrix(arr, kin)
    h = _bias(arr, kin, gravity)
    rhs = applied_forces(arr, state, joint_torques, generalized_aero)
    return _solve(arr, M, rhs - h)


def eom_residual(model, state: SimState, qdd, joint_torques, generalized_aero=None, gravity=GRAVITY):
    """``M qdd + h - rhs`` restricted to the free coordinates."""
    arr = as_arrays(model)
    kin = kinematics(arr, state)
    res = np.einsum("...ij,...j->...i", _mass_matrix(arr, kin), qdd) + _bias(arr, kin, gravity)
    res = res - applied_forces(arr, state, joint_torques, generalized_aero)
    return res[..., arr.free]


def integrate_positions(model, state: SimState, velocity, dt):
    """Advance positions with generalized velocity ``velocity`` over ``dt`` (no clamping)."""
    arr = as_arrays(model)
    velocity = velocity * arr.free
    return state.replace(
        base_position=state.base_position + dt * velocity[..., 0:3],
        base_orientation=quat_integrate(state.base_orientation, velocity[..., 3:6], dt),
        joint_positions=state.joint_positions + dt * velocity[..., 6:],
        base_linear_velocity=velocity[..., 0:3],
        base_angular_velocity=velocity[..., 3:6],
        joint_velocities=velocity[..., 6:],
    )


def _prepare(model, state, environment, gravity):
    from . import aero

    arr = as_arrays(model)
    kin = kinematics(arr, state)
    M = _mass_matrix(arr, kin)
    h = _bias(arr, kin, gravity)
    u_aero = None
    if environment is not None:
        wrenches = aero.body_wrenches(arr, state, environment, kin)
        u_aero = aero.project_wrenches(kin, wrenches)
    damp = np.broadcast_to(arr.damping, np.broadcast_shapes(arr.damping.shape, state.joint_velocities.shape))
    return arr, kin, M, h, u_aero, damp


def _solve_with_diag(arr, M, diag, rhs):
    M = M.copy()
    idx = np.arange(6, N_DOF)
    M[..., idx, idx] += diag
    return _solve(arr, M, rhs)


def _integrate(arr, state, kin, qdd, rhs, dt, gravity, check):
    nu = (state.velocity + dt * qdd) * arr.free
    vlim = arr.velocity_limit
    nu[..., 6:] = np.clip(nu[..., 6:], -vlim, vlim)
    new = integrate_positions(arr, state, nu, dt)
    qj = new.joint_positions
    lo, hi = arr.lower, arr.upper
    qdj = new.joint_velocities
    qdj = np.where((qj <= lo) & (qdj < 0), 0.0, qdj)
    qdj = np.where((qj >= hi) & (qdj > 0), 0.0, qdj)
    new = new.replace(
        joint_positions=np.clip(qj, lo, hi),
        joint_velocities=qdj,
        time=state.time + dt,
        prev_acceleration=qdd,
    )
    if np.all(arr.free[:3]):
        # Base translation is cyclic: integrate total linear momentum directly
        # and recover the base velocity from it at the new configuration.
        m_tot = np.sum(arr.mass, axis=-1)[..., None]
        p_old = np.sum(arr.mass[..., None] * kin.vel, axis=-2)
        p_new = p_old + dt * (rhs[..., 0:3] + m_tot * np.asarray(gravity, dtype=float))
        rest = kinematics(arr, new.replace(base_linear_velocity=np.zeros_like(new.base_linear_velocity)))
        v = (p_new - np.sum(arr.mass[..., None] * rest.vel, axis=-2)) / m_tot
        new = new.replace(base_position=state.base_position + dt * v, base_linear_velocity=v)
    if check and not is_finite(new).all():
        raise NonFiniteStateError("simulation produced a non-finite state")
    return new


def step(
    model,
    state: SimState,
    joint_torques,
    environment=None,
    dt=DEFAULT_DT,
    gravity=GRAVITY,
    check=True,
):
    """Advance one step with semi-implicit Euler.

    Aerodynamic wrenches come from the pre-step state; ``environment=None``
    disables them.  The added-mass terms read ``state.prev_acceleration``.
    Joint positions are clamped to their limits (outward velocity removed)
    and the quaternion is renormalized.

    Joint damping is integrated implicitly.  With zero damping this is plain
    semi-implicit Euler, except that for a free base the linear velocity is
    recovered from the integrated total momentum so it is conserved to
    rounding.
    """
    arr, kin, M, h, u_aero, damp = _prepare(model, state, environment, gravity)
    rhs = applied_forces(arr, state, joint_torques, u_aero)
    qdd = _solve_with_diag(arr, M, dt * damp, rhs - h)
    return _integrate(arr, state, kin, qdd, rhs, dt, gravity, check)


def pd_step(
    model,
    state: SimState,
    joint_targets,
    kp,
    kd,
    environment=None,
    dt=DEFAULT_DT,
    gravity=GRAVITY,
    check=True,
):
    """Advance one step driven by joint PD servos; returns ``(state, torque)``.

    The servo torque is evaluated implicitly, ``tau = kp*(q* - q) - kd*qd -
    (dt*kd + dt^2*kp)*qdd``, so stiff gains on light links stay stable.  Joints
    whose implicit torque exceeds the limit are held at the limit with that
    sign and the system is re-solved.  Deciding saturation from the implicit
    torque avoids the bang-bang chatter an explicit clamp causes when the
    limit torque over one step overshoots the servo.  ``torque`` is the
    torque actually applied.
    """
    arr, kin, M, h, u_aero, damp = _prepare(model, state, environment, gravity)
    kp = np.asarray(kp, dtype=float)
    kd = np.asarray(kd, dtype=float)
    raw = kp * (np.asarray(joint_targets, dtype=float) - state.joint_positions) - kd * state.joint_velocities
    c = dt * kd + dt * dt * kp
    lim = arr.torque_limit
    base_rhs = applied_forces(arr, state, np.zeros_like(raw), u_aero) - h
    saturated = np.zeros(raw.shape, dtype=bool)
    sign = np.zeros(raw.shape)
    for _ in range(N_JOINTS + 1):
        applied = np.where(saturated, sign * lim, raw)
        rhs = base_rhs.copy()
        rhs[..., 6:] += applied
        qdd = _solve_with_diag(arr, M, dt * damp + c * ~saturated, rhs)
        tau = np.where(saturated, sign * lim, raw - c * qdd[..., 6:])
        over = ~saturated & (np.abs(tau) > lim)
        if not over.any():
            break
        sign = np.where(over, np.sign(tau), sign)
        saturated = saturated | over
    tau = np.clip(tau, -lim, lim)
    new = _integrate(arr, state, kin, qdd, rhs + h, dt, gravity, check)
    return new, tau


def is_finite(state: SimState):
    parts = [
        state.base_position,
        state.base_orientation,
        state.base_linear_velocity,
        state.base_angular_velocity,
        state.joint_positions,
        state.joint_velocities,
    ]
    return np.all(np.isfinite(np.concatenate(parts, axis=-1)), axis=-1)


def kinetic_energy(model, state: SimState):
    arr = as_arrays(model)
    kin = kinematics(arr, state)
    Iw = world_inertia(arr, kin)
    lin = 0.5 * arr.mass * np.sum(kin.vel**2, axis=-1)
    ang = 0.5 * np.einsum("...bi,...bij,...bj->...b", kin.omega, Iw, kin.omega)
    return np.sum(lin + ang, axis=-1)


def potential_energy(model, state: SimState, gravity=GRAVITY):
    arr = as_arrays(model)
    kin = kinematics(arr, state)
    return -np.sum(arr.mass * np.einsum("...bi,i->...b", kin.com, np.asarray(gravity, dtype=float)), axis=-1)


def linear_momentum(model, state: SimState):
    arr = as_arrays(model)
    kin = kinematics(arr, state)
    return np.sum(arr.mass[..., None] * kin.vel, axis=-2)


def center_of_mass(model, state: SimState):
    arr = as_arrays(model)
    kin = kinematics(arr, state)
    return np.sum(arr.mass[..., None] * kin.com, axis=-2) / np.sum(arr.mass, axis=-1)[..., None]
