import numpy as np
import pytest
from conftest import pendulum_model, random_state
from scipy.spatial.transform import Rotation

from flapsim import dynamics as dyn
from flapsim.aero import Wrench, generalized_aero_force
from flapsim.model import N_DOF, N_JOINTS, SimState, build_default_model


def _moved(model, state, nu, eps):
    return dyn.integrate_positions(model, state, nu, eps)


def test_mass_matrix_symmetric_positive_definite(model, rng):
    M = dyn.mass_matrix(model, random_state(rng, (50,), model))
    assert M.shape == (50, N_DOF, N_DOF)
    np.testing.assert_allclose(M, np.swapaxes(M, -1, -2), atol=1e-15)
    assert np.linalg.eigvalsh(M).min() > 0


def test_translational_block_is_total_mass(model, rng):
    M = dyn.mass_matrix(model, random_state(rng, (), model))
    np.testing.assert_allclose(M[:3, :3], model.total_mass * np.eye(3), atol=1e-14)


def test_kinetic_energy_is_quadratic_form(model, rng):
    s = random_state(rng, (20,), model)
    M = dyn.mass_matrix(model, s)
    nu = s.velocity
    np.testing.assert_allclose(dyn.kinetic_energy(model, s), 0.5 * np.einsum("...i,...ij,...j", nu, M, nu), rtol=1e-12)


def test_jacobian_matches_finite_difference(model, rng):
    eps = 1e-6
    for _ in range(5):
        s = random_state(rng, (), model)
        nu = s.velocity
        kp = dyn.kinematics(model, _moved(model, s, nu, eps))
        km = dyn.kinematics(model, _moved(model, s, nu, -eps))
        k0 = dyn.kinematics(model, s)
        lin = (kp.com - km.com) / (2 * eps)
        for b in range(4):
            np.testing.assert_allclose(k0.jac[b, 0:3] @ nu, lin[b], rtol=1e-6, atol=1e-6)
            dR = kp.R[b] @ km.R[b].T
            omega = Rotation.from_matrix(dR).as_rotvec() / (2 * eps)
            np.testing.assert_allclose(k0.jac[b, 3:6] @ nu, omega, rtol=1e-6, atol=1e-6)
        body = dyn.body_jacobian(model, s, 1)
        np.testing.assert_allclose(body, k0.jac[1])


def test_velocity_product_acceleration_matches_finite_difference(model, rng):
    eps = 1e-6
    s = random_state(rng, (), model)
    nu = s.velocity
    Jp = dyn.kinematics(model, _moved(model, s, nu, eps)).jac
    Jm = dyn.kinematics(model, _moved(model, s, nu, -eps)).jac
    jdot_nu = np.einsum("bkj,j->bk", (Jp - Jm) / (2 * eps), nu)
    np.testing.assert_allclose(dyn.kinematics(model, s).bias_acc, jdot_nu, rtol=1e-5, atol=1e-5)


def test_mdot_minus_two_c_is_skew(model, rng):
    # qd^T (Mdot - 2C) qd = 0, with C qd = h - G
    eps = 1e-6
    for _ in range(10):
        s = random_state(rng, (), model)
        nu = s.velocity
        Mdot = (dyn.mass_matrix(model, _moved(model, s, nu, eps)) - dyn.mass_matrix(model, _moved(model, s, nu, -eps))) / (2 * eps)
        c_nu = dyn.bias_forces(model, s) - dyn.gravity_forces(model, s)
        lhs = nu @ Mdot @ nu
        assert abs(lhs - 2 * nu @ c_nu) <= 1e-6 * max(1.0, abs(lhs))


def test_forward_dynamics_satisfies_newton_euler_balance(model, rng):
    """Total linear and angular momentum rates equal the external loads."""
    g = dyn.GRAVITY
    s = random_state(rng, (), model)
    tau = rng.normal(0, 0.5, N_JOINTS)
    f = rng.normal(0, 1, (4, 3))
    t = rng.normal(0, 0.1, (4, 3))
    u = generalized_aero_force(model, s, Wrench(f, t, frame="world"))
    qdd = dyn.forward_dynamics(model, s, tau, u)
    kin = dyn.kinematics(model, s)
    arr = model.arrays
    acc = np.einsum("bkj,j->bk", kin.jac, qdd) + kin.bias_acc
    m = arr.mass[:, None]
    np.testing.assert_allclose((m * acc[:, 0:3]).sum(0), model.total_mass * g + f.sum(0), rtol=1e-10, atol=1e-10)
    Iw = dyn.world_inertia(arr, kin)
    w = kin.omega
    dL = np.cross(kin.com, m * acc[:, 0:3]) + np.einsum("bij,bj->bi", Iw, acc[:, 3:6]) + np.cross(w, np.einsum("bij,bj->bi", Iw, w))
    ext = np.cross(kin.com, m * g + f) + t
    np.testing.assert_allclose(dL.sum(0), ext.sum(0), rtol=1e-10, atol=1e-10)


def test_eom_residual_vanishes(model, rng):
    s = random_state(rng, (200,), model)
    tau = rng.normal(0, 1, (200, N_JOINTS))
    u = rng.normal(0, 1, (200, N_DOF))
    qdd = dyn.forward_dynamics(model, s, tau, u)
    res = dyn.eom_residual(model, s, qdd, tau, u)
    scale = np.abs(dyn.applied_forces(model, s, tau, u)).max() + np.abs(dyn.bias_forces(model, s)).max()
    assert np.abs(res).max() < 1e-12 * scale


def test_batched_matches_single(model, rng):
    s = random_state(rng, (4,), model)
    tau = rng.normal(0, 1, (4, N_JOINTS))
    batch = dyn.step(model, s, tau)
    for i in range(4):
        single = dyn.step(model, s.index(i), tau[i])
        np.testing.assert_allclose(batch.index(i).velocity, single.velocity, rtol=1e-13, atol=1e-13)


def test_linear_momentum_conserved_without_gravity(model, rng):
    s = random_state(rng, (), model).replace(prev_acceleration=np.zeros(N_DOF))
    p0 = dyn.linear_momentum(model, s)
    for k in range(500):
        tau = 0.05 * np.sin(0.1 * k + np.arange(N_JOINTS))
        s = dyn.step(model, s, tau, gravity=np.zeros(3))
    np.testing.assert_allclose(dyn.linear_momentum(model, s), p0, atol=1e-12 * max(1.0, np.abs(p0).max()))


def test_free_fall_com_is_ballistic(model):
    s = SimState.zeros()
    c0 = dyn.center_of_mass(model, s)
    n = 250
    for _ in range(n):
        s = dyn.step(model, s, np.zeros(N_JOINTS))
    t = n * dyn.DEFAULT_DT
    # semi-implicit Euler: z = -g dt^2 n (n + 1) / 2
    expected = c0[2] - 9.81 * dyn.DEFAULT_DT**2 * n * (n + 1) / 2
    assert dyn.center_of_mass(model, s)[2] == pytest.approx(expected, rel=1e-9)
    assert t == pytest.approx(1.0)


def centered_energy(model, states):
    """Energy with the velocity averaged across each step, which removes the first-order oscillation."""
    out = []
    for a, b in zip(states[:-1], states[1:]):
        mid = a.replace(
            base_linear_velocity=0.5 * (a.base_linear_velocity + b.base_linear_velocity),
            base_angular_velocity=0.5 * (a.base_angular_velocity + b.base_angular_velocity),
            joint_velocities=0.5 * (a.joint_velocities + b.joint_velocities),
        )
        out.append(dyn.kinetic_energy(model, mid) + dyn.potential_energy(model, a))
    return np.asarray(out)


def pendulum_drift(q0, seconds=10.0, roll=0.0):
    model = pendulum_model()
    s = SimState.zeros().replace(
        base_orientation=np.array([np.cos(roll / 2), np.sin(roll / 2), 0.0, 0.0]),
        joint_positions=np.asarray(q0, dtype=float),
    )
    states = [s]
    for _ in range(int(round(seconds / dyn.DEFAULT_DT))):
        s = dyn.step(model, s, np.zeros(N_JOINTS))
        states.append(s)
    energy = centered_energy(model, states)
    exchanged = np.ptp([dyn.potential_energy(model, x) for x in states])
    t = np.arange(len(energy)) * dyn.DEFAULT_DT
    slope = np.polyfit(t, energy, 1)[0]
    return abs(slope) / exchanged, abs(energy[-1] - energy[0]) / seconds / exchanged


@pytest.mark.parametrize("q0,roll", [((1.0, 0.0, -1.0, 0.0, 0.8), 0.0), ((0.5, 0.3, -0.4, 0.2, 0.3), 0.6)])
def test_pendulum_energy_drift(q0, roll):
    slope, end = pendulum_drift(q0, roll=roll)
    assert slope < 0.005 and end < 0.005


def test_damping_dissipates_energy():
    model = pendulum_model()
    damped = build_default_model(flap_limit=10.0, pitch_limit=10.0, tail_limit=10.0).replace(fixed_base=True)
    s0 = SimState.zeros().replace(joint_positions=np.array([1.0, 0.0, -1.0, 0.0, 0.8]))
    e = []
    for m in (model, damped):
        s = s0
        for _ in range(1000):
            s = dyn.step(m, s, np.zeros(N_JOINTS))
        e.append(dyn.kinetic_energy(m, s) + dyn.potential_energy(m, s))
    assert e[1] < e[0]


def test_locked_and_fixed_coordinates_do_not_move(rng):
    m = build_default_model().replace(fixed_base=True, locked_joints=(1, 3))
    s = random_state(rng, (), m)
    qdd = dyn.forward_dynamics(m, s, rng.normal(size=N_JOINTS))
    assert np.all(qdd[:6] == 0) and qdd[7] == 0 and qdd[9] == 0
    s1 = dyn.step(m, s, np.zeros(N_JOINTS))
    np.testing.assert_array_equal(s1.base_position, s.base_position)
    np.testing.assert_array_equal(s1.joint_positions[[1, 3]], s.joint_positions[[1, 3]])


def test_joint_limits_are_enforced(model):
    s = SimState.zeros().replace(joint_positions=np.array([1.0, 0.7, 1.0, 0.7, 0.7]), joint_velocities=np.full(N_JOINTS, 30.0))
    for _ in range(50):
        s = dyn.step(model, s, model.arrays.torque_limit)
    assert np.all(s.joint_positions <= model.arrays.upper + 1e-15)


def test_torques_are_clamped(model):
    big = np.full(N_JOINTS, 1e6)
    np.testing.assert_array_equal(dyn.clamp_torques(model, big), model.arrays.torque_limit)


def test_singular_mass_matrix_is_reported():
    m = build_default_model(total_mass=0.0)
    with pytest.raises(dyn.SingularMassMatrixError):
        dyn.forward_dynamics(m, SimState.zeros(), np.zeros(N_JOINTS))


def test_nonfinite_state_is_reported(model):
    with pytest.raises(dyn.NonFiniteStateError):
        dyn.step(model, SimState.zeros().replace(base_linear_velocity=np.array([np.nan, 0, 0])), np.zeros(N_JOINTS))


def test_body_jacobian_validates_arguments(model):
    s = SimState.zeros()
    with pytest.raises(IndexError):
        dyn.body_jacobian(model, s, 7)
    with pytest.raises(ValueError):
        dyn.body_jacobian(model, s, 0, frame="bogus")
    local = dyn.body_jacobian(model, s, 0, frame="local")
    np.testing.assert_allclose(local[3:6, 3:6], np.eye(3), atol=1e-15)


def test_step_is_deterministic(model, rng):
    s = random_state(rng, (3,), model)
    tau = rng.normal(size=(3, N_JOINTS))
    a, b = dyn.step(model, s, tau), dyn.step(model, s, tau)
    np.testing.assert_array_equal(a.velocity, b.velocity)
    np.testing.assert_array_equal(a.base_orientation, b.base_orientation)


def test_pd_step_torque_replays_through_step(model, rng):
    s = random_state(rng, (20,), model)
    target = rng.uniform(-1, 1, (20, N_JOINTS))
    new, tau = dyn.pd_step(model, s, target, 5.0, 0.1)
    assert np.all(np.abs(tau) <= model.arrays.torque_limit)
    again = dyn.step(model, s, tau)
    np.testing.assert_allclose(again.velocity, new.velocity, rtol=1e-9, atol=1e-9)


def test_pd_step_with_zero_gains_is_passive(model, rng):
    s = random_state(rng, (5,), model)
    new, tau = dyn.pd_step(model, s, rng.normal(size=(5, N_JOINTS)), 0.0, 0.0)
    assert not tau.any()
    np.testing.assert_array_equal(new.velocity, dyn.step(model, s, np.zeros(N_JOINTS)).velocity)


def test_saturated_servo_does_not_chatter(model):
    """A light link driven hard into its torque limit settles instead of flipping the torque each step."""
    s = SimState.zeros().replace(joint_velocities=np.array([0.0, 0.0, 0.0, 0.0, 30.0]))
    signs = []
    for _ in range(50):
        s, tau = dyn.pd_step(model, s, np.zeros(N_JOINTS), 5.0, 0.1, gravity=np.zeros(3))
        signs.append(np.sign(tau[4]))
        assert abs(s.joint_velocities[4]) <= 30.0
    assert np.count_nonzero(np.diff(signs[:10])) <= 2
    assert abs(s.joint_positions[4]) < 0.05 and abs(s.joint_velocities[4]) < 1.0
