import json

import numpy as np
import pytest
import torch

from flapsim import control
from flapsim.model import SimState, build_default_model
from flapsim.trajectory import forward_flight, generate


def measured_gain(freq_hz, n=2000, rate=control.POLICY_RATE):
    """Steady-state amplitude ratio of the filter driven by a sampled sinusoid."""
    f = control.LowPassFilter.zeros(size=1)
    t = np.arange(n) / rate
    u = np.sin(2 * np.pi * freq_hz * t)
    y = np.array([f(np.array([x]))[0] for x in u])
    tail = slice(n // 2, None)
    basis = np.column_stack([np.sin(2 * np.pi * freq_hz * t), np.cos(2 * np.pi * freq_hz * t)])[tail]
    coef, *_ = np.linalg.lstsq(basis, y[tail], rcond=None)
    return float(np.hypot(*coef))


def test_filter_coefficient():
    assert control.filter_coefficient() == pytest.approx(np.exp(-2 * np.pi * 7 / 50))


def test_filter_dc_gain_is_unity():
    f = control.LowPassFilter.zeros(size=1)
    for _ in range(200):
        y = f(np.array([0.7]))
    assert abs(y[0] / 0.7 - 1.0) < 1e-6


def test_filter_attenuation_at_cutoff():
    db = -20 * np.log10(measured_gain(7.0))
    assert abs(db - 3.0) < 0.5
    analytic = abs(control.LowPassFilter.zeros(size=1).frequency_response(7.0))
    assert measured_gain(7.0) == pytest.approx(analytic, rel=1e-6)


def test_filter_attenuation_monotonic_to_nyquist():
    gains = [measured_gain(f) for f in np.linspace(0.5, 24.5, 25)]
    assert np.all(np.diff(gains) < 0)


def test_filter_is_linear(rng):
    u1, u2 = rng.normal(size=(2, 40, 5))
    fa, fb, fc = (control.LowPassFilter.zeros() for _ in range(3))
    for a, b in zip(u1, u2):
        np.testing.assert_allclose(fc(a + b), fa(a) + fb(b), atol=1e-14)


def test_zero_action_settles_on_nominal_pose(model):
    f = control.LowPassFilter.zeros()
    f.state[:] = 0.5
    for _ in range(100):
        q = control.filter_and_scale(np.zeros(5), f, model)
    np.testing.assert_allclose(q, 0.0, atol=1e-12)


def test_action_range_maps_onto_joint_limits(model):
    f = control.LowPassFilter.zeros()
    for _ in range(200):
        q = control.filter_and_scale(np.full(5, 3.0), f, model)  # clamped to 1
    np.testing.assert_allclose(q, model.arrays.upper)
    np.testing.assert_allclose(control.action_scale(model), [np.pi / 3, np.pi / 4, np.pi / 3, np.pi / 4, np.pi / 4])


def test_pd_torque_and_clamp(model):
    g = control.PDGains()
    s = SimState.zeros().replace(joint_positions=np.full(5, 0.1), joint_velocities=np.full(5, 1.0))
    np.testing.assert_allclose(control.pd_torque(np.full(5, 0.3), s, g), 5.0 * 0.2 - 0.1 * 1.0)
    tau = control.pd_torque(np.full(5, 100.0), s, g, model)
    np.testing.assert_allclose(tau, model.arrays.torque_limit)
    with pytest.raises(ValueError):
        control.PDGains(kp=(-1.0,) * 5)


def test_observation_layout(model):
    assert control.FRAME_SIZE == 18
    assert control.OBS_SIZE == 25 * 18 + 30 * 3
    traj = generate(forward_flight(duration=3.0))
    s = SimState.zeros().replace(base_linear_velocity=np.array([3.8, 0.0, 0.0]))
    hist = control.FrameHistory()
    obs = control.build_observation(s, np.zeros(3), traj, 0.0, hist, np.zeros(5))
    assert obs.shape == (control.OBS_SIZE,)
    frame = obs[24 * 18 : 25 * 18]
    np.testing.assert_allclose(frame[:4], [1, 0, 0, 0])
    assert frame[12] == pytest.approx(3.8)  # pitot airspeed
    look = obs[450:].reshape(30, 3)
    np.testing.assert_allclose(look[:, 0], 3.8 * 0.02 * np.arange(1, 31), rtol=1e-12)
    assert not obs[: 24 * 18].any()
    with pytest.raises(ValueError):
        control.build_observation(s, np.zeros(3), None, 0.0, hist, np.zeros(5))


def test_pitot_velocity_uses_air_relative_body_x():
    yaw = np.pi / 2
    s = SimState.zeros().replace(
        base_orientation=np.array([np.cos(yaw / 2), 0, 0, np.sin(yaw / 2)]),
        base_linear_velocity=np.array([0.0, 4.0, 0.0]),
    )
    assert control.pitot_velocity(s, wind=np.array([0.0, -1.0, 0.0])) == pytest.approx(5.0)


def test_quaternion_sign_is_canonical():
    q = np.array([-0.5, 0.5, 0.5, 0.5])
    s = SimState.zeros().replace(base_orientation=q)
    frame = control.observation_frame(s, np.zeros(3), np.zeros(5))
    np.testing.assert_allclose(frame[:4], -q)


def test_frame_history_oldest_first():
    h = control.FrameHistory(length=3, frame_size=1)
    for v in (1.0, 2.0, 3.0, 4.0):
        h.push(np.array([v]))
    np.testing.assert_array_equal(h.flat(), [2.0, 3.0, 4.0])


def test_running_norm_matches_batch_statistics(rng):
    x = rng.normal(3.0, 2.0, (1000, 4))
    n = control.RunningNorm(4)
    for chunk in np.array_split(x, 7):
        n.update(chunk)
    np.testing.assert_allclose(n.mean, x.mean(0), rtol=1e-9)
    np.testing.assert_allclose(n.var, x.var(0), rtol=1e-6)
    z = n.normalize(x, clip=False)
    np.testing.assert_allclose(n.denormalize(z), x)
    m = control.RunningNorm(4)
    m.load_state_dict(n.state_dict())
    np.testing.assert_array_equal(m.normalize(x), n.normalize(x))


def test_policy_outputs(rng):
    p = control.build_policy(seed=3)
    obs = rng.normal(size=(7, control.OBS_SIZE))
    mean, std, value = control.policy_forward(obs, p)
    assert mean.shape == (7, 5) and value.shape == (7,)
    assert np.all(np.abs(mean) <= 1.0)
    assert np.abs(mean).max() < 0.2  # small final layer
    np.testing.assert_allclose(std, np.exp(-0.5))
    with pytest.raises(ValueError):
        p(torch.zeros(3, 10, dtype=torch.float64))


def test_policy_init_is_seeded(rng):
    obs = rng.normal(size=(2, control.OBS_SIZE))
    a = control.policy_forward(obs, control.build_policy(seed=5))[0]
    b = control.policy_forward(obs, control.build_policy(seed=5))[0]
    c = control.policy_forward(obs, control.build_policy(seed=6))[0]
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_lipschitz_bound_holds(rng):
    p = control.build_policy(seed=0)
    lip_actor, _ = p.lipschitz_bound()
    x = rng.normal(size=(50, control.OBS_SIZE))
    y = x + 1e-3 * rng.normal(size=x.shape)
    mx, my = control.policy_forward(x, p)[0], control.policy_forward(y, p)[0]
    ratio = np.linalg.norm(mx - my, axis=-1) / np.linalg.norm(x - y, axis=-1)
    assert np.all(ratio <= lip_actor)


def test_checkpoint_round_trip(tmp_path, rng):
    p = control.build_policy(seed=1)
    norm = control.RunningNorm(control.OBS_SIZE)
    norm.update(rng.normal(size=(20, control.OBS_SIZE)))
    path = tmp_path / "policy.npz"
    control.save_checkpoint(path, p, norm, config={"a": 1}, extra={"steps": 9})
    q, norm2, meta = control.load_checkpoint(path)
    obs = rng.normal(size=(3, control.OBS_SIZE))
    np.testing.assert_array_equal(control.policy_forward(obs, p, norm)[0], control.policy_forward(obs, q, norm2)[0])
    assert meta["extra"] == {"steps": 9} and meta["config_hash"] == control.config_hash({"a": 1})


def test_checkpoint_version_checked(tmp_path):
    path = tmp_path / "bad.npz"
    meta = np.frombuffer(json.dumps({"version": 99}).encode(), dtype=np.uint8)
    np.savez(path, meta=meta)
    with pytest.raises(ValueError):
        control.load_checkpoint(path)


def test_clamp_action():
    np.testing.assert_array_equal(control.clamp_action([-3.0, 0.5, 2.0]), [-1.0, 0.5, 1.0])


def test_model_fixture_matches_default(model):
    assert model == build_default_model()
