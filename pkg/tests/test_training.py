import dataclasses
import json
import math

import numpy as np
import pytest
import torch

from flapsim.control import build_policy, load_checkpoint
from flapsim.model import SimState, build_default_model
from flapsim.spatial import euler_to_quat
from flapsim.trajectory import forward_flight, generate
from flapsim.training import ppo
from flapsim.training.env import EnvConfig, FlightEnv
from flapsim.training.randomization import (
    RandomizationConfig,
    apply_randomization,
    sample_factors,
    sample_randomization,
)
from flapsim.training.reward import (
    REWARD_WEIGHTS,
    EpisodeConfig,
    Termination,
    check_termination,
    combine,
    compute_reward,
    mechanical_power,
)
from flapsim.training.rollout import EpisodeLog, run_episode, zero_policy

NO_RANDOM = RandomizationConfig.none()


# reward ---------------------------------------------------------------------


def test_ideal_state_scores_085():
    rb = compute_reward(SimState.zeros(), np.zeros(3), power=0.0)
    assert rb.total == pytest.approx(0.85, abs=1e-15)


def test_far_from_target_scores_at_most_035():
    rb = compute_reward(SimState.zeros(), np.array([1e3, 0.0, 0.0]))
    assert rb.r_pos == 0.0 and rb.total == pytest.approx(0.35, abs=1e-15)


def test_roll_lowers_level_term():
    rolled = SimState.zeros().replace(base_orientation=euler_to_quat(np.array([np.pi / 2, 0.0, 0.0])))
    assert compute_reward(rolled, np.zeros(3)).r_level < compute_reward(SimState.zeros(), np.zeros(3)).r_level


def test_reward_weights_are_exact(rng):
    terms = rng.uniform(0, 1, (4, 1000))
    expected = sum(w * t for w, t in zip((0.5, 0.1, 0.2, 0.05), terms))
    assert np.abs(combine(*terms) - expected).max() <= 1e-15
    assert REWARD_WEIGHTS == (0.5, 0.1, 0.2, 0.05)


def test_reward_terms_are_bounded(rng):
    from conftest import random_state

    s = random_state(rng, (200,))
    rb = compute_reward(s, rng.normal(0, 2, (200, 3)), power=rng.uniform(0, 20, 200))
    for k in ("r_pos", "r_rates", "r_level", "r_energy"):
        v = getattr(rb, k)
        assert np.all((v >= 0) & (v <= 1))
    np.testing.assert_array_equal(rb.total, combine(rb.r_pos, rb.r_rates, rb.r_level, rb.r_energy))


def test_mechanical_power_is_absolute():
    assert mechanical_power([1.0, -2.0], [3.0, 1.0]) == 5.0


# termination ------------------------------------------------------------------


def _at(x=0.0, roll=0.0, pitch=0.0):
    return SimState.zeros().replace(
        base_position=np.array([x, 0.0, 0.0]), base_orientation=euler_to_quat(np.array([roll, pitch, 0.0]))
    )


def test_termination_reasons():
    assert check_termination(_at(3.01), np.zeros(3), 1) == Termination.POSITION
    assert check_termination(_at(2.99), np.zeros(3), 1) == Termination.CONTINUE
    assert check_termination(_at(roll=np.deg2rad(95)), np.zeros(3), 1) == Termination.ORIENTATION
    stage3 = EpisodeConfig(stage=3)
    flipped = SimState.zeros().replace(base_orientation=euler_to_quat(np.array([np.pi, np.deg2rad(60), np.pi])))  # pitch 120 deg
    assert check_termination(flipped, np.zeros(3), 1, stage3) == Termination.CONTINUE
    assert check_termination(flipped, np.zeros(3), 1) == Termination.ORIENTATION
    assert check_termination(_at(), np.zeros(3), 1500) == Termination.TIMEOUT
    assert check_termination(_at(), np.zeros(3), 1499) == Termination.CONTINUE
    nan = SimState.zeros().replace(base_linear_velocity=np.array([np.nan, 0, 0]))
    assert check_termination(nan, np.zeros(3), 1) == Termination.NONFINITE
    assert EpisodeConfig().max_steps == 1500


def test_termination_is_monotonic_in_error(rng):
    d = rng.normal(size=(500, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    r = rng.uniform(0, 6, 500)
    codes = check_termination(SimState.zeros((500,)).replace(base_position=d * r[:, None]), np.zeros(3), 1)
    terminated = r[codes == Termination.POSITION]
    alive = r[codes == Termination.CONTINUE]
    assert terminated.min() > alive.max()


# randomization ------------------------------------------------------------------


def test_randomization_stays_in_range():
    cfg = RandomizationConfig()
    s = sample_factors(cfg, np.random.default_rng(0), 100_000)
    for name, (lo, hi) in (
        ("joint_damping_ratio", cfg.joint_damping_ratio),
        ("mass_inertia_scale", cfg.mass_inertia_scale),
        ("com_offset", cfg.com_offset_m),
        ("aero_coefficient_scale", cfg.aero_coefficient_scale),
        ("added_mass_scale", cfg.added_mass_scale),
    ):
        v = getattr(s, name)
        assert v.min() >= lo and v.max() <= hi
        assert v.mean() == pytest.approx((lo + hi) / 2, abs=0.01 * (hi - lo) + 1e-3)
    assert np.all(np.abs(s.wind) <= np.array(cfg.wind_m_s))
    assert np.all(np.abs(s.initial_position_offset) <= 0.5) and np.all(np.abs(s.initial_velocity_offset) <= 0.5)


def test_mass_scale_statistics():
    s = sample_factors(RandomizationConfig(), np.random.default_rng(1), 10_000).mass_inertia_scale[:, 0]
    assert s.min() >= 0.9 and s.max() <= 1.1 and abs(s.mean() - 1.0) < 0.01


def test_zero_width_randomization_is_identity(model):
    m, env, sample = sample_randomization(NO_RANDOM, 3, model)
    assert m == model
    assert env.wind_velocity == (0.0, 0.0, 0.0)


def test_randomization_is_seeded_and_applied(model):
    a = sample_randomization(RandomizationConfig(), 7, model)
    b = sample_randomization(RandomizationConfig(), 7, model)
    assert a[0] == b[0] and a[1] == b[1]
    s = a[2]
    assert a[0].bodies[1].mass == pytest.approx(model.bodies[1].mass * s.mass_inertia_scale[1])
    assert a[0].bodies[2].fluid.coefficients.kutta_lift == pytest.approx(
        model.bodies[2].fluid.coefficients.kutta_lift * s.aero_coefficient_scale[3]
    )
    ident = dataclasses.replace(s, mass_inertia_scale=np.ones(4))
    assert apply_randomization(model, ident).bodies[0].mass == model.bodies[0].mass


# rollouts ------------------------------------------------------------------------------


def test_zero_policy_free_fall_terminates_on_position():
    log = run_episode(zero_policy, aero=False, randomization=NO_RANDOM, trajectory=generate(forward_flight(duration=30.0)))
    assert log.reason == "position"
    assert len(log) < 1500
    assert abs(log.duration - math.sqrt(2 * 3 / 9.81)) < 0.04
    assert len(log.rewards["total"]) == len(log) == len(log.actions)


def test_rollout_is_deterministic():
    policy = build_policy(seed=2)
    a = run_episode(policy, seed=5, deterministic=False, max_steps=60)
    b = run_episode(policy, seed=5, deterministic=False, max_steps=60)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.actions, b.actions)
    np.testing.assert_array_equal(a.rewards["total"], b.rewards["total"])


def test_episode_log_round_trip(tmp_path):
    log = run_episode(zero_policy, max_steps=20, seed=1)
    log.save_npz(tmp_path / "log.npz")
    back = EpisodeLog.load_npz(tmp_path / "log.npz")
    np.testing.assert_array_equal(back.joint_positions, log.joint_positions)
    assert back.reason == log.reason
    log.to_csv(tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().startswith("#")


def test_serial_mode_matches_batched(rng):
    cfg = EnvConfig(num_envs=3, randomization=RandomizationConfig())
    envs = [FlightEnv(dataclasses.replace(cfg, serial=s), seed=11) for s in (False, True)]
    obs = [e.reset() for e in envs]
    np.testing.assert_array_equal(obs[0], obs[1])
    for _ in range(30):
        a = rng.uniform(-1, 1, (3, 5))
        out = [e.step(a) for e in envs]
        np.testing.assert_allclose(out[0][0], out[1][0], rtol=1e-12, atol=1e-12)
        np.testing.assert_array_equal(out[0][2], out[1][2])


# PPO ------------------------------------------------------------------------------


def test_gae_matches_direct_sum(rng):
    T, N, gamma, lam = 12, 3, 0.97, 0.9
    r, v, nv = rng.normal(size=(3, T, N))
    done = (rng.uniform(size=(T, N)) < 0.2).astype(float)
    term = done * (rng.uniform(size=(T, N)) < 0.5)
    adv, ret = ppo.compute_gae(r, v, nv, term, done, gamma, lam)
    delta = r + gamma * nv * (1 - term) - v
    for n in range(N):
        for t in range(T):
            total, coef = 0.0, 1.0
            for k in range(t, T):
                total += coef * delta[k, n]
                if done[k, n]:
                    break
                coef *= gamma * lam
            assert adv[t, n] == pytest.approx(total, rel=1e-12, abs=1e-12)
    np.testing.assert_allclose(ret, adv + v)


def _frozen_minibatch(policy, rng, n=64):
    obs = torch.from_numpy(rng.normal(size=(n, policy.obs_size)))
    with torch.no_grad():
        mean, std, _ = policy(obs)
        actions = mean + std * torch.from_numpy(rng.normal(size=mean.shape))
        # old policy slightly off so some ratios are clipped
        old = ppo.gaussian_log_prob(mean, std, actions) + torch.from_numpy(rng.normal(0, 0.15, n))
    adv = torch.from_numpy(rng.normal(size=n))
    return obs, actions, old, adv


def test_clipped_surrogate_gradient_matches_finite_difference(rng):
    policy = build_policy(seed=4, hidden=(32, 32))
    obs, actions, old, adv = _frozen_minibatch(policy, rng)

    def loss():
        return ppo.clipped_surrogate(policy, obs, actions, old, adv, 0.2)

    policy.zero_grad()
    loss().backward()
    params = [p for p in policy.parameters() if p.grad is not None]
    eps = 1e-6
    checked = 0
    for p in params:
        flat = p.data.view(-1)
        grad = p.grad.view(-1)
        for i in rng.choice(flat.numel(), size=min(6, flat.numel()), replace=False):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = loss().item()
                flat[i] = orig - eps
                down = loss().item()
                flat[i] = orig
            fd = (up - down) / (2 * eps)
            g = grad[i].item()
            if abs(fd) < 1e-9 and abs(g) < 1e-9:
                continue
            assert abs(fd - g) / max(abs(fd), abs(g)) < 1e-4
            checked += 1
    assert checked >= 10


def _small_setup(lr, desired_kl=None):
    cfg = ppo.PPOConfig(learning_rate=lr, desired_kl=desired_kl, rollout_steps=8, hidden=(32, 32), epochs=2, minibatches=2)
    env = FlightEnv(EnvConfig(num_envs=2), seed=0)
    policy = build_policy(0, cfg.hidden, cfg.init_log_std)
    norm = ppo.RunningNorm(policy.obs_size)
    agent = ppo.Agent(policy, norm, seed=1)
    roll, _ = ppo.collect_rollout(env, agent, env.reset(), cfg.rollout_steps)
    return cfg, policy, norm, roll


def test_zero_learning_rate_leaves_weights_unchanged():
    cfg, policy, norm, roll = _small_setup(0.0)
    before = [p.detach().clone() for p in policy.parameters()]
    opt = torch.optim.Adam(policy.parameters(), lr=0.0)
    ppo.ppo_update(policy, opt, roll, norm, cfg, np.random.default_rng(0))
    for a, b in zip(before, policy.parameters()):
        assert torch.equal(a, b)


def test_update_changes_weights():
    cfg, policy, norm, roll = _small_setup(1e-3)
    before = [p.detach().clone() for p in policy.parameters()]
    opt = torch.optim.Adam(policy.parameters(), lr=1e-3)
    stats = ppo.ppo_update(policy, opt, roll, norm, cfg, np.random.default_rng(0))
    assert any(not torch.equal(a, b) for a, b in zip(before, policy.parameters()))
    assert {"surrogate", "value_loss", "approx_kl", "clip_fraction"} <= stats.keys()


def test_adaptive_learning_rate():
    p = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))
    opt = torch.optim.Adam([p], lr=1e-3)
    ppo._adapt_lr(opt, 0.1, 0.01)
    assert opt.param_groups[0]["lr"] == pytest.approx(1e-3 / 1.5)
    ppo._adapt_lr(opt, 0.001, 0.01)
    assert opt.param_groups[0]["lr"] == pytest.approx(1e-3)


def _tiny_train(tmp_path, name, **kw):
    cfg = ppo.PPOConfig(total_steps=2 * 16 * 3, rollout_steps=16, hidden=(16, 16), epochs=1, minibatches=2, **kw)
    env = EnvConfig(num_envs=3, serial=True)
    return ppo.train(env, cfg, run_dir=tmp_path / name)


def test_training_run_directory_and_metadata(tmp_path):
    res = _tiny_train(tmp_path, "a", normalize_advantages=False)
    run = res.run_dir
    meta = json.loads((run / "run_meta.json").read_text())
    assert meta["ppo"]["normalize_advantages"] is False
    assert len(meta["config_hash"]) == 16
    rows = [json.loads(x) for x in (run / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 2 and "terminations" in rows[0] and "mean_r_pos" in rows[0]
    assert (run / "checkpoints" / "stage1.npz").exists()
    policy, norm, m = load_checkpoint(run / "policy.npz")
    assert m["extra"]["steps"] == 96
    assert ppo.learning_curve(res.metrics).shape[1] == 3


def test_serial_training_is_reproducible(tmp_path):
    a = _tiny_train(tmp_path, "a")
    b = _tiny_train(tmp_path, "b")
    assert (a.run_dir / "metrics.jsonl").read_text() == (b.run_dir / "metrics.jsonl").read_text()
    for x, y in zip(a.policy.parameters(), b.policy.parameters()):
        assert torch.equal(x, y)


def test_divergence_is_reported(tmp_path, monkeypatch):
    def bad_loss(policy, batch, cfg):
        out = policy(batch["obs"])[0].sum() * float("nan")
        return out, {}

    monkeypatch.setattr(ppo, "ppo_loss", bad_loss)
    with pytest.raises(ppo.TrainingDiverged):
        _tiny_train(tmp_path, "d")
    assert (tmp_path / "d" / "checkpoints" / "diverged.npz").exists()


def test_config_round_trip():
    cfg = ppo.PPOConfig(hidden=(8, 8), stages=(1, 2))
    assert ppo.PPOConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_default_model_shared(model):
    assert model == build_default_model()
