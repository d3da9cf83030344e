import json

import numpy as np
import pytest

from flapsim.analysis import experiments as ex
from flapsim.analysis import periodic, sysid
from flapsim.training.rollout import zero_policy

# system identification --------------------------------------------------------


def test_round_trip_recovers_reference_denominator():
    u, y = sysid.synthesize(duration=60.0, seed=1)
    fit = sysid.fit_lti(u, y)
    rel = np.abs(fit.denominator - sysid.REFERENCE_DENOMINATOR) / np.abs(sysid.REFERENCE_DENOMINATOR)
    assert rel.max() < 0.01
    assert fit.denominator[0] == 1.0 and fit.numerators.shape == (3, 3)
    assert fit.mse < 1e-8 and not fit.poor_fit


def test_reported_mse_is_reproducible():
    u, y = sysid.synthesize(duration=40.0, seed=2, noise_std=0.01)
    fit = sysid.fit_lti(u, y)
    assert abs(sysid.heldout_mse(fit, u, y) - fit.mse) <= 1e-12


def test_pure_delay_is_flagged_poor():
    rng = np.random.default_rng(0)
    u = np.repeat(rng.standard_normal((700, 3)), 5, axis=0)[:3000]
    y = np.roll(u, 40, axis=0)
    y[:40] = 0.0
    assert sysid.fit_lti(u, y).poor_fit


def test_short_or_degenerate_data_rejected():
    u, y = sysid.synthesize(duration=10.0)
    with pytest.raises(sysid.IdentificationError):
        sysid.fit_lti(u, y)
    with pytest.raises(sysid.IdentificationError):
        sysid.fit_lti(np.zeros((3000, 3)), np.zeros((3000, 3)))


def test_reference_model_is_stable_and_minimum_phase():
    rep = sysid.classify(sysid.REFERENCE_NUMERATORS, sysid.REFERENCE_DENOMINATOR)
    assert rep.bibo_stable and all(rep.minimum_phase)
    np.testing.assert_allclose(np.real_if_close(np.poly(rep.poles)), sysid.REFERENCE_DENOMINATOR, rtol=1e-8)
    for num, z in zip(sysid.REFERENCE_NUMERATORS, rep.zeros):
        np.testing.assert_allclose(num[0] * np.real_if_close(np.poly(z)), num, rtol=1e-8)


def test_classification_examples():
    rep = sysid.classify([[1.0, 3.0, 2.0], [1.0, 0.0, -1.0]], np.poly([-1.0, -2.0, -3.0]))
    np.testing.assert_allclose(np.sort(rep.poles.real), [-3, -2, -1], atol=1e-12)
    assert rep.bibo_stable and rep.minimum_phase == [True, False]
    marginal = sysid.classify([[1.0, 1.0]], [1.0, 1.0, 0.0])  # pole at exactly zero
    assert not marginal.bibo_stable
    with pytest.raises(ValueError):
        sysid.polynomial_roots([0.0, 1.0, 2.0])


def test_fit_report_round_trip(tmp_path):
    u, y = sysid.synthesize(duration=40.0)
    fit = sysid.fit_lti(u, y)
    rep = sysid.poles_zeros_classify(fit)
    path = tmp_path / "fit.json"
    sysid.save_report(path, fit, rep, {"seed": 0})
    d = json.loads(path.read_text())
    assert d["pole_zero"]["bibo_stable"] is True
    back = sysid.TransferFunctionFit.from_dict(d["fit"])
    np.testing.assert_array_equal(back.denominator, fit.denominator)


# spectrum and phase portraits -----------------------------------------------------


def test_pure_tone_fundamental():
    t = np.arange(0, 10, 1 / 250)
    res = periodic.spectral_analysis(np.sin(2 * np.pi * 5.3 * t), 250.0)
    assert abs(res.fundamental_hz - 5.3) < 0.1
    assert res.energy_fraction > 0.95 and res.dominant


def test_white_noise_has_no_dominant_mode():
    x = np.random.default_rng(0).standard_normal(5000)
    res = periodic.spectral_analysis(x, 250.0)
    assert res.energy_fraction < 0.10 and not res.dominant


def test_spectrum_errors_and_parseval():
    with pytest.raises(ValueError):
        periodic.spectral_analysis(np.ones(1000), 250.0)
    with pytest.raises(ValueError):
        periodic.spectral_analysis(np.sin(np.arange(100)), 250.0)
    t = np.arange(0, 6, 1 / 250)
    x = np.sin(2 * np.pi * 5.3 * t) + 0.3 * np.sin(2 * np.pi * 11 * t)
    res = periodic.spectral_analysis(x, 250.0)
    # powers refer to the trailing whole-period window
    m = 2 * (len(res.freqs) - 1) + (len(res.power) - len(res.freqs))
    seg = x[-m:] - x[-m:].mean()
    assert res.total_power == pytest.approx(np.mean(seg**2), rel=1e-12)
    assert res.band_power(1, 20) <= res.total_power * (1 + 1e-12)


def test_sinusoid_orbit_is_closed():
    t = np.arange(0, 4, 1 / 250)
    w = 2 * np.pi * 5.3
    pp = periodic.phase_portrait(0.8 * np.sin(w * t), 0.8 * w * np.cos(w * t), 250.0)
    assert pp.closure < 1e-6 and pp.periodic
    assert pp.period == pytest.approx(1 / 5.3, rel=1e-6)
    assert pp.position_span == pytest.approx(1.6, rel=1e-3)


def test_larger_motion_gives_larger_orbit():
    t = np.arange(0, 4, 1 / 250)
    w = 2 * np.pi * 5.0
    small = periodic.phase_portrait(0.5 * np.sin(w * t), 0.5 * w * np.cos(w * t), 250.0)
    big = periodic.phase_portrait(0.9 * np.sin(w * t), 0.9 * w * np.cos(w * t), 250.0)
    assert big.position_span > small.position_span and big.velocity_span > small.velocity_span


def test_aperiodic_signal_is_flagged():
    rng = np.random.default_rng(1)
    t = np.arange(0, 4, 1 / 250)
    phase = 2 * np.pi * 5 * t + np.cumsum(rng.normal(0, 0.3, t.size))
    q = np.sin(phase) * (1 + 0.5 * rng.standard_normal(t.size).cumsum() / 50)
    pp = periodic.phase_portrait(q, np.gradient(q, t), 250.0, min_cycles=3)
    assert not pp.periodic
    with pytest.raises(ValueError):
        periodic.phase_portrait(np.sin(t), np.cos(t), 250.0)


# closed-loop experiments -------------------------------------------------------------


def test_excitation_offsets_are_bounded():
    spec = ex.ExcitationSpec(duration_s=20.0)
    traj, nominal = ex.excitation_trajectory(spec, np.random.default_rng(0))
    off = traj.positions - nominal
    assert np.abs(off).max() == pytest.approx(1.0, rel=1e-9)
    assert np.all(off[0] == 0.0)


def test_io_pairs_have_equal_lengths_and_round_trip(tmp_path):
    io = ex.collect_io_pairs(zero_policy, spec=ex.ExcitationSpec(duration_s=2.0, amplitude_m=0.2))
    assert io.u.shape == io.y.shape == (100, 3)
    io.to_csv(tmp_path / "io.csv")
    back = ex.IOPairs.from_csv(tmp_path / "io.csv")
    np.testing.assert_array_equal(back.u, io.u)
    np.testing.assert_array_equal(back.y, io.y)


def test_failed_excitation_is_discarded():
    # the zero policy cannot stay aloft for 20 s
    with pytest.raises(RuntimeError, match="terminated early"):
        ex.collect_io_pairs(zero_policy, spec=ex.ExcitationSpec(duration_s=20.0, max_attempts=2))


def test_sweep_table(tmp_path):
    assert ex.success_sweep(zero_policy, ex.SweepSpec(episodes=0)) == []
    spec = ex.SweepSpec.coefficient_sweep(3, [0.5, 1.0], episodes=2, duration_s=1.0)
    rows = ex.success_sweep(zero_policy, spec)
    assert [r["kutta_scale"] for r in rows] == [0.5, 1.0]
    assert all(0.0 <= r["success_rate"] <= 1.0 and r["episodes"] == 2 for r in rows)
    ex.write_table(rows, tmp_path / "sweep.csv", meta={"schema_version": 1})
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "# schema_version: 1" and lines[1].startswith("label,")
