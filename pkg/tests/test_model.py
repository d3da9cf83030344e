import numpy as np
import pytest

from flapsim import model as mdl
from flapsim.model import SimState, build_default_model, validate_model
from flapsim.spatial import euler_to_quat, quat_to_euler

MIRROR = np.diag([1.0, -1.0, 1.0])


def test_default_model_dimensions(model):
    assert len(model.bodies) == 4 and len(model.joints) == 5
    assert model.n_dof == 11
    assert model.total_mass == pytest.approx(0.31, abs=1e-12)
    assert model.total_wingspan == pytest.approx(0.995)
    assert model.mean_chord == pytest.approx(0.17)
    tags = [b.fluid.model for b in model.bodies]
    assert tags == ["inertia-box", "ellipsoid", "ellipsoid", "ellipsoid"]


def test_wing_span_and_thickness(model):
    wing = model.bodies[mdl.LEFT_WING]
    assert 4 * wing.fluid.semi_axes[1] == pytest.approx(0.995 - mdl.BODY_WIDTH)
    # elliptic planform area over span gives the mean chord
    span = 2 * wing.fluid.semi_axes[1]
    assert np.pi * wing.fluid.semi_axes[0] * wing.fluid.semi_axes[1] / span == pytest.approx(0.17)
    assert 2 * wing.fluid.semi_axes[2] == pytest.approx(0.05 * 0.17)


def test_wings_are_mirror_images(model):
    left, right = model.bodies[mdl.LEFT_WING], model.bodies[mdl.RIGHT_WING]
    np.testing.assert_allclose(MIRROR @ left.anchor, right.anchor)
    np.testing.assert_allclose(MIRROR @ left.com, right.com)
    np.testing.assert_allclose(MIRROR @ np.asarray(left.inertia) @ MIRROR, right.inertia)
    assert left.fluid == right.fluid
    for jl, jr in ((0, 2), (1, 3)):
        # axial vectors flip sign under reflection
        np.testing.assert_allclose(-MIRROR @ model.joints[jl].axis, model.joints[jr].axis)
        assert model.joints[jl].lower == model.joints[jr].lower


def test_default_model_is_valid(model):
    assert validate_model(model, mass_tolerance=1e-9) == []


def _with_body(model, k, **changes):
    bodies = list(model.bodies)
    bodies[k] = bodies[k].__class__(**{**bodies[k].__dict__, **changes})
    return model.replace(bodies=tuple(bodies))


def _with_joint(model, k, **changes):
    joints = list(model.joints)
    joints[k] = joints[k].__class__(**{**joints[k].__dict__, **changes})
    return model.replace(joints=tuple(joints))


def test_validation_reports_violations(model):
    assert any("mass" in p for p in validate_model(_with_body(model, 1, mass=-0.01)))
    assert any("axis" in p for p in validate_model(_with_joint(model, 0, axis=(1.0, 1.0, 0.0))))
    assert any("limits" in p for p in validate_model(_with_joint(model, 4, lower=0.5, upper=0.1)))
    bad = ((1.0, 0.0, 0.0), (0.0, -1.0, 0.0), (0.0, 0.0, 1.0))
    assert any("positive definite" in p for p in validate_model(_with_body(model, 3, inertia=bad)))
    asym = ((1.0, 0.1, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    assert any("symmetric" in p for p in validate_model(_with_body(model, 3, inertia=asym)))
    assert any("total mass" in p for p in validate_model(build_default_model(total_mass=0.4), mass_tolerance=0.01))


@pytest.mark.parametrize("scale", [0.8, 1.2])
def test_mass_redistribution_stays_valid(scale):
    fr = np.array(mdl.DEFAULT_MASS_FRACTIONS)
    fr[0] *= scale
    fr[1:] *= (1 - fr[0]) / fr[1:].sum()
    m = build_default_model(mass_fractions=tuple(fr))
    assert validate_model(m, mass_tolerance=1e-9) == []


def test_yaml_round_trip_is_exact(tmp_path, model):
    path = tmp_path / "model.yaml"
    varied = model.replace(locked_joints=(4,), fixed_base=True)
    mdl.save_model(varied, path)
    assert mdl.load_model(path) == varied
    assert "mass_kg" in path.read_text()


def test_euler_round_trip(rng):
    e = np.column_stack([rng.uniform(-np.pi, np.pi, 500), rng.uniform(-1.5, 1.5, 500), rng.uniform(-np.pi, np.pi, 500)])
    np.testing.assert_allclose(quat_to_euler(euler_to_quat(e)), e, atol=1e-9)


def test_state_vectors_and_normalization(rng):
    s = SimState.zeros((3,))
    assert s.q.shape == (3, 11) and s.velocity.shape == (3, 11)
    s = s.replace(base_orientation=np.tile([2.0, 0.0, 0.0, 0.0], (3, 1)))
    np.testing.assert_allclose(np.linalg.norm(s.normalized().base_orientation, axis=-1), 1.0)
    back = SimState.from_vectors(s.q, s.velocity)
    np.testing.assert_array_equal(back.q, s.q)
    np.testing.assert_array_equal(SimState.stack([s.index(i) for i in range(3)]).q, s.q)
