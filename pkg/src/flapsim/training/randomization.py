"""Per-episode dynamics randomization."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ..aero import Environment
from ..model import N_BODIES, N_JOINTS, RobotModel


@dataclass(frozen=True)
class RandomizationConfig:
    """Uniform ranges; ratios and scales multiply, offsets and velocities add."""

    joint_damping_ratio: tuple = (0.9, 1.1)
    mass_inertia_scale: tuple = (0.9, 1.1)
    com_offset_m: tuple = (-0.05, 0.05)
    aero_coefficient_scale: tuple = (0.7, 1.3)
    added_mass_scale: tuple = (0.9, 1.1)
    wind_m_s: tuple = (2.0, 2.0, 1.5)  # symmetric half-widths per axis
    initial_position_m: float = 0.5
    initial_velocity_m_s: float = 0.5

    @classmethod
    def none(cls, initial_position_m=0.0, initial_velocity_m_s=0.0) -> "RandomizationConfig":
        return cls((1.0, 1.0), (1.0, 1.0), (0.0, 0.0), (1.0, 1.0), (1.0, 1.0), (0.0, 0.0, 0.0), initial_position_m, initial_velocity_m_s)

    @classmethod
    def initial_state_only(cls, initial_position_m=0.5, initial_velocity_m_s=0.5) -> "RandomizationConfig":
        return cls.none(initial_position_m, initial_velocity_m_s)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "RandomizationConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class RandomizationSample:
    joint_damping_ratio: np.ndarray  # (..., 5)
    mass_inertia_scale: np.ndarray  # (..., 4)
    com_offset: np.ndarray  # (..., 4, 3)
    aero_coefficient_scale: np.ndarray  # (..., 5), shared by all bodies
    added_mass_scale: np.ndarray  # (..., 4)
    wind: np.ndarray  # (..., 3)
    initial_position_offset: np.ndarray  # (..., 3)
    initial_velocity_offset: np.ndarray  # (..., 3)

    def index(self, i) -> "RandomizationSample":
        return RandomizationSample(*(np.asarray(getattr(self, f.name))[i] for f in dataclasses.fields(self)))


def sample_factors(config: RandomizationConfig, rng: np.random.Generator, size=()) -> RandomizationSample:
    """Draw ``size`` independent samples in a fixed order."""
    size = (size,) if np.isscalar(size) else tuple(size)

    def u(rng_, lohi, shape):
        return rng_.uniform(lohi[0], lohi[1], size + shape)

    half_wind = np.asarray(config.wind_m_s, dtype=float)
    return RandomizationSample(
        joint_damping_ratio=u(rng, config.joint_damping_ratio, (N_JOINTS,)),
        mass_inertia_scale=u(rng, config.mass_inertia_scale, (N_BODIES,)),
        com_offset=u(rng, config.com_offset_m, (N_BODIES, 3)),
        aero_coefficient_scale=u(rng, config.aero_coefficient_scale, (5,)),
        added_mass_scale=u(rng, config.added_mass_scale, (N_BODIES,)),
        wind=rng.uniform(-1.0, 1.0, size + (3,)) * half_wind,
        initial_position_offset=rng.uniform(-1.0, 1.0, size + (3,)) * config.initial_position_m,
        initial_velocity_offset=rng.uniform(-1.0, 1.0, size + (3,)) * config.initial_velocity_m_s,
    )


def apply_randomization(model: RobotModel, sample: RandomizationSample) -> RobotModel:
    """Return a copy of ``model`` with one sample applied (identity factors return an equal model)."""
    bodies = []
    for i, b in enumerate(model.bodies):
        s = float(sample.mass_inertia_scale[i])
        a = float(sample.added_mass_scale[i])
        fl = b.fluid
        fluid = dataclasses.replace(
            fl,
            added_mass=tuple((np.asarray(fl.added_mass) * a).tolist()),
            added_inertia=tuple((np.asarray(fl.added_inertia) * a).tolist()),
            coefficients=fl.coefficients.scaled(sample.aero_coefficient_scale),
        )
        bodies.append(
            dataclasses.replace(
                b,
                mass=b.mass * s,
                inertia=tuple(tuple(r) for r in (np.asarray(b.inertia) * s).tolist()),
                com=tuple((np.asarray(b.com) + sample.com_offset[i]).tolist()),
                fluid=fluid,
            )
        )
    joints = tuple(
        dataclasses.replace(j, damping=j.damping * float(sample.joint_damping_ratio[k])) for k, j in enumerate(model.joints)
    )
    return model.replace(bodies=tuple(bodies), joints=joints)


def sample_randomization(config: RandomizationConfig, seed, model: RobotModel | None = None, environment: Environment | None = None):
    """Return (randomized model, environment with wind, sample record)."""
    from ..model import build_default_model

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sample = sample_factors(config, rng)
    model = apply_randomization(model or build_default_model(), sample)
    env = environment or Environment()
    env = dataclasses.replace(env, wind_velocity=tuple((env.wind + sample.wind).tolist()))
    return model, env, sample
