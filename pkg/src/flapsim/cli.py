"""Command-line entry point: ``flapsim <command> [--config FILE] [flags]``.

Every command writes into an output directory together with ``meta.json``
(command, seed, package version and the resolved configuration), which is
enough to rerun it.  The output directory is taken from ``--out``, then the
``FLAPSIM_OUT`` environment variable, then ``output_dir`` in the config.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__

log = logging.getLogger("flapsim")

COMMANDS = ("simulate", "train", "evaluate", "sysid", "sweep", "analyze", "export")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4
EXIT_INTERRUPTED = 130

OUT_ENV = "FLAPSIM_OUT"

SECTIONS = {
    "seed",
    "output_dir",
    "model_path",
    "trajectory_path",
    "trajectory",
    "policy_path",
    "episode",
    "environment",
    "reward",
    "randomization",
    "training",
    "evaluate",
    "sysid",
    "sweep",
    "analyze",
    "export",
}


class ConfigError(ValueError):
    pass


class CheckpointError(FileNotFoundError):
    pass


# configuration -------------------------------------------------------------


@dataclasses.dataclass
class RunConfig:
    """Resolved run configuration; ``raw`` is the validated mapping it came from."""

    raw: dict
    seed: int
    output_dir: Path
    base_dir: Path

    def section(self, name) -> dict:
        sec = self.raw.get(name) or {}
        if not isinstance(sec, dict):
            raise ConfigError(f"section '{name}' must be a mapping")
        return dict(sec)

    def path(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p


def load_config(path=None, seed=None, out=None, command="run") -> RunConfig:
    raw = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        base = path.resolve().parent
    unknown = set(raw) - SECTIONS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        s = int(seed if seed is not None else raw.get("seed", 0))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"seed must be an integer: {exc}") from exc
    out_dir = out or os.environ.get(OUT_ENV) or raw.get("output_dir") or f"runs/{command}"
    cfg = RunConfig(raw=raw, seed=s, output_dir=Path(out_dir), base_dir=base)
    for key in ("model_path", "trajectory_path"):
        if key in raw and not cfg.path(raw[key]).is_file():
            raise ConfigError(f"{key} does not exist: {raw[key]}")
    return cfg


def _build(cls, d: dict, name: str, convert=None):
    try:
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        if convert:
            d = convert(d)
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def _model(cfg: RunConfig):
    from .model import build_default_model, load_model

    if "model_path" in cfg.raw:
        try:
            return load_model(cfg.path(cfg.raw["model_path"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model file: {exc}") from exc
    return build_default_model()


def _trajectory_spec(cfg: RunConfig):
    from .trajectory import forward_flight, load_spec, spec_from_dict

    try:
        if "trajectory_path" in cfg.raw:
            return load_spec(cfg.path(cfg.raw["trajectory_path"]))
        if "trajectory" in cfg.raw:
            return spec_from_dict(cfg.section("trajectory"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid trajectory: {exc}") from exc
    return forward_flight(duration=_episode(cfg).duration_s)


def _trajectory(cfg: RunConfig):
    from .trajectory import POLICY_DT, generate

    try:
        return generate(_trajectory_spec(cfg), POLICY_DT)
    except ValueError as exc:
        raise ConfigError(f"invalid trajectory: {exc}") from exc


def _episode(cfg: RunConfig, stage=None):
    from .training.reward import EpisodeConfig

    ep = _build(EpisodeConfig, cfg.section("episode"), "episode")
    return dataclasses.replace(ep, stage=int(stage)) if stage is not None else ep


def _randomization(cfg: RunConfig):
    from .training.randomization import RandomizationConfig

    if "randomization" not in cfg.raw:
        return RandomizationConfig.initial_state_only()
    return _build(RandomizationConfig, cfg.section("randomization"), "randomization")


def _env_config(cfg: RunConfig, stage=None):
    from .control import PDGains
    from .training.env import EnvConfig
    from .training.reward import RewardConfig

    env = cfg.section("environment")
    gains = PDGains()
    kp = env.pop("pd_kp_n_m_per_rad", None)
    kd = env.pop("pd_kd_n_m_s_per_rad", None)
    try:
        if kp is not None or kd is not None:
            kp = gains.kp if kp is None else tuple(np.broadcast_to(np.asarray(kp, dtype=float), (5,)).tolist())
            kd = gains.kd if kd is None else tuple(np.broadcast_to(np.asarray(kd, dtype=float), (5,)).tolist())
            gains = PDGains(kp, kd)
    except ValueError as exc:
        raise ConfigError(f"invalid PD gains: {exc}") from exc
    reward = _build(RewardConfig, cfg.section("reward"), "reward")
    base = _build(EnvConfig, env, "environment")
    return dataclasses.replace(base, episode=_episode(cfg, stage), reward=reward, randomization=_randomization(cfg), gains=gains)


def _policy(cfg: RunConfig, flag=None, required=False):
    """(policy object, description).  ``zero`` selects the all-zero action policy."""
    from .control import load_checkpoint
    from .training.rollout import zero_policy

    ref = flag or cfg.raw.get("policy_path")
    if ref is None:
        if required:
            raise CheckpointError("no policy checkpoint given (use --policy or policy_path)")
        return zero_policy, "zero"
    if str(ref) == "zero":
        return zero_policy, "zero"
    p = Path(ref) if flag else cfg.path(ref)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    try:
        policy, norm, _ = load_checkpoint(p)
    except (KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"unreadable checkpoint {p}: {exc}") from exc
    return (policy, norm), str(p)


# artifacts ------------------------------------------------------------------


def _meta(cfg: RunConfig, command: str, extra=None) -> dict:
    return {
        "command": command,
        "seed": cfg.seed,
        "version": __version__,
        "config": _jsonable(cfg.raw),
        **(extra or {}),
    }


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, complex):
        return [x.real, x.imag]
    if isinstance(x, Path):
        return str(x)
    return x


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out(cfg: RunConfig) -> Path:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg.output_dir


# commands -------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, args) -> dict:
    from .training.rollout import run_episode

    policy, desc = _policy(cfg, args.policy)
    env_cfg = _env_config(cfg, args.stage)
    ep = run_episode(
        policy,
        _model(cfg),
        _trajectory(cfg),
        env_cfg.episode,
        seed=cfg.seed,
        randomization=env_cfg.randomization,
        aero=env_cfg.aero,
        record_substeps=True,
        env_config=env_cfg,
    )
    out = _out(cfg)
    ep.to_csv(out / "rollout.csv")
    ep.save_npz(out / "rollout.npz")
    summary = {
        "policy": desc,
        "termination": ep.reason,
        "steps": ep.steps,
        "duration_s": ep.duration,
        "mean_tracking_error_m": float(np.mean(ep.tracking_error())) if ep.steps else None,
    }
    _write_json(out / "meta.json", _meta(cfg, "simulate", {"result": summary}))
    return summary


def cmd_train(cfg: RunConfig, args) -> dict:
    from .training.ppo import PPOConfig, learning_curve, train

    tr = cfg.section("training")
    tr.setdefault("seed", cfg.seed)
    if args.seed is not None:
        tr["seed"] = cfg.seed
    if args.stage is not None:
        tr["stages"] = [int(args.stage)]
    ppo = _build(PPOConfig, tr, "training")
    out = _out(cfg)
    _write_json(out / "meta.json", _meta(cfg, "train", {"ppo": ppo.to_dict()}))
    result = train(_env_config(cfg), ppo, run_dir=out, model=_model(cfg), progress=_progress)
    _write_curve(out / "learning_curve.csv", learning_curve(result.metrics), ppo.seed)
    last = result.metrics[-1] if result.metrics else {}
    return {"updates": len(result.metrics), "steps": last.get("steps", 0), "checkpoint": str(out / "policy.npz")}


def _write_curve(path, curve, seed) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version: 1; seed: {seed}\n")
        w = csv.writer(fh)
        w.writerow(["steps", "mean_return", "mean_episode_length_steps"])
        w.writerows(curve.tolist())


def _progress(row):
    log.info("update %d steps %d return %s length %s", row["update"], row["steps"], row["mean_return"], row["mean_length"])


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    from .training.rollout import run_episode

    policy, desc = _policy(cfg, args.policy, required=True)
    ev = cfg.section("evaluate")
    episodes = int(args.episodes if args.episodes is not None else ev.get("episodes", 20))
    threshold = float(ev.get("survival_threshold_s", 10.0))
    env_cfg = _env_config(cfg, args.stage)
    traj = _trajectory(cfg)
    model = _model(cfg)
    rows = []
    for k in range(episodes):
        ep = run_episode(policy, model, traj, env_cfg.episode, seed=cfg.seed + k, randomization=env_cfg.randomization, env_config=env_cfg)
        err = ep.tracking_error()
        rows.append(
            {
                "episode": k,
                "seed": cfg.seed + k,
                "termination": ep.reason,
                "survival_s": ep.duration,
                "rms_tracking_error_m": float(np.sqrt(np.mean(err**2))) if len(err) else float("nan"),
                "final_error_m": float(err[-1]) if len(err) else float("nan"),
                "return": float(np.sum(ep.rewards["total"])),
            }
        )
    out = _out(cfg)
    with open(out / "evaluation.csv", "w", newline="") as fh:
        fh.write(f"# schema_version: 1; seed: {cfg.seed}; policy: {desc}\n")
        w = csv.DictWriter(fh, fieldnames=["episode", "seed", "termination", "survival_s", "rms_tracking_error_m", "final_error_m", "return"])
        w.writeheader()
        w.writerows(rows)
    surv = np.array([r["survival_s"] for r in rows])
    summary = {
        "policy": desc,
        "episodes": episodes,
        "mean_survival_s": float(surv.mean()) if episodes else None,
        "survival_threshold_s": threshold,
        "fraction_surviving": float(np.mean(surv >= threshold - 1e-9)) if episodes else None,
        "mean_rms_tracking_error_m": float(np.mean([r["rms_tracking_error_m"] for r in rows])) if episodes else None,
    }
    _write_json(out / "meta.json", _meta(cfg, "evaluate", {"result": summary}))
    return summary


def cmd_sysid(cfg: RunConfig, args) -> dict:
    from .analysis.experiments import ExcitationSpec, IOPairs, collect_io_pairs
    from .analysis.sysid import IdentificationError, fit_lti, poles_zeros_classify, save_report, synthesize

    sc = cfg.section("sysid")
    out = _out(cfg)
    source = None
    if "data_path" in sc:
        p = cfg.path(sc["data_path"])
        if not p.is_file():
            raise ConfigError(f"sysid data_path does not exist: {p}")
        pairs = IOPairs.from_csv(p)
        u, y, rate, source = pairs.u, pairs.y, pairs.sample_rate, str(p)
    elif sc.get("synthetic", False) or (args.policy is None and "policy_path" not in cfg.raw):
        rate = float(sc.get("sample_rate_hz", 50.0))
        u, y = synthesize(duration=float(sc.get("duration_s", 60.0)), sample_rate=rate, seed=cfg.seed, noise_std=float(sc.get("noise_std", 0.0)))
        source = "synthetic reference"
        t = np.arange(len(u)) / rate
        IOPairs(t, u, y, rate, cfg.seed).to_csv(out / "io_pairs.csv")
    else:
        policy, source = _policy(cfg, args.policy, required=True)
        spec = _build(ExcitationSpec, {"seed": cfg.seed, **sc.get("excitation", {})}, "sysid.excitation")
        pairs = collect_io_pairs(policy, _model(cfg), spec)
        pairs.to_csv(out / "io_pairs.csv")
        u, y, rate = pairs.u, pairs.y, pairs.sample_rate
    try:
        fit = fit_lti(u, y, sample_rate=rate, common_denominator=bool(sc.get("common_denominator", True)))
    except IdentificationError as exc:
        _write_json(out / "meta.json", _meta(cfg, "sysid", {"source": source, "error": str(exc)}))
        raise
    report = poles_zeros_classify(fit)
    save_report(out / "fit.json", fit, report, _meta(cfg, "sysid", {"source": source}))
    _write_json(out / "meta.json", _meta(cfg, "sysid", {"source": source}))
    return {"source": source, "bibo_stable": report.bibo_stable, "minimum_phase": report.minimum_phase, "mse": fit.mse}


def cmd_sweep(cfg: RunConfig, args) -> dict:
    from .analysis.experiments import SweepPoint, SweepSpec, success_sweep, write_table

    policy, desc = _policy(cfg, args.policy, required=True)
    sc = cfg.section("sweep")
    episodes = int(args.episodes if args.episodes is not None else sc.get("episodes", 100))
    try:
        if "coefficient_index" in sc:
            spec = SweepSpec.coefficient_sweep(int(sc["coefficient_index"]), sc.get("factors", [0.5, 0.75, 1.0, 1.25, 1.5]), episodes=episodes, seed=cfg.seed)
        else:
            pts = tuple(SweepPoint(str(p.get("label", f"p{i}")), tuple(p.get("coefficient_scale", (1.0,) * 5)), tuple(p.get("wind_m_s", (0.0, 0.0, 0.0)))) for i, p in enumerate(sc.get("points", [{"label": "nominal"}])))
            spec = SweepSpec(points=pts, episodes=episodes, seed=cfg.seed)
        spec = dataclasses.replace(
            spec,
            duration_s=float(sc.get("duration_s", spec.duration_s)),
            success_radius_m=float(sc.get("success_radius_m", spec.success_radius_m)),
            initial_state=_randomization(cfg) if "randomization" in cfg.raw else spec.initial_state,
        )
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"invalid 'sweep' section: {exc}") from exc
    rows = success_sweep(policy, spec, _model(cfg))
    out = _out(cfg)
    write_table(rows, out / "sweep.csv", meta={"schema_version": 1, "seed": cfg.seed, "policy": desc})
    _write_json(out / "meta.json", _meta(cfg, "sweep", {"policy": desc, "points": len(rows)}))
    return {"points": len(rows), "episodes": episodes}


def cmd_analyze(cfg: RunConfig, args) -> dict:
    from .analysis.periodic import phase_portrait, spectral_analysis
    from .control import SIM_RATE
    from .model import JOINT_NAMES
    from .training.rollout import EpisodeLog

    sc = cfg.section("analyze")
    out = _out(cfg)
    if "log_path" in sc:
        p = cfg.path(sc["log_path"])
        if not p.is_file():
            raise ConfigError(f"analyze log_path does not exist: {p}")
        ep = EpisodeLog.load_npz(p)
        source = str(p)
    else:
        sim_cfg = dataclasses.replace(cfg, output_dir=out / "rollout")
        cmd_simulate(sim_cfg, args)
        ep = EpisodeLog.load_npz(out / "rollout" / "rollout.npz")
        source = "simulate"
    if ep.substeps is not None and len(ep.substeps):
        q, qd, rate = ep.substeps[:, 0, :], ep.substeps[:, 1, :], SIM_RATE
    else:
        q, qd, rate = ep.joint_positions, ep.joint_velocities, 1.0 / ep.meta.get("dt", 0.02)
    joints = sc.get("joints", list(range(5)))
    fmin, fmax = float(sc.get("fmin_hz", 1.0)), float(sc.get("fmax_hz", 20.0))
    results = []
    for j in joints:
        row = {"joint": JOINT_NAMES[j]}
        try:
            spec = spectral_analysis(q[:, j], rate, fmin, fmax)
            row.update(fundamental_hz=spec.fundamental_hz, energy_fraction=spec.energy_fraction, dominant=spec.dominant)
            with open(out / f"spectrum_{JOINT_NAMES[j]}.csv", "w", newline="") as fh:
                fh.write(f"# schema_version: 1; seed: {cfg.seed}\n")
                w = csv.writer(fh)
                w.writerow(["frequency_hz", "power_rad2"])
                w.writerows(zip(spec.freqs.tolist(), spec.power.tolist()))
        except ValueError as exc:
            row["spectrum_error"] = str(exc)
        try:
            pp = phase_portrait(q[:, j], qd[:, j], rate)
            row.update(period_s=pp.period, cycles=pp.cycles, closure=pp.closure, periodic=pp.periodic, position_range_rad=pp.position_range, velocity_range_rad_s=pp.velocity_range)
            with open(out / f"phase_{JOINT_NAMES[j]}.csv", "w", newline="") as fh:
                fh.write(f"# schema_version: 1; seed: {cfg.seed}\n")
                w = csv.writer(fh)
                w.writerow(["q_rad", "qd_rad_s"])
                w.writerows(pp.orbit.tolist())
        except ValueError as exc:
            row["phase_error"] = str(exc)
        results.append(row)
    _write_json(out / "analysis.json", {"source": source, "sample_rate_hz": rate, "joints": results, "seed": cfg.seed, "version": __version__})
    _write_json(out / "meta.json", _meta(cfg, "analyze", {"source": source}))
    return {"joints": len(results)}


def cmd_export(cfg: RunConfig, args) -> dict:
    from .training.ppo import learning_curve
    from .training.rollout import EpisodeLog

    sc = cfg.section("export")
    if "input_path" not in sc:
        raise ConfigError("export needs 'input_path' in the export section")
    src = cfg.path(sc["input_path"])
    if not src.is_file():
        raise ConfigError(f"export input_path does not exist: {src}")
    out = _out(cfg)
    name = src.name
    if name.endswith(".npz") and "param/" not in " ".join(np.load(src).files):
        dest = out / (src.stem + ".csv")
        EpisodeLog.load_npz(src).to_csv(dest)
    elif name.endswith(".npz"):
        from .control import load_checkpoint

        try:
            policy, norm, meta = load_checkpoint(src)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"unreadable checkpoint {src}: {exc}") from exc
        dest = out / (src.stem + ".json")
        _write_json(dest, {"meta": meta, "parameters": {k: v.numpy() for k, v in policy.state_dict().items()}})
    elif name.endswith(".jsonl"):
        rows = [json.loads(line) for line in src.read_text().splitlines() if line.strip()]
        dest = out / (src.stem + ".csv")
        _write_curve(dest, learning_curve(rows), cfg.seed)
    elif name.endswith((".yaml", ".yml")):
        dest = out / (src.stem + ".json")
        _write_json(dest, yaml.safe_load(src.read_text()))
    elif name.endswith(".json"):
        dest = out / (src.stem + ".yaml")
        dest.write_text(yaml.safe_dump(json.loads(src.read_text()), sort_keys=True))
    else:
        raise ConfigError(f"do not know how to export {src.name}")
    _write_json(out / "meta.json", _meta(cfg, "export", {"input": str(src), "output": str(dest)}))
    return {"output": str(dest)}


HANDLERS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sysid": cmd_sysid,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flapsim", description="Flapping-wing robot simulation, training and analysis.")
    p.add_argument("command", choices=COMMANDS, help="what to run")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")
    p.add_argument("--stage", type=int, help="curriculum stage")
    p.add_argument("--episodes", type=int, help="episodes for evaluate and sweep")
    p.add_argument("--policy", help="policy checkpoint (.npz) or 'zero'")
    p.add_argument("--version", action="version", version=f"flapsim {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out, args.command)
        result = HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"flapsim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"flapsim: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except KeyboardInterrupt:
        print("flapsim: interrupted", file=sys.stderr)
        return EXIT_INTERRUPTED
    except Exception as exc:  # reported, not swallowed: nonzero exit
        log.debug("failure", exc_info=True)
        print(f"flapsim: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps(_jsonable(result), sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
