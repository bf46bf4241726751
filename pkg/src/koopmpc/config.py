"""Run configuration: one TOML file, strict keys, every key defaulted and documented."""

from __future__ import annotations

import copy
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import tomli_w

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class Key:
    default: Any
    unit: str
    help: str


SCHEMA: dict[str, dict[str, Key]] = {
    "plant": {
        "name": Key("column", "-", "registered plant: column, linear, vdp, cstr"),
        "params": Key({}, "-", "plant parameter overrides (table)"),
    },
    "sampling": {
        "n_steps": Key(60, "-", "number of random input steps in the excitation record"),
        "step_duration": Key(120.0, "min", "duration of each input step"),
        "dt": Key(2.0, "min", "sampling interval"),
        "substeps": Key(20, "-", "RK4 substeps per sampling interval"),
        "N": Key(20, "samples", "number of past outputs in the delay window"),
        "s": Key(60, "samples", "training trajectory length"),
        "stride": Key(10, "samples", "offset between consecutive training trajectories"),
        "train_fraction": Key(0.8, "-", "share of windows used for training"),
        "steady_windows": Key(True, "-", "add one steady trajectory per visited input level"),
        "embed_inputs": Key(False, "-", "append past inputs to the delay window"),
        "log_channels": Key("auto", "-", "channels scaled in log space; 'auto' or a list such as ['x1','y3']"),
    },
    "model": {
        "n_z": Key(10, "-", "latent dimension"),
        "encoder_hidden": Key([50, 20], "neurons", "encoder hidden layer widths"),
        "decoder_hidden": Key([20, 50], "neurons", "decoder hidden layer widths (ignored for linear)"),
        "decoder": Key("nonlinear", "-", "nonlinear (Wiener) or linear"),
        "structure": Key("diagonal", "-", "latent matrix: diagonal, dense or block_diagonal"),
        "a_init": Key([0.05, 0.995], "-", "range of the initial latent poles"),
        "decoder_bias": Key(True, "-", "output bias of the decoder"),
    },
    "training": {
        "epochs": Key(3000, "-", "Adam epochs"),
        "batch_size": Key(32, "windows", "mini-batch size"),
        "learning_rate": Key(1e-3, "-", "Adam step size"),
        "beta1": Key(0.9, "-", "Adam first-moment decay"),
        "beta2": Key(0.999, "-", "Adam second-moment decay"),
        "epsilon": Key(1e-8, "-", "Adam denominator offset"),
        "validation_every": Key(1, "epochs", "validation interval"),
        "clip_norm": Key(0.0, "-", "global gradient norm clip; 0 disables"),
        "multi_step_weight": Key(1.0, "-", "weight of the multi-step loss term"),
        "cosine_decay": Key(False, "-", "cosine learning-rate decay to zero"),
    },
    "mpc": {
        "horizon": Key(30, "samples", "control horizon (30 x 2 min = 60 min)"),
        "tracked": Key("y1", "-", "tracked channel"),
        "tracking_weight": Key(1.0, "-", "weight of the squared tracking error"),
        "move_weight": Key(0.0, "-", "weight of squared input moves"),
        "bounds": Key([{"channel": "y1", "lo": 0.1, "hi": 0.3}], "raw", "channel bounds [{channel, lo, hi}]"),
        "derived_bounds": Key([{"name": "impurity", "lo": 0.05, "hi": 0.15}], "raw",
                              "bounds on derived quantities [{name, lo, hi}]"),
        "max_iter": Key(500, "-", "solver iteration cap"),
        "tol": Key(1e-6, "-", "projected-gradient tolerance"),
        "penalty_initial": Key(1e2, "-", "initial bound penalty weight"),
        "penalty_growth": Key(10.0, "-", "penalty growth factor"),
        "penalty_max": Key(1e6, "-", "penalty weight cap"),
        "violation_tol": Key(1e-4, "scaled", "accepted bound violation"),
        "momentum": Key(0.5, "-", "heavy-ball momentum"),
    },
    "scenario": {
        "controller": Key("koopman_nmpc", "-", "koopman_nmpc, koopman_lmpc or ideal_nmpc"),
        "initial_input": Key([0.8, 1.0], "raw", "steady input the plant starts from"),
        "setpoint_times": Key([0.0, 30.0, 150.0, 210.0], "min", "times at which setpoints take effect"),
        "setpoints": Key([0.2, 0.25, 0.15, 0.2], "raw", "setpoint levels"),
        "duration": Key(240.0, "min", "closed-loop duration"),
        "inject_failure_at": Key([], "instants", "instants with an injected solver failure"),
        "benchmark_controllers": Key(["koopman_nmpc", "koopman_lmpc", "ideal_nmpc"], "-",
                                     "controllers compared by the benchmark command"),
        "test_profile": Key("random", "-", "open-loop test: 'random' steps on the test stream or fixed 'levels'"),
        "test_steps": Key(2, "-", "number of equally long random test steps"),
        "test_seed": Key(-1, "-", "seed of the random open-loop test; -1 uses the master seed"),
        "test_levels": Key([[0.8, 1.2], [0.9, 1.2]], "raw", "input levels of the 'levels' test (steps to the limits)"),
        "test_times": Key([0.0, 90.0], "min", "start times of the 'levels' test levels"),
        "test_duration": Key(180.0, "min", "open-loop test duration"),
    },
    "io": {
        "dataset": Key("", "path", "dataset directory read by train"),
        "checkpoint": Key("", "path", "checkpoint read by eval-openloop, run-mpc and benchmark"),
        "linear_checkpoint": Key("", "path", "linear-variant checkpoint for comparisons"),
        "resume": Key("", "path", "checkpoint to continue training from"),
    },
}

TOP_LEVEL = {
    "seed": Key(0, "-", "master seed"),
    "paper_scale": Key(False, "-", "use the full-size data and training settings"),
}

PAPER_SCALE = {
    ("sampling", "n_steps"): 400,
    ("sampling", "step_duration"): 180.0,
    ("training", "epochs"): 10000,
}


def defaults() -> dict:
    out = {k: copy.deepcopy(v.default) for k, v in TOP_LEVEL.items()}
    for sec, keys in SCHEMA.items():
        out[sec] = {k: copy.deepcopy(v.default) for k, v in keys.items()}
    return out


def _check_type(where: str, default, value):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str) or (where.endswith("log_channels") and isinstance(value, list))
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {type(value).__name__}")
    return float(value) if isinstance(default, float) else value


def resolve(raw: dict | None) -> dict:
    """Merge a parsed TOML document over the defaults, rejecting unknown keys."""
    raw = dict(raw or {})
    cfg = defaults()
    for key, value in raw.items():
        if key in TOP_LEVEL:
            cfg[key] = _check_type(key, TOP_LEVEL[key].default, value)
        elif key in SCHEMA:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            for sub, v in value.items():
                if sub not in SCHEMA[key]:
                    raise ConfigError(f"unknown key {key}.{sub}")
        else:
            raise ConfigError(f"unknown key or section {key!r}")
    if cfg["paper_scale"]:
        for (sec, k), v in PAPER_SCALE.items():
            cfg[sec][k] = v
    for sec in SCHEMA:
        for sub, v in raw.get(sec, {}).items():
            cfg[sec][sub] = _check_type(f"{sec}.{sub}", SCHEMA[sec][sub].default, v)
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    s = cfg["sampling"]
    if s["dt"] <= 0 or s["step_duration"] <= 0:
        raise ConfigError("sampling.dt and sampling.step_duration must be positive")
    if s["N"] < 0 or s["s"] < 2 or s["stride"] < 1 or s["n_steps"] < 1:
        raise ConfigError("sampling: need N >= 0, s >= 2, stride >= 1, n_steps >= 1")
    if cfg["model"]["decoder"] not in ("nonlinear", "linear"):
        raise ConfigError("model.decoder must be 'nonlinear' or 'linear'")
    if cfg["model"]["structure"] not in ("diagonal", "dense", "block_diagonal"):
        raise ConfigError("model.structure must be diagonal, dense or block_diagonal")
    sc = cfg["scenario"]
    if len(sc["setpoints"]) != len(sc["setpoint_times"]):
        raise ConfigError("scenario.setpoints and scenario.setpoint_times differ in length")
    if sc["test_profile"] not in ("random", "levels"):
        raise ConfigError("scenario.test_profile must be 'random' or 'levels'")
    if sc["test_steps"] < 1:
        raise ConfigError("scenario.test_steps must be >= 1")
    if len(sc["test_levels"]) != len(sc["test_times"]):
        raise ConfigError("scenario.test_levels and scenario.test_times differ in length")
    for b in cfg["mpc"]["bounds"]:
        if set(b) != {"channel", "lo", "hi"}:
            raise ConfigError("mpc.bounds entries need exactly channel, lo, hi")
    for b in cfg["mpc"]["derived_bounds"]:
        if set(b) != {"name", "lo", "hi"}:
            raise ConfigError("mpc.derived_bounds entries need exactly name, lo, hi")


def load(path: str | Path | None) -> dict:
    if path is None:
        return resolve({})
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return resolve(raw)


def dumps(cfg: dict) -> str:
    return tomli_w.dumps(cfg)


def freeze(cfg: dict, run_dir: str | Path) -> Path:
    """Write the resolved config next to the artifacts it produced."""
    d = Path(run_dir)
    d.mkdir(parents=True, exist_ok=True)
    p = d / "config.toml"
    p.write_text(dumps(cfg))
    return p


def help_text() -> str:
    lines = ["Configuration keys (TOML; section.key = default [unit]: meaning):", ""]
    for k, v in TOP_LEVEL.items():
        lines.append(f"  {k} = {v.default!r} [{v.unit}]: {v.help}")
    for sec, keys in SCHEMA.items():
        lines.append(f"  [{sec}]")
        for k, v in keys.items():
            lines.append(f"    {k} = {v.default!r} [{v.unit}]: {v.help}")
    lines.append("")
    lines.append("paper_scale = true sets " + ", ".join(f"{s}.{k}={v}" for (s, k), v in PAPER_SCALE.items())
                 + " unless given explicitly.")
    return "\n".join(lines)


# builders -------------------------------------------------------------------


def sampling_config(cfg: dict):
    from .sampling import SamplingConfig

    s = cfg["sampling"]
    log = None if s["log_channels"] == "auto" else tuple(s["log_channels"])
    return SamplingConfig(
        n_steps=s["n_steps"], step_duration=s["step_duration"], dt=s["dt"], substeps=s["substeps"], N=s["N"],
        s=s["s"], stride=s["stride"], train_fraction=s["train_fraction"], batch_size=cfg["training"]["batch_size"],
        steady_windows=s["steady_windows"], embed_inputs=s["embed_inputs"], log_channels=log,
    )


def model_spec(cfg: dict):
    from .training import ModelSpec

    m = cfg["model"]
    return ModelSpec(
        n_z=m["n_z"], encoder_hidden=tuple(m["encoder_hidden"]), decoder_hidden=tuple(m["decoder_hidden"]),
        decoder=m["decoder"], structure=m["structure"], a_init=tuple(m["a_init"]), decoder_bias=m["decoder_bias"],
    )


def train_config(cfg: dict):
    from .training import TrainConfig

    t = cfg["training"]
    return TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"], learning_rate=t["learning_rate"], beta1=t["beta1"],
        beta2=t["beta2"], epsilon=t["epsilon"], seed=cfg["seed"], validation_every=t["validation_every"],
        clip_norm=t["clip_norm"] or None, multi_step_weight=t["multi_step_weight"], cosine_decay=t["cosine_decay"],
    )


def solver_config(cfg: dict):
    from .mpc import SolverConfig

    m = cfg["mpc"]
    return SolverConfig(
        max_iter=m["max_iter"], tol=m["tol"], penalty_initial=m["penalty_initial"], penalty_growth=m["penalty_growth"],
        penalty_max=m["penalty_max"], violation_tol=m["violation_tol"], momentum=m["momentum"],
    )


def control_problem(cfg: dict, plant):
    from .closedloop import derived_bound
    from .mpc import ChannelBound, ControlProblem

    m = cfg["mpc"]
    bounds = [ChannelBound(b["channel"], float(b["lo"]), float(b["hi"])) for b in m["bounds"]]
    for b in m["derived_bounds"]:
        if b["name"] not in plant.derived:
            raise ConfigError(f"plant {plant.name!r} has no derived quantity {b['name']!r}")
        bounds.append(derived_bound(plant, b["name"], float(b["lo"]), float(b["hi"])))
    for b in bounds:
        if b.channel not in plant.channel_names:
            raise ConfigError(f"bound on unknown channel {b.channel!r}")
    if m["tracked"] not in plant.channel_names:
        raise ConfigError(f"unknown tracked channel {m['tracked']!r}")
    return ControlProblem(
        horizon=m["horizon"], tracked=m["tracked"], setpoints=np.zeros(m["horizon"]),
        input_bounds=plant.input_bounds, bounds=bounds, tracking_weight=m["tracking_weight"],
        move_weight=m["move_weight"],
    )


def scenario(cfg: dict, controller: str | None = None):
    from .closedloop import Scenario

    sc = cfg["scenario"]
    return Scenario(
        initial_input=np.asarray(sc["initial_input"], dtype=float),
        setpoint_times=[float(t) for t in sc["setpoint_times"]],
        setpoints=[float(v) for v in sc["setpoints"]],
        duration=sc["duration"], dt=cfg["sampling"]["dt"], controller=controller or sc["controller"],
        substeps=cfg["sampling"]["substeps"], inject_failure_at=tuple(sc["inject_failure_at"]),
    )


def openloop_test(cfg: dict, plant):
    """Input profile, initial steady input and duration of the open-loop test."""
    from .dynamics import InputProfile
    from .sampling import random_step_sequence

    sc = cfg["scenario"]
    u0 = np.asarray(sc["initial_input"], dtype=float)
    duration = float(sc["test_duration"])
    if sc["test_profile"] == "random":
        seed = cfg["seed"] if sc["test_seed"] < 0 else sc["test_seed"]
        n = sc["test_steps"]
        prof = random_step_sequence(plant.input_bounds, n, duration / n, seed, stream="test")
    else:
        prof = InputProfile(sc["test_times"], sc["test_levels"])
    return prof, u0, duration
