"""Plant-in-the-loop control runs, solver timing comparison and open-loop model tests."""

from __future__ import annotations

import io
import math
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import InputProfile, PlantModel, rk4_step, simulate, steady_state
from .errors import ConfigError, DivergenceError, NumericalError, SolverFailure
from .model import KoopmanModel
from .mpc import (
    ChannelBound,
    ControlProblem,
    MpcSolution,
    SolverConfig,
    ideal_nmpc_solve,
    koopman_lmpc_solve,
    solve_mpc,
)
from .sampling import ScalingSpec

CONTROLLERS = ("koopman_nmpc", "koopman_lmpc", "ideal_nmpc")


@dataclass
class Scenario:
    """Piecewise-constant setpoint schedule; ``setpoints[i]`` holds from ``setpoint_times[i]``."""

    initial_input: np.ndarray
    setpoint_times: list[float]
    setpoints: list[float]
    duration: float = 240.0
    dt: float = 2.0
    controller: str = "koopman_nmpc"
    substeps: int = 20
    inject_failure_at: tuple[int, ...] = ()

    def __post_init__(self):
        self.initial_input = np.asarray(self.initial_input, dtype=float)
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"unknown controller {self.controller!r}")
        if len(self.setpoint_times) != len(self.setpoints) or not self.setpoints:
            raise ConfigError("setpoint_times and setpoints must be equally long and non-empty")
        if self.setpoint_times[0] > 0:
            raise ConfigError("setpoint schedule must start at t=0")

    @property
    def n_instants(self) -> int:
        return int(round(self.duration / self.dt)) + 1

    def setpoint_at(self, t: float) -> float:
        i = int(np.searchsorted(self.setpoint_times, t + 1e-9, side="right")) - 1
        return float(self.setpoints[max(i, 0)])

    def preview(self, t: float, horizon: int) -> np.ndarray:
        """Anticipated setpoints for the predicted samples ``t+dt .. t+horizon*dt``."""
        return np.array([self.setpoint_at(t + (j + 1) * self.dt) for j in range(horizon)])


def default_scenario(controller: str = "koopman_nmpc", initial_input=(0.8, 1.0)) -> Scenario:
    """Four-level distillate schedule over 4 h: mid, up, below start, back to mid."""
    return Scenario(
        initial_input=np.asarray(initial_input, dtype=float),
        setpoint_times=[0.0, 30.0, 150.0, 210.0],
        setpoints=[0.2, 0.25, 0.15, 0.2],
        duration=240.0,
        dt=2.0,
        controller=controller,
    )


def derived_bound(plant: PlantModel, name: str, lo: float, hi: float) -> ChannelBound:
    """Turn a bound on a derived quantity (``offset + scale * channel``) into a channel bound."""
    idx, offset, scale = plant.derived[name]
    a, b = (lo - offset) / scale, (hi - offset) / scale
    channel = plant.channel_names[idx]
    return ChannelBound(channel, min(a, b), max(a, b))


def default_problem(plant: PlantModel, horizon: int = 30, impurity=(0.05, 0.15), distillate=(0.1, 0.3)) -> ControlProblem:
    """Distillate tracking with box bounds on distillate and on the unmeasured impurity."""
    if plant.name != "column":
        raise ConfigError("default_problem is defined for the column plant")
    return ControlProblem(
        horizon=horizon,
        tracked="y1",
        setpoints=np.full(horizon, 0.2),
        input_bounds=plant.input_bounds,
        bounds=[
            ChannelBound("y1", *distillate),
            derived_bound(plant, "impurity", *impurity),
        ],
    )


@dataclass
class ClosedLoopLog:
    n_x: int
    n_u: int
    n_y: int
    k: list[int] = field(default_factory=list)
    t: list[float] = field(default_factory=list)
    y: list[np.ndarray] = field(default_factory=list)
    u: list[np.ndarray] = field(default_factory=list)
    x: list[np.ndarray] = field(default_factory=list)
    yhat: list[np.ndarray] = field(default_factory=list)
    solve_ms: list[float] = field(default_factory=list)
    iters: list[int] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    violation: list[float] = field(default_factory=list)
    held: list[int] = field(default_factory=list)
    setpoint: list[float] = field(default_factory=list)
    buffers: list[np.ndarray] = field(default_factory=list)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "y": np.array(self.y), "u": np.array(self.u), "x": np.array(self.x),
            "yhat": np.array(self.yhat), "t": np.array(self.t), "setpoint": np.array(self.setpoint),
        }

    def to_csv(self, path: str | Path | None = None, include_timing: bool = True) -> str:
        cols = (
            ["k", "t"]
            + [f"y{i + 1}" for i in range(self.n_y)]
            + [f"u{i + 1}" for i in range(self.n_u)]
            + [f"x{i + 1}" for i in range(self.n_x)]
            + [f"yhat{i + 1}" for i in range(self.n_y)]
            + (["solve_ms"] if include_timing else [])
            + ["iters", "objective", "violation", "held_flag"]
        )
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        g = lambda v: format(float(v), ".17g")  # noqa: E731
        for i in range(len(self.k)):
            row = [str(self.k[i]), g(self.t[i])]
            row += [g(v) for v in self.y[i]] + [g(v) for v in self.u[i]]
            row += [g(v) for v in self.x[i]] + [g(v) for v in self.yhat[i]]
            if include_timing:
                row.append(g(self.solve_ms[i]))
            row += [str(self.iters[i]), g(self.objective[i]), g(self.violation[i]), str(self.held[i])]
            buf.write(",".join(row) + "\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


@dataclass
class ControllerSetup:
    """Everything a controller needs besides the measurements."""

    problem: ControlProblem
    solver: SolverConfig = field(default_factory=SolverConfig)
    scaling: ScalingSpec | None = None


def _solve_once(kind, plant, model, setup, chi_or_x, problem, warm, u_hold, scenario):
    if kind == "koopman_nmpc":
        return solve_mpc(model, chi_or_x, problem, warm, setup.solver, u_hold)
    if kind == "koopman_lmpc":
        return koopman_lmpc_solve(model, chi_or_x, problem, warm, setup.solver, u_hold)
    scaling = setup.scaling or (model.scaling if model is not None else None)
    return ideal_nmpc_solve(plant, chi_or_x, problem, setup.solver, scaling, scenario.dt, scenario.substeps, warm, u_hold)


def run_closed_loop(plant: PlantModel, model: KoopmanModel | None, scenario: Scenario, setup: ControllerSetup,
                    seed: int = 0) -> ClosedLoopLog:
    """Measure, update the delay buffer, solve, apply the first move, repeat.

    The plant starts at the steady state of ``scenario.initial_input``; for
    Koopman controllers ``N+1`` warm-up samples at that input fill the buffer
    first.  A failed solve holds the previous input and sets ``held_flag``.
    ``seed`` is accepted for interface symmetry; the loop itself draws no
    random numbers.
    """
    kind = scenario.controller
    if kind != "ideal_nmpc" and model is None:
        raise ConfigError(f"{kind} needs a trained model")
    if model is not None and abs(model.dt - scenario.dt) > 1e-12:
        raise ConfigError("scenario sampling interval differs from the model's")
    u_held = scenario.initial_input.copy()
    x = steady_state(plant, u_held)
    log = ClosedLoopLog(plant.n_x, plant.n_u, plant.n_y)
    N = model.N if model is not None else 0
    buf = deque(maxlen=N + 1)
    ubuf = deque(maxlen=N + 1)
    h = scenario.dt / scenario.substeps
    for _ in range(N):
        buf.append(plant.output_map(x, u_held))
        ubuf.append(u_held.copy())
        for _ in range(scenario.substeps):
            x = rk4_step(plant, x, u_held, h)
    warm: MpcSolution | None = None
    problem = setup.problem
    for k in range(scenario.n_instants):
        t = k * scenario.dt
        y = plant.output_map(x, u_held)
        buf.append(y)
        ubuf.append(u_held.copy())
        prob = problem.with_setpoints(scenario.preview(t, problem.horizon))
        if kind == "ideal_nmpc":
            feedback = x.copy()
        else:
            feedback = model.scale_history(np.array(buf), np.array(ubuf))
            log.buffers.append(np.array(buf)[::-1].ravel())
        held = 0
        t0 = time.perf_counter()
        try:
            if k in scenario.inject_failure_at:
                raise SolverFailure("injected failure")
            sol = _solve_once(kind, plant, model, setup, feedback, prob, warm, u_held, scenario)
            u_apply = sol.inputs[0].copy()
            warm = sol
            yhat = sol.predicted_y[0]
            iters, obj, viol = sol.iterations, sol.objective, sol.violation["max_scaled"]
        except (SolverFailure, DivergenceError, NumericalError):
            held = 1
            u_apply = u_held.copy()
            yhat = np.full(plant.n_y, np.nan)
            iters, obj, viol = 0, math.nan, math.nan
        elapsed = time.perf_counter() - t0
        log.k.append(k)
        log.t.append(t)
        log.y.append(y)
        log.u.append(u_apply)
        log.x.append(x.copy())
        log.yhat.append(yhat)
        log.solve_ms.append(1e3 * elapsed)
        log.iters.append(iters)
        log.objective.append(obj)
        log.violation.append(viol)
        log.held.append(held)
        log.setpoint.append(scenario.setpoint_at(t))
        for _ in range(scenario.substeps):
            x = rk4_step(plant, x, u_apply, h)
        u_held = u_apply
    return log


@dataclass
class BenchmarkRow:
    controller: str
    mean_ms: float
    max_ms: float
    reduction: float | None
    samples: int


@dataclass
class BenchmarkTable:
    rows: list[BenchmarkRow]

    def row(self, controller: str) -> BenchmarkRow:
        return next(r for r in self.rows if r.controller == controller)

    def to_csv(self, path: str | Path | None = None) -> str:
        lines = ["controller,mean_ms,max_ms,reduction"]
        for r in self.rows:
            red = "" if r.reduction is None else format(r.reduction, ".6g")
            lines.append(f"{r.controller},{r.mean_ms:.6g},{r.max_ms:.6g},{red}")
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_text(self) -> str:
        out = [f"{'Controller':<16}{'mean CPU':>12}{'max CPU':>12}{'mean red.':>11}"]
        for r in self.rows:
            red = "" if r.reduction is None else f"{100 * r.reduction:.1f} %"
            out.append(f"{r.controller:<16}{r.mean_ms:>9.2f} ms{r.max_ms:>9.2f} ms{red:>11}")
        return "\n".join(out)


def benchmark_from_times(times: dict[str, list[float]]) -> BenchmarkTable:
    """Build the comparison table from per-controller solve times in milliseconds."""
    ideal = np.mean(times["ideal_nmpc"]) if times.get("ideal_nmpc") else None
    rows = []
    for name, ts in times.items():
        mean = float(np.mean(ts))
        red = None if ideal is None or name == "ideal_nmpc" else 1.0 - mean / ideal
        rows.append(BenchmarkRow(name, mean, float(np.max(ts)), red, len(ts)))
    return BenchmarkTable(rows)


def benchmark_cpu(plant: PlantModel, models: dict[str, KoopmanModel | None], scenarios: list[Scenario],
                  setup: ControllerSetup) -> tuple[BenchmarkTable, dict[str, list[ClosedLoopLog]]]:
    """Run every controller in ``models`` on every scenario, sequentially, and tabulate solve times.

    Only the solver call is timed; plant integration and logging are outside
    the stopwatch.
    """
    times: dict[str, list[float]] = {}
    logs: dict[str, list[ClosedLoopLog]] = {}
    for name, model in models.items():
        times[name] = []
        logs[name] = []
        for sc in scenarios:
            sc_c = Scenario(sc.initial_input, sc.setpoint_times, sc.setpoints, sc.duration, sc.dt, name,
                            sc.substeps, sc.inject_failure_at)
            log = run_closed_loop(plant, model, sc_c, setup)
            times[name].extend(ms for ms, held in zip(log.solve_ms, log.held) if not held)
            logs[name].append(log)
    return benchmark_from_times(times), logs


# ---------------------------------------------------------------------------
# open-loop test


@dataclass
class OpenLoopReport:
    channels: list[str]
    rmse: np.ndarray
    max_error: np.ndarray
    relative_rmse: np.ndarray
    signal_range: np.ndarray
    plateau_offsets: list[dict]
    diverged: list[str]
    times: np.ndarray
    truth: np.ndarray
    prediction: np.ndarray
    impurity_log_error: np.ndarray | None = None
    impurity_channel: str | None = None

    def channel(self, name: str) -> int:
        return self.channels.index(name)

    def final_offset(self, name: str) -> float:
        return float(self.plateau_offsets[-1]["offset"][self.channel(name)])

    def to_csv(self, path: str | Path | None = None) -> str:
        cols = ["t"] + [f"{c}_true" for c in self.channels] + [f"{c}_pred" for c in self.channels]
        if self.impurity_log_error is not None:
            cols.append("impurity_log10_error")
        lines = [",".join(cols)]
        for i, t in enumerate(self.times):
            row = [t, *self.truth[i], *self.prediction[i]]
            if self.impurity_log_error is not None:
                row.append(self.impurity_log_error[i])
            lines.append(",".join(format(float(v), ".17g") for v in row))
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    def summary(self) -> dict:
        return {
            "channels": self.channels,
            "rmse": [float(v) for v in self.rmse],
            "max_error": [float(v) for v in self.max_error],
            "relative_rmse": [float(v) for v in self.relative_rmse],
            "plateaus": [
                {"start": p["start"], "end": p["end"], "offset": [float(v) for v in p["offset"]],
                 "relative_offset": [float(v) for v in p["relative_offset"]]}
                for p in self.plateau_offsets
            ],
            "diverged": self.diverged,
        }


def default_test_profile(base=(0.8, 1.0)) -> InputProfile:
    """Two consecutive 1.5 h steps to the input limits: feed up, then reflux ratio up."""
    return InputProfile(np.array([0.0, 90.0]), np.array([[base[0], 1.2], [0.9, 1.2]]))


def evaluate_openloop(model: KoopmanModel, plant: PlantModel, profile: InputProfile, u_init, duration: float,
                      substeps: int = 20, min_plateau: float = 60.0) -> OpenLoopReport:
    """Roll the model across the whole test from the initial delay window only.

    The plant sits at the steady state of ``u_init`` for ``N`` samples before
    ``t=0``; that history forms the only measurement the model receives.
    """
    u_init = np.asarray(u_init, dtype=float)
    dt, N = model.dt, model.N
    x0 = steady_state(plant, u_init)
    history = InputProfile(np.array([-N * dt]), u_init[None, :])
    full = history.then(profile) if profile.breakpoints[0] > -N * dt else profile
    rec = simulate(plant, x0, full, dt, duration, substeps, t0=-N * dt, u_prev=u_init)
    chi0 = model.scale_history(rec.outputs[: N + 1], rec.inputs[: N + 1])
    U = model.scaling.transform("u", rec.inputs[N:-1])
    r = model.rollout(chi0, U, raw=True, check=False)
    truth = np.hstack([rec.states[N + 1 :], rec.outputs[N + 1 :]])
    pred = np.hstack([r.x, r.y])
    channels = list(plant.channel_names)
    err = pred - truth
    finite = np.all(np.isfinite(pred), axis=0)
    rmse = np.where(finite, np.sqrt(np.mean(np.where(np.isfinite(err), err, 0.0) ** 2, axis=0)), np.inf)
    max_err = np.where(finite, np.max(np.abs(np.where(np.isfinite(err), err, 0.0)), axis=0), np.inf)
    all_truth = np.hstack([rec.states[N:], rec.outputs[N:]])
    rng = np.ptp(all_truth, axis=0)
    rng = np.where(rng > 1e-12, rng, np.maximum(np.abs(all_truth).mean(axis=0), 1e-12))
    times = rec.times[N + 1 :]
    plateaus = []
    bps = [b for b in profile.breakpoints if b >= -1e-9] or [0.0]
    edges = list(bps) + [duration]
    for a, b in zip(edges[:-1], edges[1:]):
        if b - a < min_plateau - 1e-9:
            continue
        i = int(round(b / dt)) - 1  # prediction row of sample at time b
        i = min(i, len(times) - 1)
        off = np.abs(err[i])
        plateaus.append({"start": float(a), "end": float(b), "offset": off, "relative_offset": off / rng})
    imp, imp_channel = None, None
    if "impurity" in plant.derived:
        imp_channel = channels[plant.derived["impurity"][0]]
        p_true = plant.derived_value("impurity", truth)
        p_pred = plant.derived_value("impurity", pred)
        with np.errstate(invalid="ignore", divide="ignore"):
            imp = np.log10(np.abs(p_pred)) - np.log10(np.abs(p_true))
    diverged = [c for c, ok in zip(channels, finite) if not ok]
    return OpenLoopReport(channels, rmse, max_err, rmse / rng, rng, plateaus, diverged, times, truth, pred, imp,
                          imp_channel)


@dataclass
class TrackingSummary:
    plateau_errors: list[dict]
    max_relative_error: float
    input_violations: int
    violation_integrals: dict[str, float]
    relative_violation_integrals: dict[str, float]
    held_instants: int

    def to_dict(self) -> dict:
        return {
            "plateau_errors": self.plateau_errors,
            "max_relative_error": self.max_relative_error,
            "input_violations": self.input_violations,
            "violation_integrals": self.violation_integrals,
            "relative_violation_integrals": self.relative_violation_integrals,
            "held_instants": self.held_instants,
        }


def tracking_summary(log: ClosedLoopLog, scenario: Scenario, problem: ControlProblem,
                     input_bounds) -> TrackingSummary:
    """Steady tracking error per setpoint plateau, hard input checks and soft bound integrals.

    The steady error of a plateau is read at its last instant, just before the
    next setpoint takes effect (or at the end of the run).
    """
    stacked = np.hstack([np.array(log.x), np.array(log.y)])
    names = [f"x{i + 1}" for i in range(log.n_x)] + [f"y{i + 1}" for i in range(log.n_y)]
    tracked = stacked[:, names.index(problem.tracked)]
    t = np.array(log.t)
    edges = list(scenario.setpoint_times[1:]) + [scenario.duration + scenario.dt]
    plateaus = []
    for start, end, sp in zip(scenario.setpoint_times, edges, scenario.setpoints):
        rows = np.flatnonzero((t >= start - 1e-9) & (t < end - 1e-9))
        if rows.size == 0:
            continue
        err = abs(tracked[rows[-1]] - sp)
        plateaus.append({"start": float(start), "t_end": float(t[rows[-1]]), "setpoint": float(sp),
                         "error": float(err), "relative_error": float(err / abs(sp)) if sp else float(err)})
    ib = np.asarray(input_bounds, dtype=float)
    U = np.array(log.u)
    n_viol = int(np.sum((U < ib[:, 0]) | (U > ib[:, 1])))
    integrals, rel = {}, {}
    for b in problem.bounds:
        v = stacked[:, names.index(b.channel)]
        excess = np.maximum(0.0, np.maximum(b.lo - v, v - b.hi))
        integrals[b.channel] = float(np.sum(excess) * scenario.dt)
        rel[b.channel] = integrals[b.channel] / ((b.hi - b.lo) * scenario.duration)
    worst = max((p["relative_error"] for p in plateaus), default=0.0)
    return TrackingSummary(plateaus, worst, n_viol, integrals, rel, int(sum(log.held)))
