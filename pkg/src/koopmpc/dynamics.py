"""Input-affine plants, fixed-step RK4 integration and steady states.

A plant is ``dx/dt = f(x) + G(x) u`` with measured outputs ``y = h(x, u_held)``.
The output map receives the input held over the *preceding* sampling
interval so that flow-type measurements of the surrogate column (which are
algebraic in the inputs) stay causal.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import (
    ConfigError,
    IntegrationError,
    ShapeError,
    SimulationDiverged,
    SteadyStateError,
)

Array = np.ndarray


@dataclass(frozen=True)
class PlantModel:
    """Continuous-time input-affine ODE with an output map.

    ``input_fields(x)`` returns the ``(n_x, n_u)`` matrix whose columns are the
    per-input vector fields ``g_i(x)``.
    """

    name: str
    n_x: int
    n_u: int
    n_y: int
    drift: Callable[[Array], Array]
    input_fields: Callable[[Array], Array]
    output_map: Callable[[Array, Array], Array]
    state_bounds: Array | None = None
    input_bounds: Array | None = None
    params: Mapping[str, float] = field(default_factory=dict)
    rhs_fn: Callable[[Array, Array], Array] | None = None
    jac_fn: Callable[[Array, Array], Array] | None = None
    output_jac_fn: Callable[[Array, Array], tuple[Array, Array]] | None = None
    state_names: tuple[str, ...] = ()
    output_names: tuple[str, ...] = ()
    input_names: tuple[str, ...] = ()
    # index into the stacked (x, y) vector and transform of a controlled
    # but unmeasured quantity, e.g. product impurity 1 - x_condenser
    derived: Mapping[str, tuple[int, float, float]] = field(default_factory=dict)

    def rhs(self, x: Array, u: Array) -> Array:
        if self.rhs_fn is not None:
            return self.rhs_fn(x, u)
        return self.drift(x) + self.input_fields(x) @ u

    def state_jacobian(self, x: Array, u: Array, eps: float = 1e-7) -> Array:
        """d rhs / dx, analytic when the plant provides it, else central FD."""
        if self.jac_fn is not None:
            return self.jac_fn(x, u)
        x = np.asarray(x, dtype=float)
        J = np.empty((self.n_x, self.n_x))
        for j in range(self.n_x):
            h = eps * max(1.0, abs(x[j]))
            xp = x.copy()
            xm = x.copy()
            xp[j] += h
            xm[j] -= h
            J[:, j] = (self.rhs(xp, u) - self.rhs(xm, u)) / (2 * h)
        return J

    def output_jacobian(self, x: Array, u: Array, eps: float = 1e-7) -> tuple[Array, Array]:
        if self.output_jac_fn is not None:
            return self.output_jac_fn(x, u)
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        Hx = np.empty((self.n_y, self.n_x))
        Hu = np.empty((self.n_y, self.n_u))
        for j in range(self.n_x):
            h = eps * max(1.0, abs(x[j]))
            d = np.zeros(self.n_x)
            d[j] = h
            Hx[:, j] = (self.output_map(x + d, u) - self.output_map(x - d, u)) / (2 * h)
        for j in range(self.n_u):
            h = eps * max(1.0, abs(u[j]))
            d = np.zeros(self.n_u)
            d[j] = h
            Hu[:, j] = (self.output_map(x, u + d) - self.output_map(x, u - d)) / (2 * h)
        return Hx, Hu

    def derived_value(self, name: str, stacked: Array) -> Array:
        """Evaluate ``offset + scale * stacked[..., index]`` for a derived channel."""
        idx, offset, scale = self.derived[name]
        return offset + scale * np.asarray(stacked)[..., idx]

    @property
    def channel_names(self) -> tuple[str, ...]:
        return self.state_names + self.output_names


@dataclass(frozen=True)
class InputProfile:
    """Piecewise-constant input: ``levels[i]`` holds on ``[breakpoints[i], breakpoints[i+1])``."""

    breakpoints: Array
    levels: Array

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float).reshape(-1)
        lv = np.atleast_2d(np.asarray(self.levels, dtype=float))
        if lv.shape[0] != bp.shape[0]:
            raise ShapeError("levels count must equal breakpoints count")
        if bp.size > 1 and np.any(np.diff(bp) <= 0):
            raise ShapeError("breakpoints must be strictly ascending")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "levels", lv)

    @classmethod
    def constant(cls, u, t0: float = 0.0) -> InputProfile:
        return cls(np.array([t0]), np.atleast_2d(np.asarray(u, dtype=float)))

    def value_at(self, t: float, tol: float = 1e-9) -> Array:
        i = int(np.searchsorted(self.breakpoints, t + tol, side="right")) - 1
        if i < 0:
            raise ConfigError(f"input profile does not cover t={t}")
        return self.levels[i]

    def then(self, other: InputProfile) -> InputProfile:
        """Concatenate; ``other`` must start after this profile's last breakpoint."""
        return InputProfile(
            np.concatenate([self.breakpoints, other.breakpoints]),
            np.vstack([self.levels, other.levels]),
        )


@dataclass
class Trajectory:
    """Sampled record: row ``k`` of every array belongs to ``t0 + k*dt``.

    ``inputs[k]`` is the value held over ``[t_k, t_{k+1})``; the final row is
    the profile value at the last sample and is not applied.
    """

    dt: float
    inputs: Array
    states: Array
    outputs: Array
    t0: float = 0.0

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def times(self) -> Array:
        return self.t0 + self.dt * np.arange(len(self))

    def slice(self, start: int, stop: int) -> Trajectory:
        return Trajectory(
            self.dt,
            self.inputs[start:stop].copy(),
            self.states[start:stop].copy(),
            self.outputs[start:stop].copy(),
            self.t0 + start * self.dt,
        )

    def header(self) -> list[str]:
        nu, nx, ny = self.inputs.shape[1], self.states.shape[1], self.outputs.shape[1]
        return (
            ["t"]
            + [f"u{i + 1}" for i in range(nu)]
            + [f"x{i + 1}" for i in range(nx)]
            + [f"y{i + 1}" for i in range(ny)]
        )

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.header()) + "\n")
        data = np.hstack([self.times[:, None], self.inputs, self.states, self.outputs])
        for row in data:
            buf.write(",".join(format(float(v), ".17g") for v in row) + "\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source: str | Path, dt: float | None = None) -> Trajectory:
        text = Path(source).read_text() if not str(source).startswith("t,") else str(source)
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        data = np.array([[float(v) for v in r] for r in body if r], dtype=float)
        data = data.reshape(-1, len(header))
        nu = sum(h.startswith("u") for h in header)
        nx = sum(h.startswith("x") for h in header)
        t = data[:, 0]
        if dt is None:
            dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
        return cls(
            dt,
            data[:, 1 : 1 + nu],
            data[:, 1 + nu : 1 + nu + nx],
            data[:, 1 + nu + nx :],
            float(t[0]),
        )


def rk4_step(plant: PlantModel, x: Array, u: Array, dt: float) -> Array:
    """One classical Runge-Kutta step under constant input ``u``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = plant.rhs(x, u)
    k2 = plant.rhs(x + 0.5 * dt * k1, u)
    k3 = plant.rhs(x + 0.5 * dt * k2, u)
    k4 = plant.rhs(x + dt * k3, u)
    for k in (k1, k2, k3, k4):
        bad = np.flatnonzero(~np.isfinite(k))
        if bad.size:
            raise IntegrationError(
                f"non-finite derivative in state {int(bad[0])}", index=int(bad[0])
            )
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_bounds(plant: PlantModel, x: Array, t: float, slack: float) -> None:
    if plant.state_bounds is None:
        return
    lo, hi = plant.state_bounds[:, 0], plant.state_bounds[:, 1]
    margin = slack * (hi - lo)
    bad = np.flatnonzero((x < lo - margin) | (x > hi + margin))
    if bad.size:
        raise SimulationDiverged(
            f"state {int(bad[0])} left its bounds at t={t:g}", time=t
        )


def simulate(
    plant: PlantModel,
    x0,
    profile: InputProfile,
    dt: float,
    t_end: float,
    substeps: int = 20,
    t0: float = 0.0,
    u_prev=None,
    bound_slack: float = 1e-3,
) -> Trajectory:
    """Sample the plant every ``dt`` from ``t0`` to ``t_end`` under ``profile``.

    ``u_prev`` is the input held just before ``t0``; it only affects the
    first output row and defaults to the first profile value.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    if profile.breakpoints[0] > t0 + 1e-9:
        raise ConfigError("input profile starts after t0")
    n = int(round((t_end - t0) / dt)) + 1
    h = dt / substeps
    x = np.array(x0, dtype=float)
    if x.shape != (plant.n_x,):
        raise ShapeError(f"x0 must have length {plant.n_x}")
    X = np.empty((n, plant.n_x))
    U = np.empty((n, plant.n_u))
    Y = np.empty((n, plant.n_y))
    held = profile.value_at(t0) if u_prev is None else np.asarray(u_prev, dtype=float)
    for k in range(n):
        t = t0 + k * dt
        u = profile.value_at(t)
        X[k] = x
        U[k] = u
        Y[k] = plant.output_map(x, held)
        if k == n - 1:
            break
        for _ in range(substeps):
            x = rk4_step(plant, x, u, h)
        _check_bounds(plant, x, t + dt, bound_slack)
        held = u
    return Trajectory(dt, U, X, Y, t0)


def steady_state(
    plant: PlantModel,
    u,
    x_guess=None,
    tol: float = 1e-10,
    max_iter: int = 100,
    settle_time: float = 2000.0,
    settle_dt: float = 0.1,
) -> Array:
    """Damped Newton on ``f(x) + G(x) u = 0`` with a simulation fallback."""
    u = np.asarray(u, dtype=float)
    x = np.full(plant.n_x, 0.5) if x_guess is None else np.array(x_guess, dtype=float)
    if not np.all(np.isfinite(x)):
        raise SteadyStateError("initial guess is not finite")

    def newton(x):
        r = plant.rhs(x, u)
        for _ in range(max_iter):
            res = np.max(np.abs(r))
            if res < tol:
                return x
            J = plant.state_jacobian(x, u)
            try:
                step = np.linalg.solve(J, -r)
            except np.linalg.LinAlgError:
                return None
            lam = 1.0
            while lam > 1e-6:
                xn = x + lam * step
                rn = plant.rhs(xn, u)
                if np.all(np.isfinite(rn)) and np.max(np.abs(rn)) < res:
                    break
                lam *= 0.5
            else:
                return None
            x, r = xn, rn
        return x if np.max(np.abs(r)) < tol else None

    sol = newton(x)
    if sol is None:
        # march towards the attractor, then polish
        n_steps = int(settle_time / settle_dt)
        try:
            for _ in range(n_steps):
                x = rk4_step(plant, x, u, settle_dt)
        except IntegrationError as exc:
            raise SteadyStateError(str(exc)) from exc
        sol = newton(x)
    if sol is None:
        raise SteadyStateError(f"no steady state found for {plant.name} at u={u}")
    return sol


# ---------------------------------------------------------------------------
# plant registry


def _linear_plant(params):
    a = float(params.get("a", 1.0))
    b = float(params.get("b", 1.0))
    return PlantModel(
        name="linear",
        n_x=1,
        n_u=1,
        n_y=1,
        drift=lambda x: -a * x,
        input_fields=lambda x: np.array([[b]]),
        output_map=lambda x, u: np.array([x[0]]),
        jac_fn=lambda x, u: np.array([[-a]]),
        output_jac_fn=lambda x, u: (np.ones((1, 1)), np.zeros((1, 1))),
        input_bounds=np.array([[params.get("u_min", 0.0), params.get("u_max", 2.0)]]),
        params={"a": a, "b": b},
        state_names=("x1",),
        output_names=("y1",),
        input_names=("u1",),
    )


def _vdp_plant(params):
    mu = float(params.get("mu", 1.0))

    def drift(x):
        return np.array([x[1], mu * (1.0 - x[0] ** 2) * x[1] - x[0]])

    def jac(x, u):
        return np.array([[0.0, 1.0], [-2.0 * mu * x[0] * x[1] - 1.0, mu * (1.0 - x[0] ** 2)]])

    return PlantModel(
        name="vdp",
        n_x=2,
        n_u=1,
        n_y=1,
        drift=drift,
        input_fields=lambda x: np.array([[0.0], [1.0]]),
        output_map=lambda x, u: np.array([x[0]]),
        jac_fn=jac,
        output_jac_fn=lambda x, u: (np.array([[1.0, 0.0]]), np.zeros((1, 1))),
        input_bounds=np.array([[-1.0, 1.0]]),
        params={"mu": mu},
        state_names=("x1", "x2"),
        output_names=("y1",),
        input_names=("u1",),
    )


def _cstr_plant(params):
    """Exothermic first-order CSTR, input-affine in the coolant temperature."""
    p = {
        "q": 100.0, "volume": 100.0, "caf": 1.0, "tf": 350.0, "k0": 7.2e10,
        "e_over_r": 8750.0, "dh_rhocp": 209.2, "ua_vrhocp": 2.092,
    }
    for k, v in params.items():
        if k not in p:
            raise ConfigError(f"unknown cstr parameter {k!r}")
        p[k] = float(v)
    th = p["q"] / p["volume"]

    def rate(x):
        return p["k0"] * math.exp(-p["e_over_r"] / x[1]) * x[0]

    def drift(x):
        r = rate(x)
        return np.array([
            th * (p["caf"] - x[0]) - r,
            th * (p["tf"] - x[1]) + p["dh_rhocp"] * r - p["ua_vrhocp"] * x[1],
        ])

    return PlantModel(
        name="cstr",
        n_x=2,
        n_u=1,
        n_y=1,
        drift=drift,
        input_fields=lambda x: np.array([[0.0], [p["ua_vrhocp"]]]),
        output_map=lambda x, u: np.array([x[1]]),
        state_bounds=np.array([[0.0, 1.5], [250.0, 500.0]]),
        input_bounds=np.array([[295.0, 305.0]]),
        params=p,
        state_names=("x1", "x2"),
        output_names=("y1",),
        input_names=("u1",),
    )


_COLUMN_DEFAULTS = {
    "trays": 10,
    "feed_tray": 5,
    "measured_tray": 5,
    "alpha": 1.6,
    "holdup": 0.5,
    "holdup_reboiler": 5.0,
    "holdup_condenser": 5.0,
    "feed_composition": 0.5,
    "vapor": 1.0,
    "reflux_ratio_min": 0.7,
    "reflux_ratio_max": 0.9,
    "feed_min": 0.8,
    "feed_max": 1.2,
}


def _column_plant(params):
    """Binary tray column, stages 0 (reboiler) .. n+1 (total condenser).

    Inputs are the reflux ratio ``xi = L/V`` and the feed rate ``F``; with the
    boil-up ``V`` fixed the liquid flow ``L = xi*V`` keeps the model affine in
    both.  Outputs are distillate ``D``, bottoms ``B`` and the liquid
    composition on the measured tray.
    """
    p = dict(_COLUMN_DEFAULTS)
    for k, v in params.items():
        if k not in p:
            raise ConfigError(f"unknown column parameter {k!r}")
        p[k] = v
    n = int(p["trays"])
    nf = int(p["feed_tray"])
    nm = int(p["measured_tray"])
    if n < 2 or not 1 <= nf <= n or not 0 <= nm <= n + 1:
        raise ConfigError("column needs trays >= 2 and feed/measured trays inside the column")
    alpha = float(p["alpha"])
    if alpha <= 1.0:
        raise ConfigError("relative volatility must exceed 1")
    M = float(p["holdup"])
    Mr = float(p["holdup_reboiler"])
    Mc = float(p["holdup_condenser"])
    zf = float(p["feed_composition"])
    V = float(p["vapor"])
    nx = n + 2
    hold = np.full(nx, M)
    hold[0], hold[-1] = Mr, Mc
    trays = np.arange(1, n + 1)
    below_feed = np.zeros(nx)
    below_feed[1 : nf + 1] = 1.0  # trays carrying L + F

    def equilibrium(x):
        return alpha * x / (1.0 + (alpha - 1.0) * x)

    def d_equilibrium(x):
        return alpha / (1.0 + (alpha - 1.0) * x) ** 2

    def rhs(x, u):
        L = u[0] * V
        F = u[1]
        y = equilibrium(x)
        liq = L + F * below_feed  # liquid leaving stage i (trays only)
        dx = np.empty(nx)
        inflow = np.empty(n)
        inflow[:-1] = liq[2 : n + 1] * x[2 : n + 1]
        inflow[-1] = L * x[n + 1]
        dx[1 : n + 1] = inflow + V * y[0:n] - liq[1 : n + 1] * x[1 : n + 1] - V * y[1 : n + 1]
        dx[nf] += F * zf
        B = L + F - V
        dx[0] = liq[1] * x[1] - V * y[0] - B * x[0]
        dx[n + 1] = V * y[n] - V * x[n + 1]
        return dx / hold

    def drift(x):
        return rhs(x, np.zeros(2))

    def input_fields(x):
        G = np.zeros((nx, 2))
        step = np.diff(x)  # x[i+1] - x[i]
        G[0 : n + 1, 0] = V * step[0 : n + 1]
        G[0:nf, 1] = step[0:nf]
        G[nf, 1] = zf - x[nf]
        return G / hold[:, None]

    def jac(x, u):
        L = u[0] * V
        F = u[1]
        dy = d_equilibrium(x)
        liq = L + F * below_feed
        J = np.zeros((nx, nx))
        J[trays, trays] = -liq[1 : n + 1] - V * dy[1 : n + 1]
        J[trays, trays - 1] = V * dy[0:n]
        J[trays[:-1], trays[:-1] + 1] = liq[2 : n + 1]
        J[n, n + 1] = L
        J[0, 0] = -V * dy[0] - (L + F - V)
        J[0, 1] = liq[1]
        J[n + 1, n] = V * dy[n]
        J[n + 1, n + 1] = -V
        return J / hold[:, None]

    def output_map(x, u):
        return np.array([V * (1.0 - u[0]), u[0] * V + u[1] - V, x[nm]])

    def output_jac(x, u):
        Hx = np.zeros((3, nx))
        Hx[2, nm] = 1.0
        Hu = np.array([[-V, 0.0], [V, 1.0], [0.0, 0.0]])
        return Hx, Hu

    return PlantModel(
        name="column",
        n_x=nx,
        n_u=2,
        n_y=3,
        drift=drift,
        input_fields=input_fields,
        output_map=output_map,
        state_bounds=np.tile([0.0, 1.0], (nx, 1)),
        input_bounds=np.array([
            [p["reflux_ratio_min"], p["reflux_ratio_max"]],
            [p["feed_min"], p["feed_max"]],
        ], dtype=float),
        params=p,
        rhs_fn=rhs,
        jac_fn=jac,
        output_jac_fn=output_jac,
        state_names=tuple(f"x{i + 1}" for i in range(nx)),
        output_names=("y1", "y2", "y3"),
        input_names=("u1", "u2"),
        derived={"impurity": (nx - 1, 1.0, -1.0)},
    )


_REGISTRY = {
    "linear": _linear_plant,
    "vdp": _vdp_plant,
    "cstr": _cstr_plant,
    "column": _column_plant,
}


def make_plant(name: str, params: Mapping | None = None) -> PlantModel:
    """Build a registered plant by name (``linear``, ``vdp``, ``cstr``, ``column``)."""
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown plant {name!r}; choose from {sorted(_REGISTRY)}") from None
    params = dict(params or {})
    if name == "vdp" and set(params) - {"mu"}:
        raise ConfigError(f"unknown vdp parameter(s) {sorted(set(params) - {'mu'})}")
    if name == "linear" and set(params) - {"a", "b", "u_min", "u_max"}:
        raise ConfigError("linear plant accepts only a, b, u_min, u_max")
    return factory(params)
