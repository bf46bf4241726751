"""Receding-horizon tracking over a reduced Koopman model or the full plant.

Decision variables are the scaled inputs ``u_0 .. u_{N_c-1}`` (zero-order
hold).  The objective is the tracking cost of one channel plus a quadratic
penalty on box violations of any other channels; the penalty weight grows in
an outer loop.  The inner solver is projected gradient with heavy-ball
momentum, Barzilai-Borwein step sizes and Armijo backtracking along the
projection arc.  Accepted steps never increase the penalized objective.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import PlantModel
from .errors import ConfigError, ShapeError, SolverFailure
from .model import KoopmanModel
from .sampling import ScalingSpec


def channel_index(name: str, n_x: int) -> int:
    """``x3`` -> 2, ``y1`` -> n_x; indices address the stacked (x, y) vector."""
    try:
        group, i = name[0], int(name[1:]) - 1
    except (IndexError, ValueError):
        raise ConfigError(f"bad channel name {name!r}") from None
    if group == "x":
        return i
    if group == "y":
        return n_x + i
    raise ConfigError(f"channel {name!r} must start with x or y")


@dataclass
class ChannelBound:
    channel: str
    lo: float = -np.inf
    hi: float = np.inf


@dataclass
class ControlProblem:
    """One MPC instance; every value is in raw plant units."""

    horizon: int
    tracked: str
    setpoints: np.ndarray
    input_bounds: np.ndarray
    bounds: list[ChannelBound] = field(default_factory=list)
    tracking_weight: float = 1.0
    move_weight: float = 0.0

    def __post_init__(self):
        self.setpoints = np.atleast_1d(np.asarray(self.setpoints, dtype=float))
        self.input_bounds = np.atleast_2d(np.asarray(self.input_bounds, dtype=float))
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.setpoints.size < self.horizon:
            raise ConfigError("setpoint sequence shorter than the horizon")
        if np.any(self.input_bounds[:, 0] > self.input_bounds[:, 1]):
            raise ConfigError("input lower bound above upper bound")
        for b in self.bounds:
            if b.lo > b.hi:
                raise ConfigError(f"bound on {b.channel} has lo > hi")

    def with_setpoints(self, setpoints) -> ControlProblem:
        return ControlProblem(
            self.horizon, self.tracked, setpoints, self.input_bounds, list(self.bounds),
            self.tracking_weight, self.move_weight,
        )


@dataclass
class SolverConfig:
    max_iter: int = 500
    tol: float = 1e-6
    penalty_initial: float = 1e2
    penalty_growth: float = 10.0
    penalty_max: float = 1e6
    violation_tol: float = 1e-4
    momentum: float = 0.5
    armijo: float = 1e-4
    backtrack: float = 0.5
    initial_step: float = 1.0
    warm_start: bool = True
    warm_shift: bool = True
    lmpc_fast_path: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigError("solver tolerance must be positive")


@dataclass
class MpcSolution:
    inputs: np.ndarray  # raw, (N_c, n_u)
    inputs_scaled: np.ndarray
    predicted_x: np.ndarray  # raw, (N_c, n_x) for steps 1..N_c
    predicted_y: np.ndarray
    objective: float
    tracking_cost: float
    iterations: int
    wall_time: float
    converged: bool
    violation: dict
    penalty_weight: float
    pg_norm: float = 0.0


# ---------------------------------------------------------------------------
# predictors: scaled inputs (N_c, n_u) -> scaled stacked channels (N_c, n_x+n_y)


class KoopmanPredictor:
    def __init__(self, model: KoopmanModel, chi0):
        self.model = model
        self.chi0 = np.asarray(chi0, dtype=float)
        self.z0 = model.encode(self.chi0)
        self.scaling = model.scaling
        self.n_x, self.n_u = model.n_x, model.n_u

    def forward(self, U):
        dyn = self.model.dynamics
        Z = np.empty((U.shape[0], dyn.n_z))
        z = self.z0
        for k in range(U.shape[0]):
            z = dyn.step(z, U[k])
            Z[k] = z
        V, acts = self.model.decoder.forward(Z, cache=True)
        return V, acts

    def vjp(self, cache, dV):
        dyn = self.model.dynamics
        dZ, _, _ = self.model.decoder.backward(cache, dV, param_grads=False)
        K = dZ.shape[0]
        dU = np.empty((K, self.n_u))
        lam = np.zeros(dyn.n_z)
        for k in range(K - 1, -1, -1):
            lam = lam + dZ[k]
            dU[k] = dyn.B.T @ lam
            lam = dyn.transpose_apply(lam)
        return dU

    def prediction(self, U):
        r = self.model.rollout(self.chi0, U, raw=True)
        return r.x, r.y


class PlantPredictor:
    """Full-order RK4 shooting with a discrete adjoint for exact gradients."""

    def __init__(self, plant: PlantModel, x0, scaling: ScalingSpec, dt: float, substeps: int = 20):
        self.plant = plant
        self.x0 = np.asarray(x0, dtype=float)
        self.scaling = scaling
        self.dt = dt
        self.substeps = substeps
        self.n_x, self.n_u = plant.n_x, plant.n_u

    def _raw_inputs(self, U):
        return self.scaling.inverse("u", U)

    def _simulate(self, U_raw, keep_stages: bool):
        p = self.plant
        h = self.dt / self.substeps
        x = self.x0
        X = np.empty((U_raw.shape[0], p.n_x))
        Y = np.empty((U_raw.shape[0], p.n_y))
        stages = []
        for k, u in enumerate(U_raw):
            for _ in range(self.substeps):
                k1 = p.rhs(x, u)
                x2 = x + 0.5 * h * k1
                k2 = p.rhs(x2, u)
                x3 = x + 0.5 * h * k2
                k3 = p.rhs(x3, u)
                x4 = x + h * k3
                k4 = p.rhs(x4, u)
                if keep_stages:
                    stages.append((x, x2, x3, x4))
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise SolverFailure(f"plant prediction non-finite at step {k + 1}")
            X[k] = x
            Y[k] = p.output_map(x, u)
        return X, Y, stages

    def forward(self, U):
        U_raw = self._raw_inputs(U)
        X, Y, stages = self._simulate(U_raw, keep_stages=True)
        V = np.hstack([self.scaling.transform("x", X), self.scaling.transform("y", Y)])
        return V, (U_raw, X, Y, stages)

    def vjp(self, cache, dV):
        U_raw, X, Y, stages = cache
        p = self.plant
        h = self.dt / self.substeps
        nx = p.n_x
        dVx = dV[:, :nx] * self.scaling.derivative("x", X)
        dVy = dV[:, nx:] * self.scaling.derivative("y", Y)
        K = U_raw.shape[0]
        dU_raw = np.zeros((K, p.n_u))
        lam = np.zeros(nx)
        for k in range(K - 1, -1, -1):
            u = U_raw[k]
            Hx, Hu = p.output_jacobian(X[k], u)
            lam = lam + dVx[k] + Hx.T @ dVy[k]
            du = Hu.T @ dVy[k]
            for j in range(self.substeps - 1, -1, -1):
                xs = stages[k * self.substeps + j]
                dk4 = (h / 6.0) * lam
                dk3 = (h / 3.0) * lam
                dk2 = (h / 3.0) * lam
                dk1 = (h / 6.0) * lam
                dx = lam.copy()
                # stage 4: x4 = x + h k3
                t = p.state_jacobian(xs[3], u).T @ dk4
                du += p.input_fields(xs[3]).T @ dk4
                dx += t
                dk3 = dk3 + h * t
                # stage 3: x3 = x + h/2 k2
                t = p.state_jacobian(xs[2], u).T @ dk3
                du += p.input_fields(xs[2]).T @ dk3
                dx += t
                dk2 = dk2 + 0.5 * h * t
                # stage 2: x2 = x + h/2 k1
                t = p.state_jacobian(xs[1], u).T @ dk2
                du += p.input_fields(xs[1]).T @ dk2
                dx += t
                dk1 = dk1 + 0.5 * h * t
                dx += p.state_jacobian(xs[0], u).T @ dk1
                du += p.input_fields(xs[0]).T @ dk1
                lam = dx
            dU_raw[k] = du
        # raw = inverse(scaled): d raw / d scaled = 1 / (d scaled / d raw)
        return dU_raw / self.scaling.derivative("u", U_raw)

    def prediction(self, U):
        X, Y, _ = self._simulate(self._raw_inputs(U), keep_stages=False)
        return X, Y


# ---------------------------------------------------------------------------
# objective


class _Objective:
    def __init__(self, predictor, problem: ControlProblem, scaling: ScalingSpec, u_prev_scaled=None):
        self.pred = predictor
        self.problem = problem
        n_x = predictor.n_x
        self.n_x = n_x
        K = problem.horizon
        self.track = channel_index(problem.tracked, n_x)
        self.sp = self._scale_channel(scaling, self.track, problem.setpoints[:K])
        idx, lo, hi = [], [], []
        for b in problem.bounds:
            c = channel_index(b.channel, n_x)
            idx.append(c)
            lo.append(self._scale_channel(scaling, c, np.array([b.lo]))[0] if np.isfinite(b.lo) else -np.inf)
            hi.append(self._scale_channel(scaling, c, np.array([b.hi]))[0] if np.isfinite(b.hi) else np.inf)
        self.bidx = np.array(idx, dtype=int)
        self.blo = np.array(lo, dtype=float)
        self.bhi = np.array(hi, dtype=float)
        self.scale_lo = scaling.stacked("lo")
        self.scale_hi = scaling.stacked("hi")
        self.scale_log = scaling.stacked("log")
        self.u_prev = u_prev_scaled
        self.rho = 1.0
        self.n_evals = 0

    @staticmethod
    def _scale_channel(scaling: ScalingSpec, c: int, raw):
        log = scaling.stacked("log")[c]
        lo = scaling.stacked("lo")[c]
        hi = scaling.stacked("hi")[c]
        raw = np.asarray(raw, dtype=float)
        if log:
            if np.any(raw <= 0):
                raise ConfigError("bound or setpoint on a log-scaled channel must be positive")
            raw = np.log(raw)
        return (raw - lo) / (hi - lo)

    def _viol(self, V):
        if self.bidx.size == 0:
            return np.zeros((V.shape[0], 0)), np.zeros((V.shape[0], 0))
        vb = V[:, self.bidx]
        return np.maximum(self.blo - vb, 0.0), np.maximum(vb - self.bhi, 0.0)

    def parts(self, V, U):
        e = V[:, self.track] - self.sp
        track = self.problem.tracking_weight * float(e @ e)
        if self.problem.move_weight > 0:
            ref = U[0] if self.u_prev is None else self.u_prev
            dU = np.diff(np.vstack([ref, U]), axis=0)
            track += self.problem.move_weight * float(np.sum(dU * dU))
        below, above = self._viol(V)
        pen = float(np.sum(below**2) + np.sum(above**2))
        return track, pen

    def value(self, U):
        self.n_evals += 1
        V, _ = self.pred.forward(U)
        if not np.all(np.isfinite(V)):
            return np.inf
        track, pen = self.parts(V, U)
        return track + self.rho * pen

    def value_grad(self, U):
        self.n_evals += 1
        V, cache = self.pred.forward(U)
        if not np.all(np.isfinite(V)):
            return np.inf, np.zeros_like(U)
        track, pen = self.parts(V, U)
        dV = np.zeros_like(V)
        dV[:, self.track] = 2.0 * self.problem.tracking_weight * (V[:, self.track] - self.sp)
        if self.bidx.size:
            below, above = self._viol(V)
            np.add.at(dV, (slice(None), self.bidx), 2.0 * self.rho * (above - below))
        g = self.pred.vjp(cache, dV)
        if self.problem.move_weight > 0:
            ref = U[0] if self.u_prev is None else self.u_prev
            dU = np.diff(np.vstack([ref, U]), axis=0)
            gm = 2.0 * self.problem.move_weight * dU
            g = g + gm
            g[:-1] -= gm[1:]
            if self.u_prev is None:
                g[0] -= gm[0]
        return track + self.rho * pen, g

    def violation_summary(self, V):
        below, above = self._viol(V)
        worst = np.maximum(below, above)
        out = {"max_scaled": float(worst.max()) if worst.size else 0.0, "channels": {}}
        for j, b in enumerate(self.problem.bounds):
            out["channels"][b.channel] = float(worst[:, j].max()) if worst.size else 0.0
        return out


def _project(U, lo, hi):
    return np.minimum(np.maximum(U, lo), hi)


def _projected_gradient(obj: _Objective, U0, lo, hi, cfg: SolverConfig, budget: int):
    """Monotone projected gradient; returns (U, f, iterations, converged, pg_norm)."""
    U = _project(U0, lo, hi)
    f, g = obj.value_grad(U)
    if not np.isfinite(f):
        raise SolverFailure("objective not finite at the initial guess")
    step = cfg.initial_step
    U_prev = U
    it = 0
    pg = float(np.max(np.abs(_project(U - g, lo, hi) - U)))
    while it < budget:
        if pg < cfg.tol:
            return U, f, it, True, pg
        it += 1
        d = -g
        if cfg.momentum > 0:
            d = d + cfg.momentum * (U - U_prev) / step
        accepted = False
        for use_momentum in ((True, False) if cfg.momentum > 0 else (False,)):
            direction = d if use_momentum else -g
            t = step
            while t > 1e-16 * max(1.0, step):
                cand = _project(U + t * direction, lo, hi)
                delta = cand - U
                slope = float(np.sum(g * delta))
                if slope >= 0:
                    if not np.any(delta):
                        break
                    t *= cfg.backtrack
                    continue
                fc = obj.value(cand)
                if fc <= f + cfg.armijo * slope:
                    accepted = True
                    break
                t *= cfg.backtrack
            if accepted:
                break
        if not accepted:
            return U, f, it, False, pg
        fc, gc = obj.value_grad(cand)
        assert fc <= f, "accepted step increased the objective"
        s = (cand - U).ravel()
        y = (gc - g).ravel()
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 1e-300 else min(step * 2.0, 1e6)
        step = min(max(step, 1e-10), 1e8)
        U_prev, U, f, g = U, cand, fc, gc
        pg = float(np.max(np.abs(_project(U - g, lo, hi) - U)))
    return U, f, it, pg < cfg.tol, pg


def _initial_guess(problem: ControlProblem, scaling: ScalingSpec, warm, u_hold, cfg):
    K = problem.horizon
    if warm is not None and cfg.warm_start:
        W = np.asarray(warm.inputs_scaled, dtype=float)
        if cfg.warm_shift:
            W = np.vstack([W[1:], W[-1:]])
        if W.shape[0] < K:
            W = np.vstack([W, np.repeat(W[-1:], K - W.shape[0], axis=0)])
        return W[:K]
    if u_hold is not None:
        return np.tile(scaling.transform("u", np.asarray(u_hold, dtype=float)), (K, 1))
    mid = problem.input_bounds.mean(axis=1)
    return np.tile(scaling.transform("u", mid), (K, 1))


def _solve(predictor, problem: ControlProblem, scaling: ScalingSpec, warm, cfg: SolverConfig, u_hold=None, U_start=None):
    t0 = time.perf_counter()
    lo = scaling.transform("u", problem.input_bounds[:, 0])
    hi = scaling.transform("u", problem.input_bounds[:, 1])
    u_prev_s = None if u_hold is None else scaling.transform("u", np.asarray(u_hold, dtype=float))
    obj = _Objective(predictor, problem, scaling, u_prev_s)
    U = _initial_guess(problem, scaling, warm, u_hold, cfg) if U_start is None else U_start
    if U.shape != (problem.horizon, len(lo)):
        raise ShapeError(f"initial guess has shape {U.shape}")
    rho = cfg.penalty_initial
    if warm is not None and cfg.warm_start:
        rho = max(rho, warm.penalty_weight)
    total_it = 0
    converged = False
    pg = np.inf
    while True:
        obj.rho = rho
        U, f, it, converged, pg = _projected_gradient(obj, U, lo, hi, cfg, cfg.max_iter - total_it)
        total_it += it
        V, _ = predictor.forward(U)
        viol = obj.violation_summary(V)
        if obj.bidx.size == 0 or viol["max_scaled"] <= cfg.violation_tol or rho >= cfg.penalty_max:
            break
        if total_it >= cfg.max_iter:
            break
        rho = min(rho * cfg.penalty_growth, cfg.penalty_max)
    if not np.isfinite(f):
        raise SolverFailure("objective not finite")
    V, _ = predictor.forward(U)
    track, pen = obj.parts(V, U)
    viol["at_max_penalty"] = bool(rho >= cfg.penalty_max and viol["max_scaled"] > cfg.violation_tol)
    px, py = predictor.prediction(U)
    return MpcSolution(
        inputs=scaling.inverse("u", U),
        inputs_scaled=U,
        predicted_x=px,
        predicted_y=py,
        objective=track + rho * pen,
        tracking_cost=track,
        iterations=total_it,
        wall_time=time.perf_counter() - t0,
        converged=converged,
        violation=viol,
        penalty_weight=rho,
        pg_norm=pg,
    )


def solve_mpc(model: KoopmanModel, chi0, problem: ControlProblem, warm: MpcSolution | None = None,
              cfg: SolverConfig | None = None, u_hold=None) -> MpcSolution:
    """Koopman NMPC: ``chi0`` is the scaled delay window, encoded once before optimizing."""
    cfg = cfg or SolverConfig()
    return _solve(KoopmanPredictor(model, chi0), problem, model.scaling, warm, cfg, u_hold)


def _condensed(model: KoopmanModel, chi0, K: int):
    """Stacked channels as an affine map of the flattened scaled inputs (linear decoder only)."""
    dyn = model.dynamics
    A = dyn.matrix()
    C = model.decoder.weights[0].T  # (n_out, n_z)
    c = model.decoder.biases[0]
    c = np.zeros(C.shape[0]) if c is None else c
    n_z, n_u = dyn.n_z, dyn.n_u
    z0 = model.encode(chi0)
    free = np.empty((K, n_z))
    z = z0
    for k in range(K):
        z = A @ z
        free[k] = z
    Apow = [np.eye(n_z)]
    for _ in range(K - 1):
        Apow.append(A @ Apow[-1])
    M = np.zeros((K, C.shape[0], K * n_u))
    for k in range(K):
        for j in range(k + 1):
            M[k, :, j * n_u : (j + 1) * n_u] = C @ Apow[k - j] @ dyn.B
    m = free @ C.T + c
    return M, m


def koopman_lmpc_solve(model: KoopmanModel, chi0, problem: ControlProblem, warm: MpcSolution | None = None,
                       cfg: SolverConfig | None = None, u_hold=None) -> MpcSolution:
    """Koopman MPC on the linear-decoder variant.

    With ``lmpc_fast_path`` the unconstrained least-squares optimum is tried
    first and returned when it already respects every bound; otherwise it
    seeds the penalty solver.
    """
    if not model.decoder.is_linear:
        raise ConfigError("Koopman LMPC needs a model with a linear decoder")
    cfg = cfg or SolverConfig()
    pred = KoopmanPredictor(model, chi0)
    if not cfg.lmpc_fast_path or problem.move_weight > 0:
        return _solve(pred, problem, model.scaling, warm, cfg, u_hold)
    t0 = time.perf_counter()
    K = problem.horizon
    M, m = _condensed(model, chi0, K)
    obj = _Objective(pred, problem, model.scaling)
    G = M[:, obj.track, :]
    r = obj.sp - m[:, obj.track]
    u_ls, *_ = np.linalg.lstsq(G, r, rcond=None)
    U = u_ls.reshape(K, model.n_u)
    lo = model.scaling.transform("u", problem.input_bounds[:, 0])
    hi = model.scaling.transform("u", problem.input_bounds[:, 1])
    V, _ = pred.forward(U)
    inside = np.all(U >= lo - 1e-12) and np.all(U <= hi + 1e-12)
    if inside and obj.violation_summary(V)["max_scaled"] <= cfg.violation_tol:
        U = _project(U, lo, hi)
        V, _ = pred.forward(U)
        obj.rho = cfg.penalty_initial
        track, pen = obj.parts(V, U)
        px, py = pred.prediction(U)
        viol = obj.violation_summary(V)
        viol["at_max_penalty"] = False
        return MpcSolution(
            model.scaling.inverse("u", U), U, px, py, track + obj.rho * pen, track, 0,
            time.perf_counter() - t0, True, viol, obj.rho, 0.0,
        )
    sol = _solve(pred, problem, model.scaling, warm, cfg, u_hold, U_start=_project(U, lo, hi))
    sol.wall_time = time.perf_counter() - t0
    return sol


def ideal_nmpc_solve(plant: PlantModel, x0, problem: ControlProblem, cfg: SolverConfig | None = None,
                     scaling: ScalingSpec | None = None, dt: float = 2.0, substeps: int = 20,
                     warm: MpcSolution | None = None, u_hold=None) -> MpcSolution:
    """Benchmark controller: same solver, full-order plant, full-state feedback."""
    cfg = cfg or SolverConfig()
    scaling = scaling or ScalingSpec.identity(plant.n_u, plant.n_x, plant.n_y)
    pred = PlantPredictor(plant, x0, scaling, dt, substeps)
    return _solve(pred, problem, scaling, warm, cfg, u_hold)
