import math

import numpy as np
import pytest

from koopmpc.closedloop import (
    ClosedLoopLog,
    ControllerSetup,
    Scenario,
    benchmark_cpu,
    benchmark_from_times,
    default_problem,
    default_scenario,
    default_test_profile,
    derived_bound,
    evaluate_openloop,
    run_closed_loop,
    tracking_summary,
)
from koopmpc.dynamics import InputProfile, make_plant, steady_state
from koopmpc.errors import ConfigError
from koopmpc.model import KoopmanModel, LatentDynamics, Mlp
from koopmpc.mpc import ControlProblem, SolverConfig, solve_mpc
from koopmpc.sampling import SamplingConfig, ScalingSpec, generate_dataset
from koopmpc.training import ModelSpec

LIN = make_plant("linear")


def exact_model(dt=2.0, N=1):
    """ZOH model of x' = -x + u whose encoder reads only the newest sample of the delay window."""
    w = np.zeros((N + 1, 1))
    w[0, 0] = 1.0
    enc = Mlp([w], [np.zeros(1)])
    dec = Mlp([np.array([[1.0, 1.0]])], [np.zeros(2)])
    a = math.exp(-dt)
    dyn = LatentDynamics("diagonal", np.array([a]), np.array([[1.0 - a]]), dt)
    return KoopmanModel(enc, dyn, dec, ScalingSpec.identity(1, 1, 1), {"N": N, "n_x": 1, "n_y": 1, "n_u": 1})


def lin_setup(horizon=10, tol=1e-10):
    prob = ControlProblem(horizon, "y1", np.ones(horizon), LIN.input_bounds)
    return ControllerSetup(prob, SolverConfig(tol=tol, max_iter=2000))


def test_scenario_validation_and_preview():
    with pytest.raises(ConfigError):
        Scenario([1.0], [0.0], [1.0], controller="pid")
    with pytest.raises(ConfigError):
        Scenario([1.0], [5.0], [1.0])
    with pytest.raises(ConfigError):
        Scenario([1.0], [0.0, 1.0], [1.0])
    sc = default_scenario()
    assert sc.n_instants == 121
    assert sc.setpoint_at(28.0) == 0.2 and sc.setpoint_at(30.0) == 0.25
    assert np.array_equal(sc.preview(26.0, 3), [0.2, 0.25, 0.25])


def test_derived_impurity_bound():
    b = derived_bound(make_plant("column"), "impurity", 0.05, 0.15)
    assert b.channel == "x12"
    assert abs(b.lo - 0.85) < 1e-15 and abs(b.hi - 0.95) < 1e-15
    prob = default_problem(make_plant("column"))
    assert prob.horizon == 30 and prob.tracked == "y1"
    with pytest.raises(ConfigError):
        default_problem(LIN)


def test_constant_setpoint_is_noop():
    sc = Scenario([1.0], [0.0], [1.0], duration=40.0)
    log = run_closed_loop(LIN, exact_model(), sc, lin_setup())
    U = np.array(log.u)
    assert U.shape == (21, 1)
    assert np.max(np.abs(U - 1.0)) < 1e-6
    assert sum(log.held) == 0


def test_exact_model_reaches_setpoint():
    sc = Scenario([1.0], [0.0, 10.0], [1.0, 1.5], duration=120.0)
    log = run_closed_loop(LIN, exact_model(), sc, lin_setup())
    y = np.array(log.y)[:, 0]
    assert abs(y[-1] - 1.5) < 1e-6
    s = tracking_summary(log, sc, lin_setup().problem, LIN.input_bounds)
    assert s.input_violations == 0
    assert s.plateau_errors[-1]["error"] < 1e-6


def test_logs_are_bit_identical():
    sc = Scenario([1.0], [0.0, 6.0], [1.0, 0.5], duration=30.0)
    a = run_closed_loop(LIN, exact_model(), sc, lin_setup(tol=1e-6))
    b = run_closed_loop(LIN, exact_model(), sc, lin_setup(tol=1e-6))
    assert a.to_csv(include_timing=False) == b.to_csv(include_timing=False)


def test_buffers_and_replay():
    N = 3
    m = exact_model(N=N)
    sc = Scenario([0.6], [0.0, 8.0], [0.6, 1.2], duration=30.0)
    setup = lin_setup(tol=1e-8)
    log = run_closed_loop(LIN, m, sc, setup)
    Y = np.array(log.y)
    # buffer at k holds y_k .. y_{k-N}, newest first; the warm-up rows are the steady output
    for k, buf in enumerate(log.buffers):
        expect = [Y[k - j] if k - j >= 0 else np.array([0.6]) for j in range(N + 1)]
        assert np.array_equal(buf, np.concatenate(expect))
    # re-solving from logged measurements alone reproduces every applied input
    warm, u_hold = None, np.array([0.6])
    for k in range(len(log.k)):
        hist = log.buffers[k].reshape(N + 1, 1)[::-1]
        prob = setup.problem.with_setpoints(sc.preview(log.t[k], setup.problem.horizon))
        sol = solve_mpc(m, m.scale_history(hist), prob, warm, setup.solver, u_hold)
        assert np.array_equal(sol.inputs[0], log.u[k])
        warm, u_hold = sol, sol.inputs[0]


def test_failure_holds_input_once():
    sc = Scenario([1.0], [0.0, 4.0], [1.0, 1.4], duration=20.0, inject_failure_at=(4,))
    log = run_closed_loop(LIN, exact_model(), sc, lin_setup(tol=1e-6))
    assert len(log.k) == sc.n_instants
    assert sum(log.held) == 1 and log.held[4] == 1
    assert np.array_equal(log.u[4], log.u[3])
    csv = log.to_csv()
    assert csv.splitlines()[0] == "k,t,y1,u1,x1,yhat1,solve_ms,iters,objective,violation,held_flag"
    assert len(csv.splitlines()) == sc.n_instants + 1


def test_model_dt_must_match_and_model_required():
    with pytest.raises(ConfigError):
        run_closed_loop(LIN, exact_model(dt=1.0), Scenario([1.0], [0.0], [1.0]), lin_setup())
    with pytest.raises(ConfigError):
        run_closed_loop(LIN, None, Scenario([1.0], [0.0], [1.0]), lin_setup())


def test_benchmark_arithmetic():
    tab = benchmark_from_times({"koopman_nmpc": [2.0], "ideal_nmpc": [10.0]})
    assert tab.row("koopman_nmpc").reduction == pytest.approx(0.8, abs=1e-15)
    assert tab.row("ideal_nmpc").reduction is None
    assert tab.to_csv().splitlines() == ["controller,mean_ms,max_ms,reduction", "koopman_nmpc,2,2,0.8", "ideal_nmpc,10,10,"]
    assert "80.0 %" in tab.to_text()


def test_benchmark_single_instant():
    sc = Scenario([1.0], [0.0], [1.3], duration=0.0)
    tab, logs = benchmark_cpu(LIN, {"koopman_nmpc": exact_model(), "ideal_nmpc": None}, [sc], lin_setup(tol=1e-6))
    k, i = tab.row("koopman_nmpc"), tab.row("ideal_nmpc")
    assert k.samples == i.samples == 1
    assert k.reduction == pytest.approx(1.0 - k.mean_ms / i.mean_ms, rel=1e-12)
    assert logs["ideal_nmpc"][0].solve_ms[0] == i.mean_ms


def test_ideal_nmpc_constant_setpoint_on_column():
    p = make_plant("column")
    u0 = np.array([0.8, 1.0])
    D = p.output_map(steady_state(p, u0), u0)[0]
    prob = ControlProblem(4, "y1", np.full(4, D), p.input_bounds)
    sc = Scenario(u0, [0.0], [D], duration=6.0, controller="ideal_nmpc")
    log = run_closed_loop(p, None, sc, ControllerSetup(prob))
    assert np.max(np.abs(np.array(log.u) - u0)) < 1e-6


def test_tracking_summary_counts():
    log = ClosedLoopLog(1, 1, 1)
    for k, (y, u) in enumerate([(1.0, 0.5), (1.2, 2.5), (1.5, 1.0), (1.5, 1.0)]):
        log.k.append(k)
        log.t.append(2.0 * k)
        log.x.append(np.array([y]))
        log.y.append(np.array([y]))
        log.u.append(np.array([u]))
        log.held.append(0)
    sc = Scenario([1.0], [0.0, 2.0], [1.0, 1.5], duration=6.0)
    from koopmpc.mpc import ChannelBound

    prob = ControlProblem(1, "y1", [1.0], [[0.0, 2.0]], [ChannelBound("x1", 0.0, 1.4)])
    s = tracking_summary(log, sc, prob, [[0.0, 2.0]])
    assert s.input_violations == 1
    assert [p["error"] for p in s.plateau_errors] == [0.0, 0.0]
    # excess 0.1 at two instants, rectangle rule with dt = 2
    assert s.violation_integrals["x1"] == pytest.approx(0.4, abs=1e-12)
    assert s.relative_violation_integrals["x1"] == pytest.approx(0.4 / (1.4 * 6.0), abs=1e-12)


def test_openloop_exact_model():
    m = exact_model(N=2)
    prof = InputProfile(np.array([0.0, 20.0]), np.array([[1.5], [0.5]]))
    rep = evaluate_openloop(m, LIN, prof, [1.0], 100.0, substeps=200)
    assert np.all(rep.rmse < 1e-8)
    assert [p["start"] for p in rep.plateau_offsets] == [20.0]
    assert rep.diverged == [] and rep.impurity_log_error is None
    lines = rep.to_csv().splitlines()
    assert lines[0] == "t,x1_true,y1_true,x1_pred,y1_pred" and len(lines) == 51


def test_openloop_untrained_model_smoke():
    p = make_plant("column")
    ds = generate_dataset(p, SamplingConfig(n_steps=4, step_duration=40.0, N=3, s=6, stride=4), seed=5)
    m = ModelSpec(n_z=3, encoder_hidden=(4,), decoder_hidden=(4,)).build(ds, np.random.default_rng(0))
    rep = evaluate_openloop(m, p, default_test_profile(), [0.8, 1.0], 180.0)
    assert np.all(np.isfinite(rep.rmse)) and np.max(rep.relative_rmse) > 0.05
    assert rep.impurity_channel == "x12"
    assert len(rep.plateau_offsets) == 2
    assert rep.truth.shape == rep.prediction.shape == (90, 15)
