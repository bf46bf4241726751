import numpy as np
import pytest

from koopmpc.dynamics import make_plant, steady_state
from koopmpc.errors import ConfigError
from koopmpc.model import KoopmanModel, LatentDynamics, Mlp
from koopmpc.mpc import (
    ChannelBound,
    ControlProblem,
    KoopmanPredictor,
    PlantPredictor,
    SolverConfig,
    _Objective,
    channel_index,
    ideal_nmpc_solve,
    koopman_lmpc_solve,
    solve_mpc,
)
from koopmpc.sampling import ScalingSpec

WIDE = [[-1e3, 1e3]]


def scalar_model(a=0.5, b=1.0):
    """z+ = a z + b u, encoder z = chi, decoder (x, y) = (z, z); identity scaling."""
    enc = Mlp([np.array([[1.0]])], [np.zeros(1)])
    dec = Mlp([np.array([[1.0, 1.0]])], [np.zeros(2)])
    dyn = LatentDynamics("diagonal", np.array([a]), np.array([[b]]), 2.0)
    return KoopmanModel(enc, dyn, dec, ScalingSpec.identity(1, 1, 1), {"N": 0, "n_x": 1, "n_y": 1, "n_u": 1})


def random_model(seed, n_z=3, n_u=1, linear=False, n_x=2, n_y=2):
    rng = np.random.default_rng(seed)
    m = KoopmanModel.create(n_x, n_y, n_u, 1, 2.0, rng, n_z=n_z, encoder_hidden=(5,),
                            decoder_hidden=() if linear else (6,))
    for p in m.parameters().values():
        p += 0.3 * rng.normal(size=p.shape)
    m.dynamics.A[:] = rng.uniform(0.3, 0.95, n_z)
    return m


def test_channel_index():
    assert channel_index("x3", 12) == 2
    assert channel_index("y1", 12) == 12
    with pytest.raises(ConfigError):
        channel_index("u1", 3)
    with pytest.raises(ConfigError):
        channel_index("y", 3)


def test_control_problem_validation():
    with pytest.raises(ConfigError):
        ControlProblem(0, "y1", [1.0], WIDE)
    with pytest.raises(ConfigError):
        ControlProblem(3, "y1", [1.0, 1.0], WIDE)
    with pytest.raises(ConfigError):
        ControlProblem(1, "y1", [1.0], [[1.0, 0.0]])
    with pytest.raises(ConfigError):
        ControlProblem(1, "y1", [1.0], WIDE, [ChannelBound("y1", 2.0, 1.0)])
    with pytest.raises(ConfigError):
        SolverConfig(tol=0.0)


def test_scalar_two_step_example():
    # u0 = 1 gives z1 = 1, then 0.5 + u1 = 1
    prob = ControlProblem(2, "y1", [1.0, 1.0], WIDE)
    sol = solve_mpc(scalar_model(), np.zeros(1), prob, cfg=SolverConfig(tol=1e-10))
    assert np.allclose(sol.inputs[:, 0], [1.0, 0.5], atol=1e-8)
    assert sol.objective < 1e-14 and sol.converged


def test_steady_setpoint_is_noop():
    # z = 1 is the steady state for u = 0.5
    prob = ControlProblem(5, "y1", np.ones(5), WIDE)
    sol = solve_mpc(scalar_model(), np.ones(1), prob, u_hold=[0.5])
    assert np.all(sol.inputs == 0.5)
    assert sol.objective < 1e-12 and sol.iterations == 0


def test_collapsed_bounds_fix_the_input():
    prob = ControlProblem(4, "y1", 7.0 * np.ones(4), [[0.2, 0.2]])
    sol = solve_mpc(scalar_model(), np.zeros(1), prob)
    assert np.all(sol.inputs == 0.2)


def test_active_bound_kkt_sign():
    prob = ControlProblem(3, "y1", 10.0 * np.ones(3), [[-1.0, 1.0]])
    m = scalar_model()
    sol = solve_mpc(m, np.zeros(1), prob)
    assert np.all(sol.inputs == 1.0)
    obj = _Objective(KoopmanPredictor(m, np.zeros(1)), prob, m.scaling)
    _, g = obj.value_grad(sol.inputs_scaled)
    # descent direction points out through the upper bound
    assert np.all(g < 0)


def test_inputs_inside_bounds_on_random_problems():
    rng = np.random.default_rng(3)
    for seed in range(10):
        m = random_model(seed, n_u=2)
        lo = rng.uniform(0.0, 0.4, 2)
        bounds = np.column_stack([lo, lo + rng.uniform(0.0, 0.5, 2)])
        prob = ControlProblem(6, "y1", rng.uniform(-1, 2, 6), bounds,
                              [ChannelBound("x2", -0.5, 0.5)], move_weight=0.1)
        sol = solve_mpc(m, rng.random(m.encoder.n_in), prob, cfg=SolverConfig(max_iter=100))
        assert np.all(sol.inputs >= bounds[:, 0]) and np.all(sol.inputs <= bounds[:, 1])


def test_prediction_matches_independent_rollout():
    m = random_model(1)
    chi0 = np.random.default_rng(1).random(m.encoder.n_in)
    prob = ControlProblem(5, "y2", np.linspace(0, 1, 5), [[0.0, 1.0]])
    sol = solve_mpc(m, chi0, prob, cfg=SolverConfig(max_iter=50))
    r = m.rollout(chi0, sol.inputs_scaled, raw=True)
    assert np.array_equal(sol.predicted_y, r.y)
    assert np.array_equal(sol.predicted_x, r.x)


def test_warm_start_does_not_increase_iterations():
    m = random_model(2)
    chi0 = np.random.default_rng(2).random(m.encoder.n_in)
    prob = ControlProblem(8, "y1", 0.3 * np.ones(8), [[0.0, 1.0]])
    cfg = SolverConfig(warm_shift=False)
    cold = solve_mpc(m, chi0, prob, cfg=cfg)
    warm = solve_mpc(m, chi0, prob, warm=cold, cfg=cfg)
    assert warm.iterations <= cold.iterations
    # shifting repeats the last move
    shifted = solve_mpc(m, chi0, prob, warm=cold, cfg=SolverConfig(max_iter=1, tol=1e3))
    assert np.array_equal(shifted.inputs_scaled[:-1], cold.inputs_scaled[1:])
    assert np.array_equal(shifted.inputs_scaled[-1], cold.inputs_scaled[-1])


def test_infeasible_output_bound_is_reported():
    # y can never exceed 2 when u <= 1 and z0 = 0
    prob = ControlProblem(3, "y1", np.zeros(3), [[-1.0, 1.0]], [ChannelBound("x1", 5.0, 6.0)])
    sol = solve_mpc(scalar_model(), np.zeros(1), prob)
    assert sol.violation["at_max_penalty"]
    assert sol.violation["channels"]["x1"] > 1.0
    assert sol.penalty_weight == SolverConfig().penalty_max


def test_penalty_keeps_reachable_bound():
    prob = ControlProblem(4, "y1", 3.0 * np.ones(4), WIDE, [ChannelBound("x1", -np.inf, 1.0)])
    sol = solve_mpc(scalar_model(), np.zeros(1), prob)
    assert sol.violation["max_scaled"] <= SolverConfig().violation_tol
    assert not sol.violation["at_max_penalty"]


def _fd_grad(obj, U, h=1e-6):
    g = np.empty_like(U)
    for idx in np.ndindex(U.shape):
        Up, Um = U.copy(), U.copy()
        Up[idx] += h
        Um[idx] -= h
        g[idx] = (obj.value(Up) - obj.value(Um)) / (2 * h)
    return g


def test_koopman_objective_gradient_matches_fd():
    for seed in range(5):
        m = random_model(seed + 10, n_u=2)
        rng = np.random.default_rng(seed)
        prob = ControlProblem(4, "y1", rng.random(4), [[0.0, 1.0], [0.0, 1.0]],
                              [ChannelBound("x1", 0.2, 0.4), ChannelBound("y2", -np.inf, 0.1)], move_weight=0.3)
        obj = _Objective(KoopmanPredictor(m, rng.random(m.encoder.n_in)), prob, m.scaling, rng.random(2))
        obj.rho = 50.0
        U = rng.random((4, 2))
        _, g = obj.value_grad(U)
        num = _fd_grad(obj, U)
        assert np.linalg.norm(g - num) / np.linalg.norm(num) < 1e-5


def test_plant_objective_gradient_matches_fd():
    p = make_plant("column")
    x0 = steady_state(p, [0.8, 1.0])
    sc = ScalingSpec.from_dict({
        "u": {"log": [False, False], "min": [0.7, 0.8], "max": [0.9, 1.2]},
        "x": {"log": [False] * 11 + [True], "min": [0.0] * 11 + [-3.0], "max": [1.0] * 12},
        "y": {"log": [False, False, True], "min": [0.0, 0.0, -3.0], "max": [1.0, 1.5, 0.0]},
    })
    prob = ControlProblem(3, "y1", [0.25, 0.25, 0.25], [[0.7, 0.9], [0.8, 1.2]],
                          [ChannelBound("x12", 0.9, 1.0), ChannelBound("y3", 0.01, 0.4)])
    obj = _Objective(PlantPredictor(p, x0, sc, 2.0, 20), prob, sc)
    obj.rho = 100.0
    U = np.random.default_rng(0).uniform(0.2, 0.8, (3, 2))
    _, g = obj.value_grad(U)
    num = _fd_grad(obj, U, h=1e-5)
    assert np.linalg.norm(g - num) / np.linalg.norm(num) < 1e-5


def _response_matrix(m, chi0, K):
    """Columns of the affine input-to-tracked-output map, probed by rollouts."""
    base = m.rollout(chi0, np.zeros((K, 1))).y[:, 0]
    G = np.empty((K, K))
    for j in range(K):
        U = np.zeros((K, 1))
        U[j] = 1.0
        G[:, j] = m.rollout(chi0, U).y[:, 0] - base
    return G, base


def test_lmpc_matches_normal_equations():
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        m = random_model(seed, linear=True)
        K = int(rng.integers(1, 7))
        chi0 = rng.random(m.encoder.n_in)
        sp = rng.uniform(-1, 1, K)
        G, base = _response_matrix(m, chi0, K)
        u_star = np.linalg.solve(G.T @ G, G.T @ (sp - base))
        sol = koopman_lmpc_solve(m, chi0, ControlProblem(K, "y1", sp, WIDE))
        assert np.max(np.abs(sol.inputs_scaled[:, 0] - u_star)) < 1e-8


def test_lmpc_and_nmpc_agree_on_linear_decoder():
    m = random_model(4, linear=True)
    chi0 = np.random.default_rng(4).random(m.encoder.n_in)
    prob = ControlProblem(3, "y1", [0.2, 0.5, 0.5], WIDE)
    a = koopman_lmpc_solve(m, chi0, prob)
    b = solve_mpc(m, chi0, prob, cfg=SolverConfig(tol=1e-10, max_iter=5000))
    assert abs(a.objective - b.objective) < 1e-8
    with pytest.raises(ConfigError):
        koopman_lmpc_solve(random_model(4), chi0, prob)


def test_lmpc_active_bound_falls_back_to_penalty_solver():
    prob = ControlProblem(2, "y1", [5.0, 5.0], [[-1.0, 1.0]])
    sol = koopman_lmpc_solve(scalar_model(), np.zeros(1), prob)
    assert np.all(sol.inputs == 1.0)


def test_ideal_nmpc_steady_noop():
    p = make_plant("column")
    u = np.array([0.8, 1.0])
    x0 = steady_state(p, u)
    D = p.output_map(x0, u)[0]
    prob = ControlProblem(4, "y1", D * np.ones(4), [[0.7, 0.9], [0.8, 1.2]])
    sol = ideal_nmpc_solve(p, x0, prob, u_hold=u)
    assert np.allclose(sol.inputs, u, atol=1e-12)
    assert sol.objective < 1e-12


def test_ideal_nmpc_setpoint_step():
    p = make_plant("column")
    u = np.array([0.8, 1.0])
    x0 = steady_state(p, u)
    prob = ControlProblem(5, "y1", 0.25 * np.ones(5), [[0.7, 0.9], [0.8, 1.2]])
    sol = ideal_nmpc_solve(p, x0, prob, u_hold=u, cfg=SolverConfig(tol=1e-9))
    err = np.abs(sol.predicted_y[:, 0] - 0.25)
    assert np.all(np.diff(err) <= 1e-12)
    assert err[-1] < 1e-6
    assert np.all(sol.inputs >= prob.input_bounds[:, 0]) and np.all(sol.inputs <= prob.input_bounds[:, 1])
